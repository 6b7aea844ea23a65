//! Numerical verification of backpropagated gradients by central
//! differences. Every differentiable op extends a checked suite; the
//! report carries the worst element so a failure names its culprit.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Human-readable label for the function under test.
    pub name: String,
    /// Worst relative error |analytic - numeric| / max(1, |a|, |n|).
    pub max_rel_err: f64,
    /// Which input tensor and flat element produced the worst error.
    pub worst_input: usize,
    pub worst_element: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    /// Total number of scalar partial derivatives compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err.is_finite() && self.max_rel_err < tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} over {} partials (input {} elem {}: analytic {:.9e}, numeric {:.9e})",
            self.name,
            self.max_rel_err,
            self.checked,
            self.worst_input,
            self.worst_element,
            self.analytic_at_worst,
            self.numeric_at_worst
        )
    }
}

/// Checks the gradient of a scalar-valued tape program against central
/// differences at step `h`. `build` receives a fresh tape and one leaf
/// per entry of `inputs`, and must return the scalar output variable; it
/// is re-invoked for every perturbed evaluation, so it must be
/// deterministic given the same inputs.
pub fn gradcheck<F>(name: &str, inputs: &[Tensor], h: f64, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &mut build)?;
    gradcheck_fn(name, inputs, &analytic, h, |xs| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars)?;
        scalar_value(&tape, root)
    })
}

/// Compares a supplied analytic gradient against central differences of
/// `eval`. Split out from [`gradcheck`] so a deliberately corrupted
/// gradient can be fed in to prove the comparison has teeth.
pub fn gradcheck_fn<F>(
    name: &str,
    inputs: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    mut eval: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if analytic.len() != inputs.len() {
        return Err(Error::Arg(format!(
            "{} analytic gradients for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    if h <= 0.0 {
        return Err(Error::Arg(format!("step must be positive, got {h}")));
    }
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst_input: 0,
        worst_element: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    for ti in 0..inputs.len() {
        if analytic[ti].shape() != inputs[ti].shape() {
            return Err(Error::Shape(format!(
                "analytic gradient {:?} for input {:?}",
                analytic[ti].shape(),
                inputs[ti].shape()
            )));
        }
        for e in 0..inputs[ti].numel() {
            let x0 = inputs[ti].data()[e];
            work[ti].data_mut()[e] = x0 + h;
            let up = eval(&work)?;
            work[ti].data_mut()[e] = x0 - h;
            let dn = eval(&work)?;
            work[ti].data_mut()[e] = x0;
            let numeric = (up - dn) / (2.0 * h);
            let a = analytic[ti].data()[e];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if !rel.is_finite() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = ti;
                report.worst_element = e;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
                if !rel.is_finite() {
                    return Ok(report);
                }
            }
        }
    }
    Ok(report)
}

fn analytic_gradients<F>(inputs: &[Tensor], build: &mut F) -> Result<Vec<Tensor>>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::Arg(format!(
            "gradcheck root must be scalar, got shape {:?}",
            tape.value(root).shape()
        )));
    }
    tape.backward(root)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| match tape.grad(*v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape()),
        })
        .collect())
}

fn scalar_value(tape: &Tape, root: Var) -> Result<f64> {
    let t = tape.value(root);
    if t.numel() != 1 {
        return Err(Error::Arg(format!(
            "expected scalar output, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}
