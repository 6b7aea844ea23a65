//! The full derivative-verification suite behind the `gradcheck`
//! subcommand: every differentiable operation is compared against
//! central finite differences, the filter-generator/dynamic-convolution
//! composite is checked end to end (gradients reach the network both
//! through the generated filters and through the convolved image), and
//! a deliberately corrupted check proves the harness can detect errors.

use crate::autograd::{gradcheck, gradcheck_fn, GradCheckReport};
use crate::error::Result;
use crate::filtergen::{dynamic_conv, generate_filters, GeneratorParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Acceptance threshold on the relative error of any single partial.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// Uniform values in +-[0.15, 1.0]: away from zero so piecewise-linear
/// operations (relu, max) are locally smooth at the probe step.
fn off_kink(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = rng.uniform_tensor(shape, -1.0, 1.0).unwrap();
    for v in t.data_mut() {
        *v = v.signum() * (0.15 + 0.85 * v.abs());
    }
    t
}

/// Runs every check in a fixed order. All must satisfy
/// `report.passes(TOLERANCE)`.
pub fn full_suite() -> Result<Vec<GradCheckReport>> {
    let mut rng = Rng::seed(0x6AD5);
    let mut reports = Vec::new();

    let a = off_kink(&mut rng, &[3, 4]);
    let b = off_kink(&mut rng, &[3, 4]);
    reports.push(gradcheck("add", &[a.clone(), b.clone()], STEP, |t, v| {
        let y = t.add(v[0], v[1])?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    })?);
    reports.push(gradcheck("mul", &[a.clone(), b.clone()], STEP, |t, v| {
        let y = t.mul(v[0], v[1])?;
        Ok(t.sum(y))
    })?);
    reports.push(gradcheck("scale", std::slice::from_ref(&a), STEP, |t, v| {
        let y = t.scale(v[0], -1.75);
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    })?);
    reports.push(gradcheck("sum", std::slice::from_ref(&a), STEP, |t, v| {
        let s = t.sum(v[0]);
        t.mul(s, s)
    })?);
    reports.push(gradcheck("reshape", std::slice::from_ref(&a), STEP, |t, v| {
        let y = t.reshape(v[0], &[2, 6])?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    })?);
    reports.push(gradcheck("relu", &[off_kink(&mut rng, &[4, 5])], STEP, |t, v| {
        let y = t.relu(v[0]);
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    })?);

    let x = off_kink(&mut rng, &[3, 4]);
    let w = off_kink(&mut rng, &[4, 5]);
    let bias = off_kink(&mut rng, &[5]);
    reports.push(gradcheck("dense", &[x, w, bias], STEP, |t, v| {
        let y = t.dense(v[0], v[1], v[2])?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    })?);

    reports.push(gradcheck(
        "dropout",
        &[off_kink(&mut rng, &[4, 6])],
        STEP,
        |t, v| {
            // A fresh seeded stream per evaluation keeps the mask fixed,
            // making the function deterministic and differentiable.
            let mut mask_rng = Rng::seed(77);
            let y = t.dropout(v[0], 0.3, &mut mask_rng, true)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
    )?);

    let logits = off_kink(&mut rng, &[4, 10]);
    let labels = [1usize, 7, 0, 9];
    reports.push(gradcheck(
        "softmax-cross-entropy",
        &[logits],
        STEP,
        move |t, v| t.softmax_cross_entropy(v[0], &labels),
    )?);

    // Branch values get distinct offsets so no elementwise tie sits
    // within the probe step of the maximum.
    let b0 = off_kink(&mut rng, &[2, 8]);
    let mut b1 = b0.clone();
    let mut b2 = b0.clone();
    for (i, v) in b1.data_mut().iter_mut().enumerate() {
        *v += if i % 2 == 0 { 0.5 } else { -0.5 };
    }
    for (i, v) in b2.data_mut().iter_mut().enumerate() {
        *v += if i % 3 == 0 { 1.0 } else { -1.0 };
    }
    reports.push(gradcheck("branch-max", &[b0, b1, b2], STEP, |t, v| {
        let y = t.branch_max(&[v[0], v[1], v[2]])?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    })?);

    reports.push(gradcheck(
        "maxpool",
        &[off_kink(&mut rng, &[2, 3, 6, 6])],
        STEP,
        |t, v| {
            let y = t.maxpool2d(v[0], 2, 2)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
    )?);

    let cx = off_kink(&mut rng, &[2, 2, 5, 5]);
    let cw = off_kink(&mut rng, &[3, 2, 3, 3]);
    let cb = off_kink(&mut rng, &[3]);
    reports.push(gradcheck("conv", &[cx, cw, cb], STEP, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 2)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    })?);

    let tx = off_kink(&mut rng, &[2, 2, 3, 3]);
    let tw = off_kink(&mut rng, &[2, 3, 2, 2]);
    let tb = off_kink(&mut rng, &[3]);
    reports.push(gradcheck("conv-transposed", &[tx, tw, tb], STEP, |t, v| {
        let y = t.conv2d_transposed(v[0], v[1], Some(v[2]), 2)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    })?);

    let pi = off_kink(&mut rng, &[2, 2, 4, 4]);
    let pf = off_kink(&mut rng, &[2, 3, 2, 3, 3]);
    reports.push(gradcheck("per-sample-conv", &[pi, pf], STEP, |t, v| {
        let y = t.per_sample_conv2d(v[0], v[1], 1)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    })?);

    // The double-path composite: one image feeds the generator (first
    // path) and the dynamic convolution (second path), so its gradient
    // accumulates through both.
    let gen = GeneratorParams::init(2, &mut Rng::seed(5))?;
    let mut image = Rng::seed(6).uniform_tensor(&[1, 1, 28, 28], 0.05, 1.0)?;
    for v in image.data_mut() {
        *v = 0.05 + 0.95 * *v; // stay clear of the relu kink
    }
    let inputs = vec![
        image,
        gen.conv_w.clone(),
        gen.conv_b.clone(),
        gen.deconv_w.clone(),
        gen.deconv_b.clone(),
    ];
    reports.push(gradcheck(
        "generator-dynamic-conv-composite",
        &inputs,
        STEP,
        |t, v| {
            let gv = crate::filtergen::GeneratorVars {
                conv_w: v[1],
                conv_b: v[2],
                deconv_w: v[3],
                deconv_b: v[4],
            };
            let filters = generate_filters(t, v[0], &gv)?;
            let features = dynamic_conv(t, v[0], filters)?;
            let sq = t.mul(features, features)?;
            Ok(t.sum(sq))
        },
    )?);

    Ok(reports)
}

/// A check whose analytic gradient has one sign flipped. The harness
/// must report failure here; if this "passes", the suite is broken.
pub fn negative_control() -> Result<GradCheckReport> {
    let mut rng = Rng::seed(0xBAD);
    let x = off_kink(&mut rng, &[6]);
    // d/dx sum(x^2) = 2x, with the sign of element 3 flipped.
    let mut wrong = x.clone();
    for (i, v) in wrong.data_mut().iter_mut().enumerate() {
        *v *= if i == 3 { -2.0 } else { 2.0 };
    }
    gradcheck_fn(
        "negative-control (corrupted on purpose)",
        &[x],
        &[wrong],
        STEP,
        |inputs| Ok(inputs[0].iter().map(|v| v * v).sum()),
    )
}
