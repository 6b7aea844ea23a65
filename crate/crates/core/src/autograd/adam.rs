//! Adam optimizer state: per-parameter first/second moment estimates with
//! bias correction. The moment tensors and step counter are exposed so a
//! checkpoint can capture and restore the optimizer mid-run exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Fresh state with the usual defaults (beta1=0.9, beta2=0.999,
    /// eps=1e-8) and zero moments shaped like `params`.
    pub fn new(lr: f64, params: &[&Tensor]) -> Self {
        Self::with_hyper(lr, 0.9, 0.999, 1e-8, params)
    }

    pub fn with_hyper(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &[&Tensor]) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m,
            v,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Replaces the moment estimates and step counter, e.g. when resuming
    /// from a checkpoint. Shapes must match the originals.
    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Format(format!(
                "optimizer state has {}/{} moment tensors, expected {}",
                m.len(),
                v.len(),
                self.m.len()
            )));
        }
        for (fresh, old) in m.iter().zip(&self.m).chain(v.iter().zip(&self.v)) {
            if fresh.shape() != old.shape() {
                return Err(Error::Format(format!(
                    "optimizer moment shape {:?} does not match parameter shape {:?}",
                    fresh.shape(),
                    old.shape()
                )));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update: advances the step counter, folds `grads` into the
    /// moment estimates, and moves `params` in place.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Arg(format!(
                "adam: {} params / {} grads, state holds {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "adam: param {:?} vs grad {:?} vs moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
