//! Elementwise, pooling, dense, dropout, loss and branch-max operations.

use super::{gemm, grad_mut, Node, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

impl Tape {
    /// Elementwise sum of two same-shape values.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = ta.iter().zip(tb.iter()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(ta.shape(), data)?;
        let rg = self.wants_grad(&[a.0, b.0]);
        Ok(self.push(value, rg, Op::Add { a: a.0, b: b.0 }))
    }

    /// Elementwise product of two same-shape values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = ta.iter().zip(tb.iter()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(ta.shape(), data)?;
        let rg = self.wants_grad(&[a.0, b.0]);
        Ok(self.push(value, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, input: Var, c: f64) -> Var {
        let value = self.value(input).map(|x| c * x);
        let rg = self.wants_grad(&[input.0]);
        self.push(value, rg, Op::Scale { input: input.0, c })
    }

    /// Sum of all elements, as a [1]-shaped scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).iter().sum();
        let rg = self.wants_grad(&[input.0]);
        self.push(
            Tensor::from_vec(&[1], vec![s]).unwrap(),
            rg,
            Op::Sum { input: input.0 },
        )
    }

    pub fn reshape(&mut self, input: Var, new_shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(new_shape)?;
        let rg = self.wants_grad(&[input.0]);
        Ok(self.push(value, rg, Op::Reshape { input: input.0 }))
    }

    /// Elementwise max(0, x). Subgradient at exactly 0 is 0.
    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| x.max(0.0));
        let rg = self.wants_grad(&[input.0]);
        self.push(value, rg, Op::Relu { input: input.0 })
    }

    /// Affine map `x @ w + b` for x: [N,D], w: [D,M], b: [M].
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(input).shape().to_vec(),
            self.value(weight).shape().to_vec(),
            self.value(bias).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::Shape(format!(
                "dense: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; n * m];
        gemm::matmul(
            &mut out,
            self.value(input).data(),
            self.value(weight).data(),
            n,
            d,
            m,
            0.0,
        );
        let b = self.value(bias).data();
        for row in out.chunks_exact_mut(m) {
            for (o, &bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let value = Tensor::from_vec(&[n, m], out)?;
        let rg = self.wants_grad(&[input.0, weight.0, bias.0]);
        Ok(self.push(
            value,
            rg,
            Op::Dense {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
        ))
    }

    /// Inverted dropout: in training, zero each element with probability
    /// `rate` and scale survivors by 1/(1-rate); in inference, identity.
    pub fn dropout(&mut self, input: Var, rate: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Arg(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let n = self.value(input).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.next_f64() < rate { 0.0 } else { keep_scale })
            .collect();
        let data: Vec<f64> = self
            .value(input)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let value = Tensor::from_vec(self.value(input).shape(), data)?;
        let rg = self.wants_grad(&[input.0]);
        Ok(self.push(
            value,
            rg,
            Op::Dropout {
                input: input.0,
                mask,
            },
        ))
    }

    /// Mean softmax cross-entropy over a batch of logits [N,C] with class
    /// indices in [0,C). Stabilized by per-row max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("logits must be [N,C], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(Error::Arg(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Arg(format!("label {bad} out of range [0,{c})")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (pj, &xj) in p.iter_mut().zip(row) {
                *pj = (xj - mx).exp();
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            loss -= p[labels[i]].max(f64::MIN_POSITIVE).ln();
        }
        loss /= n as f64;
        let rg = self.wants_grad(&[logits.0]);
        Ok(self.push(
            Tensor::from_vec(&[1], vec![loss])?,
            rg,
            Op::SoftmaxXent {
                logits: logits.0,
                probs: Tensor::from_vec(&[n, c], probs)?,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Elementwise maximum across same-shape branches. Gradient flows to
    /// the winning branch only; ties go to the lowest branch index.
    pub fn branch_max(&mut self, branches: &[Var]) -> Result<Var> {
        if branches.is_empty() {
            return Err(Error::Arg("branch_max needs at least one branch".into()));
        }
        let shape = self.value(branches[0]).shape().to_vec();
        for &b in &branches[1..] {
            if self.value(b).shape() != shape {
                return Err(Error::Shape(format!(
                    "branch_max: {:?} vs {:?}",
                    shape,
                    self.value(b).shape()
                )));
            }
        }
        if branches.len() > u8::MAX as usize {
            return Err(Error::Arg("branch_max supports at most 255 branches".into()));
        }
        let numel = self.value(branches[0]).numel();
        let mut best: Vec<f64> = self.value(branches[0]).data().to_vec();
        let mut winner = vec![0u8; numel];
        for (bi, &b) in branches.iter().enumerate().skip(1) {
            let data = self.value(b).data();
            for e in 0..numel {
                if data[e] > best[e] {
                    best[e] = data[e];
                    winner[e] = bi as u8;
                }
            }
        }
        let ids: Vec<usize> = branches.iter().map(|v| v.0).collect();
        let rg = self.wants_grad(&ids);
        Ok(self.push(
            Tensor::from_vec(&shape, best)?,
            rg,
            Op::BranchMax {
                branches: ids,
                winner,
            },
        ))
    }

    /// Windowed spatial maximum over [N,C,H,W]. Gradient routes to the
    /// argmax position of each window; ties go to the first position.
    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        if k < 1 || stride < 1 {
            return Err(Error::Arg(format!("maxpool2d: k={k}, stride={stride}")));
        }
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("maxpool2d input must be [N,C,H,W], got {shape:?}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if k > h || k > w {
            return Err(Error::Shape(format!("maxpool2d: window {k} exceeds {h}x{w}")));
        }
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let x = self.value(input).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        let mut o = 0;
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    for i in 0..k {
                        let row = base + (y * stride + i) * w + xo * stride;
                        for j in 0..k {
                            let v = x[row + j];
                            if v > best {
                                best = v;
                                best_at = row + j;
                            }
                        }
                    }
                    out[o] = best;
                    argmax[o] = best_at;
                    o += 1;
                }
            }
        }
        let rg = self.wants_grad(&[input.0]);
        Ok(self.push(
            Tensor::from_vec(&[n, c, ho, wo], out)?,
            rg,
            Op::MaxPool2d {
                input: input.0,
                argmax,
            },
        ))
    }
}

pub(super) fn backward_dense(input: usize, weight: usize, bias: usize, gy: &Tensor, lo: &mut [Node]) {
    let xs = lo[input].value.shape().to_vec();
    let ws = lo[weight].value.shape().to_vec();
    let (n, d, m) = (xs[0], xs[1], ws[1]);

    let x: Vec<f64> = lo[input].value.data().to_vec();
    let w: Vec<f64> = lo[weight].value.data().to_vec();

    // dW = x^T @ gy
    if let Some(g) = grad_mut(lo, weight) {
        gemm::matmul_at(g, &x, gy.data(), d, n, m, 1.0);
    }
    // dx = gy @ W^T
    if let Some(g) = grad_mut(lo, input) {
        gemm::matmul_bt(g, gy.data(), &w, n, m, d, 1.0);
    }
    // db = column sums of gy
    if let Some(g) = grad_mut(lo, bias) {
        for row in gy.data().chunks_exact(m) {
            for (gj, &v) in g.iter_mut().zip(row) {
                *gj += v;
            }
        }
    }
}

pub(super) fn backward_softmax_xent(
    logits: usize,
    probs: &Tensor,
    labels: &[usize],
    gy: &Tensor,
    lo: &mut [Node],
) {
    let n = labels.len();
    let c = probs.shape()[1];
    let scale = gy.data()[0] / n as f64;
    if let Some(g) = grad_mut(lo, logits) {
        for i in 0..n {
            let p = &probs.data()[i * c..(i + 1) * c];
            let gr = &mut g[i * c..(i + 1) * c];
            for (j, (gj, &pj)) in gr.iter_mut().zip(p).enumerate() {
                let y = if j == labels[i] { 1.0 } else { 0.0 };
                *gj += scale * (pj - y);
            }
        }
    }
}
