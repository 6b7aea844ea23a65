//! Reverse-mode automatic differentiation over tensors.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes;
//! [`Tape::backward`] walks the list in reverse creation order (a reverse
//! topological order, since an operation's inputs always precede it) and
//! accumulates gradients into every node that requires them. Each node is
//! visited exactly once per pass; a visit counter makes that auditable.

mod adam;
mod conv;
pub mod gemm;
mod gradcheck;
mod ops;

pub use adam::AdamState;
pub use gradcheck::{gradcheck, gradcheck_fn, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    visits: u32,
    op: Op,
}

/// Recorded operation, carrying whatever the backward pass needs.
pub(crate) enum Op {
    Leaf,
    Constant,
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        c: f64,
    },
    Sum {
        input: usize,
    },
    Reshape {
        input: usize,
    },
    Relu {
        input: usize,
    },
    Dense {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Dropout {
        input: usize,
        mask: Vec<f64>,
    },
    SoftmaxXent {
        logits: usize,
        probs: Tensor,
        labels: Vec<usize>,
    },
    BranchMax {
        branches: Vec<usize>,
        winner: Vec<u8>,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        padding: usize,
        stride: usize,
    },
    ConvTranspose2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        stride: usize,
    },
    PerSampleConv2d {
        images: usize,
        filters: usize,
        padding: usize,
    },
}

/// Record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input: gradients will be accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable input (e.g. image batches during training).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass, if one reached this node.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// How often the node's backward rule fired in the last pass.
    pub fn backward_visits(&self, v: Var) -> u32 {
        self.nodes[v.0].visits
    }

    pub(crate) fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite value recorded on tape");
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            visits: 0,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn wants_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Runs one reverse pass from a scalar `root`, accumulating gradients
    /// into every gradient-requiring node that contributed to it.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Arg(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
            n.visits = 0;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(()); // constant graph: nothing to do
        }
        self.nodes[root.0].grad = Some(Tensor::filled(&[1], 1.0)?);

        for i in (0..=root.0).rev() {
            let (lo, hi) = self.nodes.split_at_mut(i);
            let node = &mut hi[0];
            if node.grad.is_none() || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            node.visits += 1;
            let gy = node.grad.as_ref().unwrap();
            step_backward(&node.op, &node.value, gy, lo);
        }
        Ok(())
    }
}

/// Mutable gradient buffer of node `p`, allocated on first touch.
/// `None` when the node does not require gradients: callers skip that path.
fn grad_mut(lo: &mut [Node], p: usize) -> Option<&mut [f64]> {
    let n = &mut lo[p];
    if !n.requires_grad {
        return None;
    }
    if n.grad.is_none() {
        let shape = n.value.shape().to_vec();
        n.grad = Some(Tensor::zeros(&shape));
    }
    Some(n.grad.as_mut().unwrap().data_mut())
}

fn step_backward(op: &Op, value: &Tensor, gy: &Tensor, lo: &mut [Node]) {
    match op {
        Op::Leaf | Op::Constant => {}
        Op::Add { a, b } => {
            for &p in &[*a, *b] {
                if let Some(g) = grad_mut(lo, p) {
                    for (gi, &gyi) in g.iter_mut().zip(gy.iter()) {
                        *gi += gyi;
                    }
                }
            }
        }
        Op::Mul { a, b } => {
            // accumulate sequentially so mul(x, x) double-counts correctly
            let bv: Vec<f64> = lo[*b].value.data().to_vec();
            if let Some(g) = grad_mut(lo, *a) {
                for ((gi, &gyi), &bi) in g.iter_mut().zip(gy.iter()).zip(&bv) {
                    *gi += gyi * bi;
                }
            }
            let av: Vec<f64> = lo[*a].value.data().to_vec();
            if let Some(g) = grad_mut(lo, *b) {
                for ((gi, &gyi), &ai) in g.iter_mut().zip(gy.iter()).zip(&av) {
                    *gi += gyi * ai;
                }
            }
        }
        Op::Scale { input, c } => {
            if let Some(g) = grad_mut(lo, *input) {
                for (gi, &gyi) in g.iter_mut().zip(gy.iter()) {
                    *gi += c * gyi;
                }
            }
        }
        Op::Sum { input } => {
            let gy0 = gy.data()[0];
            if let Some(g) = grad_mut(lo, *input) {
                for gi in g.iter_mut() {
                    *gi += gy0;
                }
            }
        }
        Op::Reshape { input } => {
            if let Some(g) = grad_mut(lo, *input) {
                for (gi, &gyi) in g.iter_mut().zip(gy.iter()) {
                    *gi += gyi;
                }
            }
        }
        Op::Relu { input } => {
            let mask: Vec<bool> = lo[*input].value.data().iter().map(|&x| x > 0.0).collect();
            if let Some(g) = grad_mut(lo, *input) {
                for ((gi, &gyi), keep) in g.iter_mut().zip(gy.iter()).zip(mask) {
                    if keep {
                        *gi += gyi;
                    }
                }
            }
        }
        Op::Dense {
            input,
            weight,
            bias,
        } => ops::backward_dense(*input, *weight, *bias, gy, lo),
        Op::Dropout { input, mask } => {
            if let Some(g) = grad_mut(lo, *input) {
                for ((gi, &gyi), &m) in g.iter_mut().zip(gy.iter()).zip(mask) {
                    *gi += gyi * m;
                }
            }
        }
        Op::SoftmaxXent {
            logits,
            probs,
            labels,
        } => ops::backward_softmax_xent(*logits, probs, labels, gy, lo),
        Op::BranchMax { branches, winner } => {
            for (bi, &b) in branches.iter().enumerate() {
                if let Some(g) = grad_mut(lo, b) {
                    for (e, (gi, &gyi)) in g.iter_mut().zip(gy.iter()).enumerate() {
                        if winner[e] as usize == bi {
                            *gi += gyi;
                        }
                    }
                }
            }
        }
        Op::MaxPool2d { input, argmax } => {
            if let Some(g) = grad_mut(lo, *input) {
                for (o, &src) in argmax.iter().enumerate() {
                    g[src] += gy.data()[o];
                }
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            padding,
            stride,
        } => conv::backward_conv2d(*input, *weight, *bias, *padding, *stride, value, gy, lo),
        Op::ConvTranspose2d {
            input,
            weight,
            bias,
            stride,
        } => conv::backward_conv_transpose2d(*input, *weight, *bias, *stride, gy, lo),
        Op::PerSampleConv2d {
            images,
            filters,
            padding,
        } => conv::backward_per_sample_conv2d(*images, *filters, *padding, gy, lo),
    }
}
