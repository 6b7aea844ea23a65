//! Dense row-major f64 tensors.
//!
//! Every numeric value in this crate lives in a [`Tensor`]: images, feature
//! maps, weights, gradients and optimizer moments. Layout is row-major
//! (last index fastest) and fixed globally; element type is always `f64`.

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` with an immutable shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor of the given shape with every element set to `fill`.
    ///
    /// Fails if any extent is zero.
    pub fn filled(shape: &[usize], fill: f64) -> Result<Tensor> {
        let n = checked_numel(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![fill; n],
        })
    }

    /// All-zero tensor. Panics on a zero extent; callers own shape validity.
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::filled(shape, 0.0).expect("internal: invalid shape")
    }

    /// Wraps an existing flat buffer. `data.len()` must equal the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n = checked_numel(shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements but buffer has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Same data, new shape. Element counts must match.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let n = checked_numel(new_shape)?;
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                new_shape,
                n
            )));
        }
        Ok(Tensor {
            shape: new_shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Flat offset of a multi-index under row-major layout.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let off = self.offset(idx);
        self.data[off] = v;
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    let mut n: usize = 1;
    for &e in shape {
        if e == 0 {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        n = n
            .checked_mul(e)
            .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows")))?;
    }
    Ok(n)
}
