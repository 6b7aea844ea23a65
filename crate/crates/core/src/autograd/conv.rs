//! 2-D convolution, transposed convolution, and the per-sample variant
//! where every batch element is convolved with its own filter bank.
//!
//! All three lower to GEMM over patch matrices: the forward pass unfolds
//! the image into columns and multiplies by the filter matrix, and each
//! backward pass is the adjoint of that linear map (a GEMM against the
//! transposed factor plus a fold back into image layout).

use super::{gemm, grad_mut, Node, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Tape {
    /// Cross-correlation of `input` [N,C,H,W] with `weight` [K,C,kh,kw],
    /// zero padding and uniform stride. Optional `bias` is [K].
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
        stride: usize,
    ) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        check_conv_geometry(&xs, &ws, padding, stride)?;
        if xs[1] != ws[1] {
            return Err(Error::Shape(format!(
                "conv2d: input has {} channels, weight expects {}",
                xs[1], ws[1]
            )));
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [ws[0]] {
                return Err(Error::Shape(format!(
                    "conv2d: bias {bs:?} does not match {} output channels",
                    ws[0]
                )));
            }
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (kout, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = gemm::conv_out_extent(h, kh, padding, stride);
        let wo = gemm::conv_out_extent(w, kw, padding, stride);
        let patch = c * kh * kw;

        let mut out = vec![0.0; n * kout * ho * wo];
        let mut cols = vec![0.0; patch * ho * wo];
        {
            let x = self.value(input).data();
            let wm = self.value(weight).data();
            for i in 0..n {
                gemm::im2col(&x[i * c * h * w..(i + 1) * c * h * w], c, h, w, kh, kw, padding, stride, &mut cols);
                gemm::matmul(
                    &mut out[i * kout * ho * wo..(i + 1) * kout * ho * wo],
                    wm,
                    &cols,
                    kout,
                    patch,
                    ho * wo,
                    0.0,
                );
            }
        }
        if let Some(b) = bias {
            let bd = self.value(b).data().to_vec();
            for sample in out.chunks_exact_mut(kout * ho * wo) {
                for (k, plane) in sample.chunks_exact_mut(ho * wo).enumerate() {
                    for v in plane {
                        *v += bd[k];
                    }
                }
            }
        }
        let mut parents = vec![input.0, weight.0];
        if let Some(b) = bias {
            parents.push(b.0);
        }
        let rg = self.wants_grad(&parents);
        Ok(self.push(
            Tensor::from_vec(&[n, kout, ho, wo], out)?,
            rg,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.map(|b| b.0),
                padding,
                stride,
            },
        ))
    }

    /// Transposed convolution (the adjoint of a stride-`stride`, zero-pad
    /// convolution). `input` is [N,C,Hi,Wi], `weight` is [C,K,kh,kw], and
    /// the output is [N,K,(Hi-1)*stride+kh,(Wi-1)*stride+kw].
    pub fn conv2d_transposed(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d_transposed: input {xs:?}, weight {ws:?}"
            )));
        }
        if stride < 1 {
            return Err(Error::Arg("conv2d_transposed: stride must be >= 1".into()));
        }
        if xs[1] != ws[0] {
            return Err(Error::Shape(format!(
                "conv2d_transposed: input has {} channels, weight expects {}",
                xs[1], ws[0]
            )));
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [ws[1]] {
                return Err(Error::Shape(format!(
                    "conv2d_transposed: bias {bs:?} does not match {} output channels",
                    ws[1]
                )));
            }
        }
        let (n, c, hi, wi) = (xs[0], xs[1], xs[2], xs[3]);
        let (kout, kh, kw) = (ws[1], ws[2], ws[3]);
        let ho = (hi - 1) * stride + kh;
        let wo = (wi - 1) * stride + kw;
        let patch = kout * kh * kw;

        let mut out = vec![0.0; n * kout * ho * wo];
        let mut cols = vec![0.0; patch * hi * wi];
        {
            let x = self.value(input).data();
            let wm = self.value(weight).data(); // [c, patch] as a matrix
            for i in 0..n {
                gemm::matmul_at(
                    &mut cols,
                    wm,
                    &x[i * c * hi * wi..(i + 1) * c * hi * wi],
                    patch,
                    c,
                    hi * wi,
                    0.0,
                );
                gemm::col2im_accumulate(
                    &cols,
                    kout,
                    ho,
                    wo,
                    kh,
                    kw,
                    0,
                    stride,
                    &mut out[i * kout * ho * wo..(i + 1) * kout * ho * wo],
                );
            }
        }
        if let Some(b) = bias {
            let bd = self.value(b).data().to_vec();
            for sample in out.chunks_exact_mut(kout * ho * wo) {
                for (k, plane) in sample.chunks_exact_mut(ho * wo).enumerate() {
                    for v in plane {
                        *v += bd[k];
                    }
                }
            }
        }
        let mut parents = vec![input.0, weight.0];
        if let Some(b) = bias {
            parents.push(b.0);
        }
        let rg = self.wants_grad(&parents);
        Ok(self.push(
            Tensor::from_vec(&[n, kout, ho, wo], out)?,
            rg,
            Op::ConvTranspose2d {
                input: input.0,
                weight: weight.0,
                bias: bias.map(|b| b.0),
                stride,
            },
        ))
    }

    /// Bias-free stride-1 convolution where sample `i` of `images`
    /// [N,C,H,W] is convolved with its own bank `filters[i]` from
    /// [N,K,C,kh,kw]. Gradients flow to both images and filters, which is
    /// what lets a network learn to emit the filters themselves.
    pub fn per_sample_conv2d(
        &mut self,
        images: Var,
        filters: Var,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.value(images).shape().to_vec();
        let fs = self.value(filters).shape().to_vec();
        if xs.len() != 4 || fs.len() != 5 {
            return Err(Error::Shape(format!(
                "per_sample_conv2d: images {xs:?}, filters {fs:?}"
            )));
        }
        check_conv_geometry(&xs, &fs[1..], padding, 1)?;
        if xs[0] != fs[0] {
            return Err(Error::Shape(format!(
                "per_sample_conv2d: {} images but {} filter banks",
                xs[0], fs[0]
            )));
        }
        if xs[1] != fs[2] {
            return Err(Error::Shape(format!(
                "per_sample_conv2d: images have {} channels, filters expect {}",
                xs[1], fs[2]
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (kout, kh, kw) = (fs[1], fs[3], fs[4]);
        let ho = gemm::conv_out_extent(h, kh, padding, 1);
        let wo = gemm::conv_out_extent(w, kw, padding, 1);
        let patch = c * kh * kw;

        let mut out = vec![0.0; n * kout * ho * wo];
        let mut cols = vec![0.0; patch * ho * wo];
        {
            let x = self.value(images).data();
            let f = self.value(filters).data();
            for i in 0..n {
                gemm::im2col(&x[i * c * h * w..(i + 1) * c * h * w], c, h, w, kh, kw, padding, 1, &mut cols);
                gemm::matmul(
                    &mut out[i * kout * ho * wo..(i + 1) * kout * ho * wo],
                    &f[i * kout * patch..(i + 1) * kout * patch],
                    &cols,
                    kout,
                    patch,
                    ho * wo,
                    0.0,
                );
            }
        }
        let rg = self.wants_grad(&[images.0, filters.0]);
        Ok(self.push(
            Tensor::from_vec(&[n, kout, ho, wo], out)?,
            rg,
            Op::PerSampleConv2d {
                images: images.0,
                filters: filters.0,
                padding,
            },
        ))
    }
}

fn check_conv_geometry(xs: &[usize], ws: &[usize], padding: usize, stride: usize) -> Result<()> {
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::Shape(format!("conv: input {xs:?}, weight {ws:?}")));
    }
    if stride < 1 {
        return Err(Error::Arg("conv: stride must be >= 1".into()));
    }
    let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::Shape(format!(
            "conv: kernel {kh}x{kw} exceeds padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward_conv2d(
    input: usize,
    weight: usize,
    bias: Option<usize>,
    padding: usize,
    stride: usize,
    value: &Tensor,
    gy: &Tensor,
    lo: &mut [Node],
) {
    let xs = lo[input].value.shape().to_vec();
    let ws = lo[weight].value.shape().to_vec();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (kout, kh, kw) = (ws[0], ws[2], ws[3]);
    let (ho, wo) = (value.shape()[2], value.shape()[3]);
    let patch = c * kh * kw;

    let x: Vec<f64> = lo[input].value.data().to_vec();
    let wm: Vec<f64> = lo[weight].value.data().to_vec();
    let mut cols = vec![0.0; patch * ho * wo];

    if lo[weight].requires_grad {
        // dW[k,p] += sum_i gy_i[k,:] . cols_i[p,:]
        for i in 0..n {
            gemm::im2col(&x[i * c * h * w..(i + 1) * c * h * w], c, h, w, kh, kw, padding, stride, &mut cols);
            let g = grad_mut(lo, weight).unwrap();
            gemm::matmul_bt(
                g,
                &gy.data()[i * kout * ho * wo..(i + 1) * kout * ho * wo],
                &cols,
                kout,
                ho * wo,
                patch,
                1.0,
            );
        }
    }
    if lo[input].requires_grad {
        // dcols_i = W^T gy_i, folded back into image layout
        for i in 0..n {
            gemm::matmul_at(
                &mut cols,
                &wm,
                &gy.data()[i * kout * ho * wo..(i + 1) * kout * ho * wo],
                patch,
                kout,
                ho * wo,
                0.0,
            );
            let g = grad_mut(lo, input).unwrap();
            gemm::col2im_accumulate(
                &cols,
                c,
                h,
                w,
                kh,
                kw,
                padding,
                stride,
                &mut g[i * c * h * w..(i + 1) * c * h * w],
            );
        }
    }
    if let Some(b) = bias {
        if let Some(g) = grad_mut(lo, b) {
            for sample in gy.data().chunks_exact(kout * ho * wo) {
                for (k, plane) in sample.chunks_exact(ho * wo).enumerate() {
                    g[k] += plane.iter().sum::<f64>();
                }
            }
        }
    }
}

pub(super) fn backward_conv_transpose2d(
    input: usize,
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    gy: &Tensor,
    lo: &mut [Node],
) {
    let xs = lo[input].value.shape().to_vec();
    let ws = lo[weight].value.shape().to_vec();
    let (n, c, hi, wi) = (xs[0], xs[1], xs[2], xs[3]);
    let (kout, kh, kw) = (ws[1], ws[2], ws[3]);
    let (ho, wo) = (gy.shape()[2], gy.shape()[3]);
    let patch = kout * kh * kw;

    let x: Vec<f64> = lo[input].value.data().to_vec();
    let wm: Vec<f64> = lo[weight].value.data().to_vec();
    let mut cols = vec![0.0; patch * hi * wi];

    for i in 0..n {
        // The forward scattered columns into the output, so the backward
        // gathers the same taps back out of gy.
        gemm::im2col(
            &gy.data()[i * kout * ho * wo..(i + 1) * kout * ho * wo],
            kout,
            ho,
            wo,
            kh,
            kw,
            0,
            stride,
            &mut cols,
        );
        if lo[input].requires_grad {
            let g = grad_mut(lo, input).unwrap();
            gemm::matmul(
                &mut g[i * c * hi * wi..(i + 1) * c * hi * wi],
                &wm,
                &cols,
                c,
                patch,
                hi * wi,
                1.0,
            );
        }
        if lo[weight].requires_grad {
            let g = grad_mut(lo, weight).unwrap();
            gemm::matmul_bt(
                g,
                &x[i * c * hi * wi..(i + 1) * c * hi * wi],
                &cols,
                c,
                hi * wi,
                patch,
                1.0,
            );
        }
    }
    if let Some(b) = bias {
        if let Some(g) = grad_mut(lo, b) {
            for sample in gy.data().chunks_exact(kout * ho * wo) {
                for (k, plane) in sample.chunks_exact(ho * wo).enumerate() {
                    g[k] += plane.iter().sum::<f64>();
                }
            }
        }
    }
}

pub(super) fn backward_per_sample_conv2d(
    images: usize,
    filters: usize,
    padding: usize,
    gy: &Tensor,
    lo: &mut [Node],
) {
    let xs = lo[images].value.shape().to_vec();
    let fs = lo[filters].value.shape().to_vec();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (kout, kh, kw) = (fs[1], fs[3], fs[4]);
    let (ho, wo) = (gy.shape()[2], gy.shape()[3]);
    let patch = c * kh * kw;

    let x: Vec<f64> = lo[images].value.data().to_vec();
    let f: Vec<f64> = lo[filters].value.data().to_vec();
    let mut cols = vec![0.0; patch * ho * wo];

    for i in 0..n {
        let gy_i = &gy.data()[i * kout * ho * wo..(i + 1) * kout * ho * wo];
        if lo[filters].requires_grad {
            gemm::im2col(&x[i * c * h * w..(i + 1) * c * h * w], c, h, w, kh, kw, padding, 1, &mut cols);
            let g = grad_mut(lo, filters).unwrap();
            gemm::matmul_bt(
                &mut g[i * kout * patch..(i + 1) * kout * patch],
                gy_i,
                &cols,
                kout,
                ho * wo,
                patch,
                1.0,
            );
        }
        if lo[images].requires_grad {
            gemm::matmul_at(
                &mut cols,
                &f[i * kout * patch..(i + 1) * kout * patch],
                gy_i,
                patch,
                kout,
                ho * wo,
                0.0,
            );
            let g = grad_mut(lo, images).unwrap();
            gemm::col2im_accumulate(
                &cols,
                c,
                h,
                w,
                kh,
                kw,
                padding,
                1,
                &mut g[i * c * h * w..(i + 1) * c * h * w],
            );
        }
    }
}
