//! Matrix-multiply and im2col/col2im kernels behind the convolution ops.
//!
//! The GEMM itself is delegated to `matrixmultiply` (pure Rust, single
//! threaded, deterministic); everything here is layout bookkeeping.

/// C[m,n] = A[m,k] * B[k,n] + beta * C. All matrices row-major.
pub fn matmul(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, beta: f64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] = A^T * B + beta * C, where A is stored row-major as [k,m].
pub fn matmul_at(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, beta: f64) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] = A * B^T + beta * C, where B is stored row-major as [n,k].
pub fn matmul_bt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, beta: f64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output spatial extent of a cross-correlation.
pub fn conv_out_extent(input: usize, kernel: usize, padding: usize, stride: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Unfolds one [C,H,W] sample into a [C*kh*kw, Ho*Wo] patch matrix.
/// Out-of-bounds taps read as zero (zero padding).
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: usize,
    stride: usize,
    cols: &mut [f64],
) {
    let ho = conv_out_extent(h, kh, padding, stride);
    let wo = conv_out_extent(w, kw, padding, stride);
    assert_eq!(input.len(), c * h * w);
    assert_eq!(cols.len(), c * kh * kw * ho * wo);

    let mut row = 0;
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                row += 1;
                for y in 0..ho {
                    let sy = (y * stride + i) as isize - padding as isize;
                    let out_row = &mut dst[y * wo..(y + 1) * wo];
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out_row.iter_mut().enumerate() {
                        let sx = (x * stride + j) as isize - padding as isize;
                        *o = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src_row[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back onto the
/// [C,H,W] canvas. `out` is accumulated into, not cleared.
#[allow(clippy::too_many_arguments)]
pub fn col2im_accumulate(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: usize,
    stride: usize,
    out: &mut [f64],
) {
    let ho = conv_out_extent(h, kh, padding, stride);
    let wo = conv_out_extent(w, kw, padding, stride);
    assert_eq!(out.len(), c * h * w);
    assert_eq!(cols.len(), c * kh * kw * ho * wo);

    let mut row = 0;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                row += 1;
                for y in 0..ho {
                    let sy = (y * stride + i) as isize - padding as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src_row = &src[y * wo..(y + 1) * wo];
                    for (x, &v) in src_row.iter().enumerate() {
                        let sx = (x * stride + j) as isize - padding as isize;
                        if sx >= 0 && sx < w as isize {
                            dst_row[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
