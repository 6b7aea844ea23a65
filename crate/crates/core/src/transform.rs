//! Image-plane transforms and the ordered transform set that defines the
//! parallel branches of the network.
//!
//! Continuous rotations and scalings use inverse-mapping bilinear
//! resampling about the image center with zero fill. Right-angle
//! rotations additionally have an exact mode that permutes pixel indices
//! instead of resampling, so composing four quarter turns is bit-exact —
//! the property the right-angle invariance guarantee rests on.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    Rotation,
    Scaling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Bilinear,
    /// Rotations that are multiples of 90 degrees become lossless index
    /// permutations; anything else still resamples bilinearly.
    ExactRightAngle,
}

/// The ordered branch set: one transform value per branch. Values are
/// kept sorted and distinct; rotations are normalized into [0,360).
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSet {
    kind: TransformKind,
    values: Vec<f64>,
    interpolation: Interpolation,
}

impl TransformSet {
    pub fn new(kind: TransformKind, values: &[f64], interpolation: Interpolation) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Arg("transform set must be nonempty".into()));
        }
        let mut normalized: Vec<f64> = match kind {
            TransformKind::Rotation => values.iter().map(|v| v.rem_euclid(360.0)).collect(),
            TransformKind::Scaling => {
                if let Some(&bad) = values.iter().find(|&&v| v.is_nan() || v <= 0.0) {
                    return Err(Error::Arg(format!("scale factor must be positive, got {bad}")));
                }
                values.to_vec()
            }
        };
        if normalized.iter().any(|v| !v.is_finite()) {
            return Err(Error::Arg("transform values must be finite".into()));
        }
        normalized.sort_by(|a, b| a.partial_cmp(b).unwrap());
        normalized.dedup();
        Ok(TransformSet {
            kind,
            values: normalized,
            interpolation,
        })
    }

    pub fn rotations(degrees: &[f64]) -> Result<Self> {
        Self::new(TransformKind::Rotation, degrees, Interpolation::Bilinear)
    }

    /// `n` rotations evenly covering the full circle: k*360/n.
    pub fn rotation_grid(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Arg("rotation grid needs n >= 1".into()));
        }
        let values: Vec<f64> = (0..n).map(|k| k as f64 * 360.0 / n as f64).collect();
        Self::new(TransformKind::Rotation, &values, Interpolation::Bilinear)
    }

    /// `n` rotations evenly spaced over [lo,hi] inclusive, in degrees.
    pub fn rotation_span(n: usize, lo: f64, hi: f64) -> Result<Self> {
        let values = even_span(n, lo, hi)?;
        Self::new(TransformKind::Rotation, &values, Interpolation::Bilinear)
    }

    /// `n` scale factors evenly spaced over [lo,hi] inclusive.
    pub fn scale_span(n: usize, lo: f64, hi: f64) -> Result<Self> {
        let values = even_span(n, lo, hi)?;
        Self::new(TransformKind::Scaling, &values, Interpolation::Bilinear)
    }

    pub fn with_interpolation(mut self, interpolation: Interpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// True when every branch is a right-angle rotation handled exactly.
    pub fn all_exact_right_angles(&self) -> bool {
        self.kind == TransformKind::Rotation
            && self.interpolation == Interpolation::ExactRightAngle
            && self.values.iter().all(|v| quarter_turns(*v).is_some())
    }

    /// Applies branch `i` to every plane of a [N,1,H,W] batch.
    pub fn apply_to_batch(&self, index: usize, images: &Tensor) -> Result<Tensor> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Shape(format!(
                "expected [N,1,H,W] batch, got {shape:?}"
            )));
        }
        let value = *self
            .values
            .get(index)
            .ok_or_else(|| Error::Arg(format!("branch {index} of {}", self.len())))?;
        let (h, w) = (shape[2], shape[3]);
        let mut out = vec![0.0; images.numel()];
        for (src, dst) in images
            .data()
            .chunks_exact(h * w)
            .zip(out.chunks_exact_mut(h * w))
        {
            apply_plane(self.kind, value, self.interpolation, src, h, w, dst)?;
        }
        Tensor::from_vec(shape, out)
    }
}

fn even_span(n: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Arg("span needs n >= 1".into()));
    }
    if n > 1 && (lo.is_nan() || hi.is_nan() || lo >= hi) {
        return Err(Error::Arg(format!("span needs lo < hi, got [{lo},{hi}]")));
    }
    if n == 1 {
        return Ok(vec![(lo + hi) / 2.0]);
    }
    let step = (hi - lo) / (n - 1) as f64;
    Ok((0..n).map(|k| lo + k as f64 * step).collect())
}

/// Number of quarter turns if `degrees` is exactly 0, 90, 180 or 270.
fn quarter_turns(degrees: f64) -> Option<usize> {
    [0.0, 90.0, 180.0, 270.0]
        .iter()
        .position(|&q| q == degrees)
}

/// Transforms one [1,H,W] image, dispatching on kind and interpolation.
pub fn apply_transform(
    image: &Tensor,
    kind: TransformKind,
    value: f64,
    interpolation: Interpolation,
) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::Shape(format!("expected [1,H,W] image, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = vec![0.0; h * w];
    apply_plane(kind, value, interpolation, image.data(), h, w, &mut out)?;
    Tensor::from_vec(shape, out)
}

fn apply_plane(
    kind: TransformKind,
    value: f64,
    interpolation: Interpolation,
    src: &[f64],
    h: usize,
    w: usize,
    dst: &mut [f64],
) -> Result<()> {
    match kind {
        TransformKind::Rotation => {
            let normalized = value.rem_euclid(360.0);
            match (interpolation, quarter_turns(normalized)) {
                (Interpolation::ExactRightAngle, Some(q)) => {
                    if h != w && q % 2 == 1 {
                        return Err(Error::Shape(format!(
                            "quarter turns of a non-square {h}x{w} plane"
                        )));
                    }
                    rotate_quarter_plane(src, h, w, q, dst);
                }
                _ => rotate_bilinear_plane(src, h, w, normalized, dst),
            }
        }
        TransformKind::Scaling => {
            if value.is_nan() || value <= 0.0 {
                return Err(Error::Arg(format!("scale factor must be positive, got {value}")));
            }
            scale_bilinear_plane(src, h, w, value, dst);
        }
    }
    Ok(())
}

/// Rotates by `q` quarter turns as a pure index permutation.
pub fn rotate_quarter_plane(src: &[f64], h: usize, w: usize, q: usize, dst: &mut [f64]) {
    assert_eq!(src.len(), h * w);
    assert_eq!(dst.len(), h * w);
    match q % 4 {
        0 => dst.copy_from_slice(src),
        1 => {
            for r in 0..h {
                for c in 0..w {
                    dst[r * w + c] = src[(h - 1 - c) * w + r];
                }
            }
        }
        2 => {
            for r in 0..h {
                for c in 0..w {
                    dst[r * w + c] = src[(h - 1 - r) * w + (w - 1 - c)];
                }
            }
        }
        _ => {
            for r in 0..h {
                for c in 0..w {
                    dst[r * w + c] = src[c * w + (w - 1 - r)];
                }
            }
        }
    }
}

/// Rotates by `degrees` about the plane center via inverse mapping with
/// bilinear interpolation; out-of-bounds reads are zero.
pub fn rotate_bilinear_plane(src: &[f64], h: usize, w: usize, degrees: f64, dst: &mut [f64]) {
    assert_eq!(src.len(), h * w);
    assert_eq!(dst.len(), h * w);
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    for r in 0..h {
        let dy = r as f64 - cy;
        for c in 0..w {
            let dx = c as f64 - cx;
            // Inverse rotation of the destination offset.
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            dst[r * w + c] = sample_bilinear(src, h, w, sy, sx);
        }
    }
}

/// Scales about the plane center by `factor` (output stays HxW) via
/// inverse mapping with bilinear interpolation; zero fill outside.
pub fn scale_bilinear_plane(src: &[f64], h: usize, w: usize, factor: f64, dst: &mut [f64]) {
    assert_eq!(src.len(), h * w);
    assert_eq!(dst.len(), h * w);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    for r in 0..h {
        let sy = cy + (r as f64 - cy) / factor;
        for c in 0..w {
            let sx = cx + (c as f64 - cx) / factor;
            dst[r * w + c] = sample_bilinear(src, h, w, sy, sx);
        }
    }
}

fn sample_bilinear(src: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        let yy = y0 as i64 + dy;
        if yy < 0 || yy >= h as i64 || wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let xx = x0 as i64 + dx;
            if xx < 0 || xx >= w as i64 || wx == 0.0 {
                continue;
            }
            acc += wy * wx * src[yy as usize * w + xx as usize];
        }
    }
    acc
}
