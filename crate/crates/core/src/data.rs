//! Dataset loading, synthesis and batching.
//!
//! Supported sources: the classic IDX image/label pair (optionally
//! gzip-compressed), the whitespace-separated "amat" text layout with
//! 785 numbers per row, synthesized rotated/scaled variants of a base
//! set, and this crate's own tensor container for prepared datasets.

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::transform::{rotate_bilinear_plane, scale_bilinear_plane};
use std::io::Read;
use std::path::Path;

pub const IMAGE_H: usize = 28;
pub const IMAGE_W: usize = 28;
const PLANE: usize = IMAGE_H * IMAGE_W;
const CLASSES: usize = 10;

/// A labeled image collection. Pixels live in [0,1], labels in [0,10).
/// `meta` describes where the data came from (file path or synthesis
/// recipe including its seed), so runs are self-describing.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    meta: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, meta: String) -> Result<Self> {
        let shape = images.shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != IMAGE_H || shape[3] != IMAGE_W {
            return Err(Error::Shape(format!(
                "dataset images must be [M,1,{IMAGE_H},{IMAGE_W}], got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(Error::Format(format!(
                "{} images vs {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(bad) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("pixel value {bad} outside [0,1]")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= CLASSES) {
            return Err(Error::Format(format!("label {bad} outside [0,{CLASSES})")));
        }
        Ok(Dataset {
            images,
            labels,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn meta(&self) -> &str {
        &self.meta
    }

    /// Copies the given samples into a contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * PLANE);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Arg(format!("index {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * PLANE..(i + 1) * PLANE]);
            labels.push(self.labels[i]);
        }
        Ok((
            Tensor::from_vec(&[indices.len(), 1, IMAGE_H, IMAGE_W], data)?,
            labels,
        ))
    }

    /// Counts samples per class.
    pub fn class_histogram(&self) -> [usize; CLASSES] {
        let mut h = [0usize; CLASSES];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Persists as a tensor container beside a `.meta` text sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let labels: Vec<f64> = self.labels.iter().map(|&l| l as f64).collect();
        let label_tensor = Tensor::from_vec(&[self.len()], labels)?;
        checkpoint::save_tensors(path, &[("images", &self.images), ("labels", &label_tensor)])?;
        std::fs::write(meta_path(path), format!("{}\n", self.meta))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut entries = checkpoint::load_tensors(path)?;
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let [images, labels]: [(String, Tensor); 2] = entries
            .try_into()
            .map_err(|_| Error::Format("dataset container must hold exactly two tensors".into()))?;
        if images.0 != "images" || labels.0 != "labels" {
            return Err(Error::Format(format!(
                "unexpected container records {:?}/{:?}",
                images.0, labels.0
            )));
        }
        let labels = labels
            .1
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..CLASSES as f64).contains(&v) {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("stored label {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<usize>>>()?;
        let meta = std::fs::read_to_string(meta_path(path))
            .map(|s| s.trim_end().to_string())
            .unwrap_or_else(|_| format!("container {}", path.display()));
        Dataset::new(images.1, labels, meta)
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta");
    std::path::PathBuf::from(s)
}

/// Reads a whole file, transparently gunzipping if it starts 1f 8b.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::with_capacity(raw.len() * 4);
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Loads the IDX image/label file pair. Pixels are rescaled from
/// [0,255] bytes to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_maybe_gz(images_path)?;
    if be_u32(&img, 0)? != 0x0000_0803 {
        return Err(Error::Format(format!(
            "{}: not an IDX image file (magic {:#010x})",
            images_path.display(),
            be_u32(&img, 0)?
        )));
    }
    let count = be_u32(&img, 4)? as usize;
    let rows = be_u32(&img, 8)? as usize;
    let cols = be_u32(&img, 12)? as usize;
    if rows != IMAGE_H || cols != IMAGE_W {
        return Err(Error::Format(format!(
            "{}: {rows}x{cols} images, expected {IMAGE_H}x{IMAGE_W}",
            images_path.display()
        )));
    }
    let pixels = img
        .get(16..16 + count * PLANE)
        .ok_or_else(|| Error::Format(format!("{}: truncated pixel data", images_path.display())))?;

    let lab = read_maybe_gz(labels_path)?;
    if be_u32(&lab, 0)? != 0x0000_0801 {
        return Err(Error::Format(format!(
            "{}: not an IDX label file (magic {:#010x})",
            labels_path.display(),
            be_u32(&lab, 0)?
        )));
    }
    let lab_count = be_u32(&lab, 4)? as usize;
    if lab_count != count {
        return Err(Error::Format(format!(
            "{count} images but {lab_count} labels"
        )));
    }
    let label_bytes = lab
        .get(8..8 + count)
        .ok_or_else(|| Error::Format(format!("{}: truncated labels", labels_path.display())))?;

    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    Dataset::new(
        Tensor::from_vec(&[count, 1, IMAGE_H, IMAGE_W], data)?,
        labels,
        format!("idx {} + {}", images_path.display(), labels_path.display()),
    )
}

/// Loads the amat text layout: whitespace-separated rows of 784 pixels
/// in [0,1] followed by the label. `transpose` flips each plane's pixel
/// order from column-major to row-major for files stored the other way.
pub fn load_amat(path: &Path, transpose: bool) -> Result<Dataset> {
    let bytes = read_maybe_gz(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| Error::Format(format!("{}: not a text file", path.display())))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut plane = [0.0; PLANE];
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0usize;
        let mut label_token = 0.0f64;
        for token in line.split_ascii_whitespace() {
            let value: f64 = token.parse().map_err(|_| {
                Error::Format(format!(
                    "{} line {}: bad number {token:?}",
                    path.display(),
                    line_no + 1
                ))
            })?;
            if count < PLANE {
                plane[count] = value;
            } else {
                label_token = value;
            }
            count += 1;
        }
        if count != PLANE + 1 {
            return Err(Error::Format(format!(
                "{} line {}: {count} values, expected {}",
                path.display(),
                line_no + 1,
                PLANE + 1
            )));
        }
        if label_token.fract() != 0.0 || !(0.0..CLASSES as f64).contains(&label_token) {
            return Err(Error::Format(format!(
                "{} line {}: label {label_token} is not a class index",
                path.display(),
                line_no + 1
            )));
        }
        if transpose {
            for r in 0..IMAGE_H {
                for c in 0..IMAGE_W {
                    data.push(plane[c * IMAGE_H + r]);
                }
            }
        } else {
            data.extend_from_slice(&plane);
        }
        labels.push(label_token as usize);
    }
    let count = labels.len();
    Dataset::new(
        Tensor::from_vec(&[count, 1, IMAGE_H, IMAGE_W], data)?,
        labels,
        format!(
            "amat {}{}",
            path.display(),
            if transpose { " (transposed)" } else { "" }
        ),
    )
}

/// Rotates every image by an independent uniform angle from [lo,hi]
/// degrees (bilinear, zero fill). Each image draws from its own RNG
/// stream keyed by (seed, index), so the result does not depend on
/// traversal order. `lo == hi` applies that fixed angle to all.
pub fn synthesize_rotated(base: &Dataset, lo: f64, hi: f64, seed: u64) -> Result<Dataset> {
    if lo.is_nan() || hi.is_nan() || lo > hi {
        return Err(Error::Arg(format!("angle range [{lo},{hi}] is inverted")));
    }
    synthesize(base, seed, format!("rotated[{lo},{hi}]deg seed={seed}"), |i, src, dst| {
        let angle = if lo == hi {
            lo
        } else {
            Rng::stream(seed, i as u64).range(lo, hi)
        };
        if angle == 0.0 {
            dst.copy_from_slice(src);
        } else {
            rotate_bilinear_plane(src, IMAGE_H, IMAGE_W, angle, dst);
        }
    })
}

/// Scales every image about its center by an independent uniform factor
/// from [lo,hi] (bilinear, zero fill, 28x28 canvas preserved).
pub fn synthesize_scaled(base: &Dataset, lo: f64, hi: f64, seed: u64) -> Result<Dataset> {
    if lo.is_nan() || lo <= 0.0 {
        return Err(Error::Arg(format!("scale factor must be positive, got {lo}")));
    }
    if hi.is_nan() || lo > hi {
        return Err(Error::Arg(format!("scale range [{lo},{hi}] is inverted")));
    }
    synthesize(base, seed, format!("scaled[{lo},{hi}] seed={seed}"), |i, src, dst| {
        let factor = if lo == hi {
            lo
        } else {
            Rng::stream(seed, i as u64).range(lo, hi)
        };
        if factor == 1.0 {
            dst.copy_from_slice(src);
        } else {
            scale_bilinear_plane(src, IMAGE_H, IMAGE_W, factor, dst);
        }
    })
}

fn synthesize(
    base: &Dataset,
    _seed: u64,
    recipe: String,
    mut per_plane: impl FnMut(usize, &[f64], &mut [f64]),
) -> Result<Dataset> {
    let mut out = vec![0.0; base.images.numel()];
    for (i, (src, dst)) in base
        .images
        .data()
        .chunks_exact(PLANE)
        .zip(out.chunks_exact_mut(PLANE))
        .enumerate()
    {
        per_plane(i, src, dst);
        // Bilinear weights are a convex combination, but guard exactly.
        for v in dst.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Dataset::new(
        Tensor::from_vec(base.images.shape(), out)?,
        base.labels.clone(),
        format!("{recipe} of ({})", base.meta),
    )
}

/// Deterministic stratified sample of `count` items: class proportions
/// are preserved to within one sample (largest-remainder apportionment),
/// picks within a class and the final order are seeded shuffles.
pub fn subset(ds: &Dataset, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 || count > ds.len() {
        return Err(Error::Arg(format!(
            "subset of {count} from {} samples",
            ds.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); CLASSES];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    // Integer part of the proportional share, then distribute what is
    // left by descending fractional remainder (ties to lower class).
    let m = ds.len() as f64;
    let mut take = [0usize; CLASSES];
    let mut rem: Vec<(f64, usize)> = Vec::new();
    let mut assigned = 0usize;
    for (c, members) in by_class.iter().enumerate() {
        let share = count as f64 * members.len() as f64 / m;
        take[c] = share.floor() as usize;
        assigned += take[c];
        rem.push((share - share.floor(), c));
    }
    rem.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, c) in rem.iter().cycle().take(count - assigned) {
        take[c] += 1;
    }
    let mut picked = Vec::with_capacity(count);
    for (c, mut members) in by_class.into_iter().enumerate() {
        if take[c] > members.len() {
            return Err(Error::Arg(format!(
                "class {c} has {} samples, needs {}",
                members.len(),
                take[c]
            )));
        }
        Rng::stream(seed, c as u64).shuffle(&mut members);
        picked.extend_from_slice(&members[..take[c]]);
    }
    Rng::stream(seed, CLASSES as u64).shuffle(&mut picked);
    let (images, labels) = ds.gather(&picked)?;
    Dataset::new(
        images,
        labels,
        format!("subset[{count}] seed={seed} of ({})", ds.meta),
    )
}

/// One epoch's visit order: a seeded permutation of [0,M) served in
/// batch-size slices (the last slice may be short). The permutation is
/// a pure function of (seed, epoch).
pub struct BatchIter {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchIter {
    pub fn new(m: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Self> {
        if m == 0 || batch_size == 0 {
            return Err(Error::Arg(format!(
                "batch iterator over {m} samples with batch size {batch_size}"
            )));
        }
        let mut order: Vec<usize> = (0..m).collect();
        Rng::stream(seed, epoch).shuffle(&mut order);
        Ok(BatchIter {
            order,
            cursor: 0,
            batch_size,
        })
    }

    pub fn next_batch(&mut self) -> Option<&[usize]> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let slice = &self.order[self.cursor..end];
        self.cursor = end;
        Some(slice)
    }

    pub fn batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

/// Renders one image plane as ASCII art (darker glyphs = brighter
/// pixels), for eyeballing digit orientation.
pub fn ascii_plane(ds: &Dataset, index: usize) -> Result<String> {
    if index >= ds.len() {
        return Err(Error::Arg(format!("index {index} of {}", ds.len())));
    }
    const RAMP: &[u8] = b" .:-=+*#%@";
    let plane = &ds.images.data()[index * PLANE..(index + 1) * PLANE];
    let mut out = String::with_capacity((IMAGE_W + 1) * IMAGE_H + 32);
    out.push_str(&format!("label {}\n", ds.labels[index]));
    for row in plane.chunks_exact(IMAGE_W) {
        for &v in row {
            let i = ((v * (RAMP.len() - 1) as f64).round() as usize).min(RAMP.len() - 1);
            out.push(RAMP[i] as char);
        }
        out.push('\n');
    }
    Ok(out)
}
