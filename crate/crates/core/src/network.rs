//! The full classifier: every branch applies one transform from the set
//! to the input batch, runs the same weight-shared feature pipeline
//! (dynamic convolution, then two conv/pool stages), the branch outputs
//! merge through an elementwise maximum, and a dense/softmax head turns
//! the merged features into class logits.

use crate::autograd::{AdamState, Tape, Var};
use crate::error::{Error, Result};
use crate::filtergen::{
    self, dynamic_conv, generate_filters, kaiming_uniform, GeneratorParams, GeneratorVars,
};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::transform::TransformSet;

pub const CLASS_COUNT: usize = 10;
/// Flattened feature width after the branch pipeline: 160 maps of 3x3.
pub const FEATURE_WIDTH: usize = 160 * 3 * 3;
/// Flattened extent of one generated filter bank (40 kernels of 3x3).
pub const FILTER_VECTOR_WIDTH: usize = filtergen::FILTER_COUNT * 9;

/// All learnable tensors. One copy serves every branch; there are no
/// per-branch parameters anywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub generator: GeneratorParams,
    pub conv80_w: Tensor,  // [80,40,3,3]
    pub conv80_b: Tensor,  // [80]
    pub conv160_w: Tensor, // [160,80,3,3]
    pub conv160_b: Tensor, // [160]
    pub dense_w: Tensor,   // [1440,hidden]
    pub dense_b: Tensor,   // [hidden]
    pub out_w: Tensor,     // [hidden,10]
    pub out_b: Tensor,     // [10]
}

impl ModelParams {
    pub fn init(generator_channels: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Arg("hidden width must be positive".into()));
        }
        Ok(ModelParams {
            generator: GeneratorParams::init(generator_channels, rng)?,
            conv80_w: kaiming_uniform(rng, &[80, 40, 3, 3], 40 * 9),
            conv80_b: Tensor::zeros(&[80]),
            conv160_w: kaiming_uniform(rng, &[160, 80, 3, 3], 80 * 9),
            conv160_b: Tensor::zeros(&[160]),
            dense_w: kaiming_uniform(rng, &[FEATURE_WIDTH, hidden], FEATURE_WIDTH),
            dense_b: Tensor::zeros(&[hidden]),
            out_w: kaiming_uniform(rng, &[hidden, CLASS_COUNT], hidden),
            out_b: Tensor::zeros(&[CLASS_COUNT]),
        })
    }

    pub fn hidden_width(&self) -> usize {
        self.dense_w.shape()[1]
    }

    pub fn generator_channels(&self) -> usize {
        self.generator.channels()
    }

    /// Canonical (name, tensor) listing; the order is the update and
    /// serialization order everywhere.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("gen.conv_w", &self.generator.conv_w),
            ("gen.conv_b", &self.generator.conv_b),
            ("gen.deconv_w", &self.generator.deconv_w),
            ("gen.deconv_b", &self.generator.deconv_b),
            ("conv80.w", &self.conv80_w),
            ("conv80.b", &self.conv80_b),
            ("conv160.w", &self.conv160_w),
            ("conv160.b", &self.conv160_b),
            ("dense.w", &self.dense_w),
            ("dense.b", &self.dense_b),
            ("out.w", &self.out_w),
            ("out.b", &self.out_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.generator.conv_w,
            &mut self.generator.conv_b,
            &mut self.generator.deconv_w,
            &mut self.generator.deconv_b,
            &mut self.conv80_w,
            &mut self.conv80_b,
            &mut self.conv160_w,
            &mut self.conv160_b,
            &mut self.dense_w,
            &mut self.dense_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    /// Rebuilds params from named tensors (e.g. a loaded checkpoint),
    /// validating every name, presence, and shape relation.
    pub fn from_named(entries: &[(String, Tensor)]) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for (name, t) in entries {
            if map.insert(name.as_str(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        let take = |name: &str| -> Result<Tensor> {
            map.get(name)
                .map(|t| (*t).clone())
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
        };
        let params = ModelParams {
            generator: GeneratorParams {
                conv_w: take("gen.conv_w")?,
                conv_b: take("gen.conv_b")?,
                deconv_w: take("gen.deconv_w")?,
                deconv_b: take("gen.deconv_b")?,
            },
            conv80_w: take("conv80.w")?,
            conv80_b: take("conv80.b")?,
            conv160_w: take("conv160.w")?,
            conv160_b: take("conv160.b")?,
            dense_w: take("dense.w")?,
            dense_b: take("dense.b")?,
            out_w: take("out.w")?,
            out_b: take("out.b")?,
        };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        let cg = self.generator.conv_w.shape().first().copied().unwrap_or(0);
        let hidden = if self.dense_w.rank() == 2 {
            self.dense_w.shape()[1]
        } else {
            0
        };
        let expect: Vec<(&str, &Tensor, Vec<usize>)> = vec![
            ("gen.conv_w", &self.generator.conv_w, vec![cg, 1, 3, 3]),
            ("gen.conv_b", &self.generator.conv_b, vec![cg]),
            ("gen.deconv_w", &self.generator.deconv_w, vec![cg, 40, 2, 2]),
            ("gen.deconv_b", &self.generator.deconv_b, vec![40]),
            ("conv80.w", &self.conv80_w, vec![80, 40, 3, 3]),
            ("conv80.b", &self.conv80_b, vec![80]),
            ("conv160.w", &self.conv160_w, vec![160, 80, 3, 3]),
            ("conv160.b", &self.conv160_b, vec![160]),
            ("dense.w", &self.dense_w, vec![FEATURE_WIDTH, hidden]),
            ("dense.b", &self.dense_b, vec![hidden]),
            ("out.w", &self.out_w, vec![hidden, CLASS_COUNT]),
            ("out.b", &self.out_b, vec![CLASS_COUNT]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        if cg == 0 || hidden == 0 {
            return Err(Error::Format("degenerate parameter extents".into()));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Pushes all parameters onto a tape, trainable or frozen.
    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut push = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ModelVars {
            gen: GeneratorVars {
                conv_w: push(&self.generator.conv_w),
                conv_b: push(&self.generator.conv_b),
                deconv_w: push(&self.generator.deconv_w),
                deconv_b: push(&self.generator.deconv_b),
            },
            conv80_w: push(&self.conv80_w),
            conv80_b: push(&self.conv80_b),
            conv160_w: push(&self.conv160_w),
            conv160_b: push(&self.conv160_b),
            dense_w: push(&self.dense_w),
            dense_b: push(&self.dense_b),
            out_w: push(&self.out_w),
            out_b: push(&self.out_b),
        }
    }
}

/// Tape handles for one instantiation of [`ModelParams`].
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub gen: GeneratorVars,
    pub conv80_w: Var,
    pub conv80_b: Var,
    pub conv160_w: Var,
    pub conv160_b: Var,
    pub dense_w: Var,
    pub dense_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

impl ModelVars {
    /// Same canonical order as [`ModelParams::named_tensors`].
    pub fn all(&self) -> [Var; 12] {
        [
            self.gen.conv_w,
            self.gen.conv_b,
            self.gen.deconv_w,
            self.gen.deconv_b,
            self.conv80_w,
            self.conv80_b,
            self.conv160_w,
            self.conv160_b,
            self.dense_w,
            self.dense_b,
            self.out_w,
            self.out_b,
        ]
    }
}

/// One branch: dynamic conv on self-generated filters, then the two
/// fixed conv/relu/pool stages. [N,1,28,28] -> [N,160,3,3].
pub fn branch_forward(tape: &mut Tape, images: Var, vars: &ModelVars) -> Result<Var> {
    let filters = generate_filters(tape, images, &vars.gen)?;
    let features = dynamic_conv(tape, images, filters)?; // [N,40,14,14]
    let c = tape.conv2d(features, vars.conv80_w, Some(vars.conv80_b), 1, 1)?;
    let c = tape.relu(c);
    let p = tape.maxpool2d(c, 2, 2)?; // [N,80,7,7]
    let c = tape.conv2d(p, vars.conv160_w, Some(vars.conv160_b), 1, 1)?;
    let c = tape.relu(c);
    tape.maxpool2d(c, 2, 2) // [N,160,3,3]
}

/// Full forward pass to logits [N,10]. The transformed batches enter the
/// tape as constants: transforms are fixed preprocessing, not learned.
pub fn model_forward(
    tape: &mut Tape,
    images: &Tensor,
    phi: &TransformSet,
    vars: &ModelVars,
    dropout_rate: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    if phi.is_empty() {
        return Err(Error::Arg("transform set must be nonempty".into()));
    }
    let mut branches = Vec::with_capacity(phi.len());
    for i in 0..phi.len() {
        let transformed = phi.apply_to_batch(i, images)?;
        let input = tape.constant(transformed);
        branches.push(branch_forward(tape, input, vars)?);
    }
    let merged = tape.branch_max(&branches)?; // [N,160,3,3]
    let n = tape.value(merged).shape()[0];
    let flat = tape.reshape(merged, &[n, FEATURE_WIDTH])?;
    let hidden = tape.dense(flat, vars.dense_w, vars.dense_b)?;
    let hidden = tape.relu(hidden);
    let dropped = tape.dropout(hidden, dropout_rate, rng, training)?;
    tape.dense(dropped, vars.out_w, vars.out_b)
}

/// One optimization step; returns the pre-step loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    images: &Tensor,
    labels: &[usize],
    phi: &TransformSet,
    params: &mut ModelParams,
    adam: &mut AdamState,
    dropout_rate: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.vars(&mut tape, true);
    let logits = model_forward(&mut tape, images, phi, &vars, dropout_rate, rng, true)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss_value} on a batch of {} (labels {:?}...)",
            labels.len(),
            &labels[..labels.len().min(8)]
        )));
    }
    tape.backward(loss)?;
    let order = vars.all();
    let grads: Vec<&Tensor> = order
        .iter()
        .map(|v| {
            tape.grad(*v)
                .ok_or_else(|| Error::Numeric("parameter received no gradient".into()))
        })
        .collect::<Result<_>>()?;
    let mut targets = params.tensors_mut();
    adam.apply(&mut targets, &grads)?;
    Ok(loss_value)
}

/// Inference logits for a batch, dropout off, parameters frozen.
pub fn predict_logits(images: &Tensor, phi: &TransformSet, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.vars(&mut tape, false);
    let mut rng = Rng::seed(0); // untouched: dropout is inactive in inference
    let logits = model_forward(&mut tape, images, phi, &vars, 0.0, &mut rng, false)?;
    Ok(tape.value(logits).clone())
}

/// Predicted class per sample (argmax of the logits; first index wins ties).
pub fn predict(images: &Tensor, phi: &TransformSet, params: &ModelParams) -> Result<Vec<usize>> {
    let logits = predict_logits(images, phi, params)?;
    Ok(argmax_rows(&logits))
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Error rate (percent misclassified) over a full labeled set, evaluated
/// in fixed-size chunks to bound the activation footprint.
pub fn evaluate(
    images: &Tensor,
    labels: &[usize],
    phi: &TransformSet,
    params: &ModelParams,
) -> Result<f64> {
    let n = images.shape()[0];
    if n == 0 || labels.len() != n {
        return Err(Error::Arg(format!(
            "evaluate: {n} images vs {} labels",
            labels.len()
        )));
    }
    let plane = images.numel() / n;
    let mut wrong = 0usize;
    for start in (0..n).step_by(64) {
        let end = (start + 64).min(n);
        let chunk = Tensor::from_vec(
            &[end - start, 1, 28, 28],
            images.data()[start * plane..end * plane].to_vec(),
        )?;
        let pred = predict(&chunk, phi, params)?;
        wrong += pred
            .iter()
            .zip(&labels[start..end])
            .filter(|(p, y)| p != y)
            .count();
    }
    Ok(100.0 * wrong as f64 / n as f64)
}

/// Runs only the filter generator over a batch and returns each
/// sample's bank flattened to one row: [N, 360].
pub fn filter_banks(images: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut tape = Tape::new();
    let vars = params.vars(&mut tape, false);
    let x = tape.constant(images.clone());
    let filters = generate_filters(&mut tape, x, &vars.gen)?;
    Tensor::from_vec(&[n, FILTER_VECTOR_WIDTH], tape.value(filters).data().to_vec())
}

/// One exported row: the sample's label and its flattened filter bank.
pub type FilterRow = (usize, Vec<f64>);

/// A class that could not fill its quota: (class, samples available).
pub type ClassShortfall = (usize, usize);

/// Runs the generator on up to `per_class` randomly chosen samples of
/// each class (untransformed) and returns the flattened 360-dim banks.
/// Classes with fewer samples than requested contribute all they have;
/// the second return lists (class, available) for those shortfalls.
pub fn export_filter_vectors(
    images: &Tensor,
    labels: &[usize],
    params: &ModelParams,
    per_class: usize,
    rng: &mut Rng,
) -> Result<(Vec<FilterRow>, Vec<ClassShortfall>)> {
    if per_class == 0 {
        return Err(Error::Arg("need at least one sample per class".into()));
    }
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::Arg(format!(
            "export: {n} images vs {} labels",
            labels.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); CLASS_COUNT];
    for (i, &y) in labels.iter().enumerate() {
        if y >= CLASS_COUNT {
            return Err(Error::Arg(format!("label {y} out of range")));
        }
        by_class[y].push(i);
    }
    let mut selected = Vec::new();
    let mut shortfalls = Vec::new();
    for (class, mut indices) in by_class.into_iter().enumerate() {
        if indices.len() < per_class {
            shortfalls.push((class, indices.len()));
        }
        rng.shuffle(&mut indices);
        indices.truncate(per_class);
        selected.extend(indices.into_iter().map(|i| (class, i)));
    }

    let plane = 28 * 28;
    let mut rows = Vec::with_capacity(selected.len());
    for chunk in selected.chunks(128) {
        let mut batch = Vec::with_capacity(chunk.len() * plane);
        for &(_, i) in chunk {
            batch.extend_from_slice(&images.data()[i * plane..(i + 1) * plane]);
        }
        let batch = Tensor::from_vec(&[chunk.len(), 1, 28, 28], batch)?;
        let f = filter_banks(&batch, params)?;
        for (j, &(class, _)) in chunk.iter().enumerate() {
            let v = f.data()[j * FILTER_VECTOR_WIDTH..(j + 1) * FILTER_VECTOR_WIDTH].to_vec();
            rows.push((class, v));
        }
    }
    Ok((rows, shortfalls))
}

/// Classifies each exported vector by its nearest class centroid and
/// returns the fraction assigned to its own class. Chance is 0.1; well
/// separated filter clusters score far above that.
pub fn centroid_accuracy(rows: &[FilterRow]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Arg("no rows to score".into()));
    }
    let width = rows[0].1.len();
    let mut centroids = vec![vec![0.0; width]; CLASS_COUNT];
    let mut counts = vec![0usize; CLASS_COUNT];
    for (label, v) in rows {
        if v.len() != width {
            return Err(Error::Arg("ragged rows".into()));
        }
        counts[*label] += 1;
        for (c, x) in centroids[*label].iter_mut().zip(v) {
            *c += x;
        }
    }
    for (centroid, &count) in centroids.iter_mut().zip(&counts) {
        if count > 0 {
            for c in centroid.iter_mut() {
                *c /= count as f64;
            }
        }
    }
    let mut hits = 0usize;
    for (label, v) in rows {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (class, centroid) in centroids.iter().enumerate() {
            if counts[class] == 0 {
                continue;
            }
            let d: f64 = centroid
                .iter()
                .zip(v)
                .map(|(c, x)| (c - x) * (c - x))
                .sum();
            if d < best_d {
                best_d = d;
                best = class;
            }
        }
        if best == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows.len() as f64)
}
