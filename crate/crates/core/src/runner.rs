//! Orchestration: turning a validated config into datasets, a training
//! loop with logging and checkpoints, and the evaluation/export paths.
//!
//! Everything here is deterministic given the config: batch order is a
//! pure function of (seed, epoch), synthesis uses per-image streams,
//! and checkpoints capture the complete training state (parameters,
//! optimizer moments, RNG position, epoch and the branch transformation
//! set) so a resumed run is bit-identical to an uninterrupted one.

use crate::autograd::AdamState;
use crate::config::{DatasetKind, RunConfig};
use crate::data::{self, BatchIter, Dataset};
use crate::error::{Error, Result};
use crate::network::{self, ModelParams};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::transform::{Interpolation, TransformKind, TransformSet};
use serde::Serialize;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Environment variable capping worker threads for evaluation.
pub const THREADS_ENV: &str = "CTXCONV_THREADS";

// Tags for deriving independent seed streams from one base seed.
const TAG_SUBSET_TRAIN: u64 = 0x11;
const TAG_SUBSET_TEST: u64 = 0x12;
const TAG_SYNTH_TEST: u64 = 0x13;
const TAG_EXPORT: u64 = 0x14;

fn tag_seed(base: u64, tag: u64) -> u64 {
    Rng::stream(base, tag).next_u64()
}

/// File layout inside a run directory.
pub struct RunPaths {
    pub config: PathBuf,
    pub runlog: PathBuf,
    pub checkpoint: PathBuf,
    pub eval: PathBuf,
    pub filters: PathBuf,
    pub train_set: PathBuf,
    pub test_set: PathBuf,
}

pub fn run_paths(out: &Path) -> RunPaths {
    RunPaths {
        config: out.join("config.txt"),
        runlog: out.join("runlog.jsonl"),
        checkpoint: out.join("checkpoint.ck"),
        eval: out.join("eval.json"),
        filters: out.join("filters.csv"),
        train_set: out.join("train.ds"),
        test_set: out.join("test.ds"),
    }
}

/// Loads the train/test pair described by the config, applying
/// synthesis and (optionally) stratified subsetting.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    let (mut train, mut test) = match d.kind {
        DatasetKind::Idx => (
            data::load_idx(&d.train_images, &d.train_labels)?,
            data::load_idx(&d.test_images, &d.test_labels)?,
        ),
        DatasetKind::Amat => (
            data::load_amat(&d.train, d.transpose_amat)?,
            data::load_amat(&d.test, d.transpose_amat)?,
        ),
        DatasetKind::Rotated => {
            let base_train = data::load_idx(&d.train_images, &d.train_labels)?;
            let base_test = data::load_idx(&d.test_images, &d.test_labels)?;
            (
                data::synthesize_rotated(&base_train, d.angle_lo, d.angle_hi, d.synthesis_seed)?,
                data::synthesize_rotated(
                    &base_test,
                    d.angle_lo,
                    d.angle_hi,
                    tag_seed(d.synthesis_seed, TAG_SYNTH_TEST),
                )?,
            )
        }
        DatasetKind::Scaled => {
            let base_train = data::load_idx(&d.train_images, &d.train_labels)?;
            let base_test = data::load_idx(&d.test_images, &d.test_labels)?;
            (
                data::synthesize_scaled(&base_train, d.scale_lo, d.scale_hi, d.synthesis_seed)?,
                data::synthesize_scaled(
                    &base_test,
                    d.scale_lo,
                    d.scale_hi,
                    tag_seed(d.synthesis_seed, TAG_SYNTH_TEST),
                )?,
            )
        }
        DatasetKind::Container => (Dataset::load(&d.train)?, Dataset::load(&d.test)?),
    };
    if d.subset_train > 0 {
        train = data::subset(&train, d.subset_train, tag_seed(cfg.seed, TAG_SUBSET_TRAIN))?;
    }
    if d.subset_test > 0 {
        test = data::subset(&test, d.subset_test, tag_seed(cfg.seed, TAG_SUBSET_TEST))?;
    }
    Ok((train, test))
}

/// Materializes the configured datasets (synthesis included, subsets
/// excluded — those stay a cheap train-time lever) into the run
/// directory. Rewrites the same bytes when repeated with one config.
pub fn prepare(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let mut plain = cfg.clone();
    plain.dataset.subset_train = 0;
    plain.dataset.subset_test = 0;
    let (train, test) = load_datasets(&plain)?;
    std::fs::create_dir_all(&cfg.out)?;
    let paths = run_paths(&cfg.out);
    train.save(&paths.train_set)?;
    test.save(&paths.test_set)?;
    Ok((paths.train_set, paths.test_set))
}

// ---------------------------------------------------------------------------
// Training-state checkpoints
// ---------------------------------------------------------------------------

/// Complete training state reloaded from a checkpoint.
pub struct TrainingState {
    pub params: ModelParams,
    pub adam_step: u64,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    /// Completed epochs.
    pub epoch: u64,
    pub rng_state: u64,
    pub phi: TransformSet,
}

fn split_u64(x: u64) -> [f64; 2] {
    [(x >> 32) as f64, (x & 0xFFFF_FFFF) as f64]
}

fn join_u64(halves: &Tensor) -> Result<u64> {
    let d = halves.data();
    if d.len() != 2 || d.iter().any(|&v| v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64) {
        return Err(Error::Format("stored RNG state is malformed".into()));
    }
    Ok(((d[0] as u64) << 32) | d[1] as u64)
}

fn scalar(x: f64) -> Tensor {
    Tensor::from_vec(&[1], vec![x]).expect("1-element tensor")
}

pub fn save_training_state(
    path: &Path,
    params: &ModelParams,
    adam: &AdamState,
    epoch: u64,
    rng_state: u64,
    phi: &TransformSet,
) -> Result<()> {
    let named = params.named_tensors();
    let (m, v) = adam.moments();
    if m.len() != named.len() {
        return Err(Error::Arg(format!(
            "{} optimizer slots for {} parameters",
            m.len(),
            named.len()
        )));
    }
    let mut owned_names: Vec<String> = Vec::new();
    for (name, _) in &named {
        owned_names.push(format!("adam.m.{name}"));
        owned_names.push(format!("adam.v.{name}"));
    }
    let meta = [
        ("meta.adam_step", scalar(adam.step_count() as f64)),
        ("meta.epoch", scalar(epoch as f64)),
        (
            "meta.rng",
            Tensor::from_vec(&[2], split_u64(rng_state).to_vec())?,
        ),
        (
            "meta.phi_kind",
            scalar(match phi.kind() {
                TransformKind::Rotation => 0.0,
                TransformKind::Scaling => 1.0,
            }),
        ),
        (
            "meta.phi_exact",
            scalar(f64::from(phi.interpolation() == Interpolation::ExactRightAngle)),
        ),
        (
            "meta.phi_values",
            Tensor::from_vec(&[phi.len()], phi.values().to_vec())?,
        ),
    ];
    let mut entries: Vec<(&str, &Tensor)> = Vec::new();
    for (i, (name, t)) in named.iter().enumerate() {
        entries.push((name, t));
        entries.push((&owned_names[2 * i], &m[i]));
        entries.push((&owned_names[2 * i + 1], &v[i]));
    }
    for (name, t) in &meta {
        entries.push((name, t));
    }
    crate::checkpoint::save_tensors(path, &entries)
}

pub fn load_training_state(path: &Path) -> Result<TrainingState> {
    let entries = crate::checkpoint::load_tensors(path)?;
    let mut params_entries = Vec::new();
    let mut m_map = std::collections::HashMap::new();
    let mut v_map = std::collections::HashMap::new();
    let mut meta = std::collections::HashMap::new();
    for (name, t) in entries {
        if let Some(rest) = name.strip_prefix("adam.m.") {
            m_map.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            v_map.insert(rest.to_string(), t);
        } else if name.starts_with("meta.") {
            meta.insert(name, t);
        } else {
            params_entries.push((name, t));
        }
    }
    let params = ModelParams::from_named(&params_entries)?;
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();
    for (name, _) in params.named_tensors() {
        adam_m.push(
            m_map
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks adam.m.{name}")))?,
        );
        adam_v.push(
            v_map
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks adam.v.{name}")))?,
        );
    }
    let mut take = |key: &str| -> Result<Tensor> {
        meta.remove(key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))
    };
    let adam_step = take("meta.adam_step")?.data()[0] as u64;
    let epoch = take("meta.epoch")?.data()[0] as u64;
    let rng_state = join_u64(&take("meta.rng")?)?;
    let kind = match take("meta.phi_kind")?.data()[0] as i64 {
        0 => TransformKind::Rotation,
        1 => TransformKind::Scaling,
        other => return Err(Error::Format(format!("unknown stored phi kind {other}"))),
    };
    let interp = if take("meta.phi_exact")?.data()[0] != 0.0 {
        Interpolation::ExactRightAngle
    } else {
        Interpolation::Bilinear
    };
    let phi = TransformSet::new(kind, take("meta.phi_values")?.data(), interp)?;
    Ok(TrainingState {
        params,
        adam_step,
        adam_m,
        adam_v,
        epoch,
        rng_state,
        phi,
    })
}

// ---------------------------------------------------------------------------
// Run log records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub record: &'static str,
    pub epoch: u64,
    pub mean_train_loss: f64,
    pub train_error_percent: Option<f64>,
    pub test_error_percent: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRecord {
    pub record: &'static str,
    pub epochs: u64,
    pub final_train_error_percent: Option<f64>,
    pub final_test_error_percent: Option<f64>,
    pub total_seconds: f64,
    pub resumed_from_epoch: Option<u64>,
}

pub struct TrainReport {
    pub params: ModelParams,
    pub epochs_completed: u64,
    pub final_train_error: Option<f64>,
    pub final_test_error: Option<f64>,
    pub records: Vec<EpochRecord>,
    pub resumed_from: Option<u64>,
    pub checkpoint: PathBuf,
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

/// Runs (or resumes) training in `cfg.out`. Every run-log line is also
/// passed to `on_line` for console mirroring. Resuming requires the
/// checkpoint's transformation set and model extents to match the
/// config; a finished run returns immediately with the stored state.
pub fn train_run(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    mut on_line: impl FnMut(&str),
) -> Result<TrainReport> {
    cfg.validate()?;
    let phi = cfg.phi_set()?;
    std::fs::create_dir_all(&cfg.out)?;
    let paths = run_paths(&cfg.out);
    std::fs::write(&paths.config, cfg.serialize())?;

    let mut resumed_from = None;
    let (mut params, mut adam, mut rng, start_epoch) = if paths.checkpoint.exists() {
        let state = load_training_state(&paths.checkpoint)?;
        if state.phi != phi {
            return Err(Error::Config(format!(
                "checkpoint in {} was trained with transformations {:?}, config asks {:?}; \
                 use a fresh --out directory to change them",
                cfg.out.display(),
                state.phi.values(),
                phi.values()
            )));
        }
        if state.params.generator_channels() != cfg.model.generator_channels
            || state.params.hidden_width() != cfg.model.hidden
        {
            return Err(Error::Config(format!(
                "checkpoint model extents ({} generator channels, hidden {}) \
                 do not match the config ({}, {})",
                state.params.generator_channels(),
                state.params.hidden_width(),
                cfg.model.generator_channels,
                cfg.model.hidden
            )));
        }
        let mut adam = AdamState::with_hyper(
            cfg.opt.lr,
            cfg.opt.beta1,
            cfg.opt.beta2,
            cfg.opt.eps,
            &state.params.named_tensors().iter().map(|(_, t)| *t).collect::<Vec<_>>(),
        );
        adam.restore(state.adam_step, state.adam_m, state.adam_v)?;
        resumed_from = Some(state.epoch);
        (
            state.params,
            adam,
            Rng::restore(state.rng_state),
            state.epoch,
        )
    } else {
        let mut rng = Rng::seed(cfg.seed);
        let params = ModelParams::init(cfg.model.generator_channels, cfg.model.hidden, &mut rng)?;
        let adam = AdamState::with_hyper(
            cfg.opt.lr,
            cfg.opt.beta1,
            cfg.opt.beta2,
            cfg.opt.eps,
            &params.named_tensors().iter().map(|(_, t)| *t).collect::<Vec<_>>(),
        );
        (params, adam, rng, 0)
    };

    let total_clock = Instant::now();
    let mut records = Vec::new();
    let mut final_train_error = None;
    let mut final_test_error = None;
    let threads = worker_threads()?;

    for epoch in start_epoch..cfg.schedule.epochs {
        let clock = Instant::now();
        let mut iter = BatchIter::new(train.len(), cfg.opt.batch_size, cfg.seed, epoch)?;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        while let Some(batch) = iter.next_batch() {
            let (images, labels) = train.gather(batch)?;
            let loss = network::train_step(
                &images,
                &labels,
                &phi,
                &mut params,
                &mut adam,
                cfg.model.dropout,
                &mut rng,
            )
            .inspect_err(|e| {
                let diag = format!(
                    "{{\"record\":\"abort\",\"epoch\":{epoch},\"batch\":{batches},\"error\":{:?}}}",
                    e.to_string()
                );
                let _ = append_line(&paths.runlog, &diag);
                on_line(&diag);
            })?;
            loss_sum += loss;
            batches += 1;
        }

        let is_last = epoch + 1 == cfg.schedule.epochs;
        let do_eval = (epoch + 1) % cfg.schedule.eval_every == 0 || is_last;
        let (train_err, test_err) = if do_eval {
            let tr = evaluate_parallel(train.images(), train.labels(), &phi, &params, threads)?;
            let te = evaluate_parallel(test.images(), test.labels(), &phi, &params, threads)?;
            final_train_error = Some(tr);
            final_test_error = Some(te);
            (Some(tr), Some(te))
        } else {
            (None, None)
        };

        let record = EpochRecord {
            record: "epoch",
            epoch,
            mean_train_loss: loss_sum / batches.max(1) as f64,
            train_error_percent: train_err,
            test_error_percent: test_err,
            seconds: clock.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&record)?;
        append_line(&paths.runlog, &line)?;
        on_line(&line);
        records.push(record);

        let do_checkpoint = is_last
            || (cfg.schedule.checkpoint_every > 0
                && (epoch + 1) % cfg.schedule.checkpoint_every == 0);
        if do_checkpoint {
            save_training_state(
                &paths.checkpoint,
                &params,
                &adam,
                epoch + 1,
                rng.state(),
                &phi,
            )?;
        }
    }

    if start_epoch < cfg.schedule.epochs {
        let summary = SummaryRecord {
            record: "summary",
            epochs: cfg.schedule.epochs,
            final_train_error_percent: final_train_error,
            final_test_error_percent: final_test_error,
            total_seconds: total_clock.elapsed().as_secs_f64(),
            resumed_from_epoch: resumed_from,
        };
        let line = serde_json::to_string(&summary)?;
        append_line(&paths.runlog, &line)?;
        on_line(&line);
    }

    Ok(TrainReport {
        params,
        epochs_completed: cfg.schedule.epochs.max(start_epoch),
        final_train_error,
        final_test_error,
        records,
        resumed_from,
        checkpoint: paths.checkpoint,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Parses a worker-thread count: a positive integer.
pub fn parse_thread_count(value: Option<&str>) -> Result<usize> {
    match value {
        None => Ok(1),
        Some(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {s:?}"
            ))),
        },
    }
}

/// Worker threads from the environment (default 1).
pub fn worker_threads() -> Result<usize> {
    parse_thread_count(std::env::var(THREADS_ENV).ok().as_deref())
}

/// Error percentage over a dataset, split across up to `threads`
/// workers. The per-sample work is order-independent, so the result is
/// identical for every thread count.
pub fn evaluate_parallel(
    images: &Tensor,
    labels: &[usize],
    phi: &TransformSet,
    params: &ModelParams,
    threads: usize,
) -> Result<f64> {
    let n = images.shape()[0];
    if threads <= 1 || n < 128 {
        return network::evaluate(images, labels, phi, params);
    }
    let plane = images.numel() / n;
    let span = n.div_ceil(threads);
    let wrong_total = std::thread::scope(|scope| -> Result<usize> {
        let mut handles = Vec::new();
        for t in 0..threads {
            let start = t * span;
            let end = ((t + 1) * span).min(n);
            if start >= end {
                break;
            }
            let slice = &images.data()[start * plane..end * plane];
            let labels = &labels[start..end];
            handles.push(scope.spawn(move || -> Result<usize> {
                let mut wrong = 0usize;
                for cstart in (0..labels.len()).step_by(64) {
                    let cend = (cstart + 64).min(labels.len());
                    let chunk = Tensor::from_vec(
                        &[cend - cstart, 1, 28, 28],
                        slice[cstart * plane..cend * plane].to_vec(),
                    )?;
                    let pred = network::predict(&chunk, phi, params)?;
                    wrong += pred
                        .iter()
                        .zip(&labels[cstart..cend])
                        .filter(|(p, y)| p != y)
                        .count();
                }
                Ok(wrong)
            }));
        }
        let mut wrong = 0usize;
        for h in handles {
            wrong += h.join().map_err(|_| {
                Error::Numeric("evaluation worker panicked".into())
            })??;
        }
        Ok(wrong)
    })?;
    Ok(100.0 * wrong_total as f64 / n as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub error_percent: f64,
    pub samples: usize,
    pub dataset: String,
    pub checkpoint_epoch: u64,
}

fn load_params_for_inference(
    cfg: &RunConfig,
    allow_phi_mismatch: bool,
) -> Result<(ModelParams, TransformSet, u64)> {
    let paths = run_paths(&cfg.out);
    if !paths.checkpoint.exists() {
        return Err(Error::Config(format!(
            "no checkpoint at {}; train first",
            paths.checkpoint.display()
        )));
    }
    let state = load_training_state(&paths.checkpoint)?;
    let phi = cfg.phi_set()?;
    if state.phi != phi {
        if !allow_phi_mismatch {
            return Err(Error::Config(format!(
                "checkpoint was trained with {:?} transformations {:?} but the config asks \
                 {:?} {:?}; pass --allow-phi-mismatch to evaluate anyway",
                state.phi.kind(),
                state.phi.values(),
                phi.kind(),
                phi.values()
            )));
        }
        return Ok((state.params, phi, state.epoch));
    }
    let epoch = state.epoch;
    Ok((state.params, state.phi, epoch))
}

/// Evaluates the run's checkpoint on the configured test set and writes
/// `eval.json` into the run directory.
pub fn eval_checkpoint(cfg: &RunConfig, allow_phi_mismatch: bool) -> Result<EvalReport> {
    let (params, phi, epoch) = load_params_for_inference(cfg, allow_phi_mismatch)?;
    let (_, test) = load_datasets(cfg)?;
    let threads = worker_threads()?;
    let error = evaluate_parallel(test.images(), test.labels(), &phi, &params, threads)?;
    let report = EvalReport {
        error_percent: error,
        samples: test.len(),
        dataset: test.meta().to_string(),
        checkpoint_epoch: epoch,
    };
    std::fs::write(run_paths(&cfg.out).eval, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug)]
pub struct ExportReport {
    pub csv: PathBuf,
    pub rows: usize,
    pub centroid_accuracy_percent: f64,
    pub shortfalls: Vec<(usize, usize)>,
}

/// Generates filter banks for test samples with the trained generator,
/// writes them as CSV (label), and reports how well class centroids
/// alone separate them.
pub fn export_filters_csv(cfg: &RunConfig, per_class: usize) -> Result<ExportReport> {
    let (params, _, _) = load_params_for_inference(cfg, true)?;
    let (_, test) = load_datasets(cfg)?;
    let mut rng = Rng::seed(tag_seed(cfg.seed, TAG_EXPORT));
    let (rows, shortfalls) = network::export_filter_vectors(
        test.images(),
        test.labels(),
        &params,
        per_class,
        &mut rng,
    )?;
    let paths = run_paths(&cfg.out);
    let mut out = String::new();
    out.push_str("label");
    for i in 1..=network::FILTER_VECTOR_WIDTH {
        out.push_str(&format!(",v{i}"));
    }
    out.push('\n');
    for (label, vector) in &rows {
        out.push_str(&label.to_string());
        for v in vector {
            out.push_str(&format!(",{v:.8e}"));
        }
        out.push('\n');
    }
    std::fs::write(&paths.filters, out)?;
    let accuracy = network::centroid_accuracy(&rows)?;
    Ok(ExportReport {
        csv: paths.filters,
        rows: rows.len(),
        centroid_accuracy_percent: 100.0 * accuracy,
        shortfalls,
    })
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;

    /// A small but learnable synthetic dataset: each class paints a
    /// distinct block pattern, plus pixel noise.
    fn synthetic_dataset(m: usize, seed: u64) -> Dataset {
        let mut rng = Rng::seed(seed);
        let mut data = vec![0.0; m * 784];
        let mut labels = Vec::with_capacity(m);
        for i in 0..m {
            let class = i % 10;
            let plane = &mut data[i * 784..(i + 1) * 784];
            for v in plane.iter_mut() {
                *v = rng.range(0.0, 0.15);
            }
            let (r0, c0) = (3 + 2 * (class / 5), 2 + 5 * (class % 5));
            for r in r0..r0 + 8 {
                for c in c0..c0 + 3 {
                    plane[r * 28 + c] = 1.0;
                }
            }
            labels.push(class);
        }
        Dataset::new(
            Tensor::from_vec(&[m, 1, 28, 28], data).unwrap(),
            labels,
            format!("synthetic m={m} seed={seed}"),
        )
        .unwrap()
    }

    fn tiny_config(out: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.out = out.to_path_buf();
        cfg.seed = 11;
        cfg.model.generator_channels = 4;
        cfg.model.hidden = 32;
        cfg.phi.values = vec![0.0, 180.0];
        cfg.opt.batch_size = 16;
        cfg.schedule.epochs = 2;
        cfg.schedule.eval_every = 1;
        cfg.schedule.checkpoint_every = 1;
        cfg
    }

    #[test]
    fn training_state_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ck");
        let mut rng = Rng::seed(3);
        let params = ModelParams::init(3, 16, &mut rng).unwrap();
        let refs: Vec<&Tensor> = params.named_tensors().iter().map(|(_, t)| *t).collect();
        let mut adam = AdamState::new(1e-3, &refs);
        // Give the moments non-trivial content via one update.
        let grads: Vec<Tensor> = refs
            .iter()
            .map(|t| {
                let mut g = Tensor::zeros(t.shape());
                g.data_mut().iter_mut().enumerate().for_each(|(i, v)| {
                    *v = (i as f64 * 0.01).sin();
                });
                g
            })
            .collect();
        let mut params2 = params.clone();
        {
            let mut targets = params2.tensors_mut();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adam.apply(&mut targets, &grad_refs).unwrap();
        }
        let phi = TransformSet::rotation_grid(4)
            .unwrap()
            .with_interpolation(Interpolation::ExactRightAngle);
        save_training_state(&path, &params2, &adam, 7, 0xDEAD_BEEF_CAFE_F00D, &phi).unwrap();

        let state = load_training_state(&path).unwrap();
        assert_eq!(state.params, params2);
        assert_eq!(state.adam_step, 1);
        assert_eq!(state.epoch, 7);
        assert_eq!(state.rng_state, 0xDEAD_BEEF_CAFE_F00D);
        assert_eq!(state.phi, phi);
        let (m, v) = adam.moments();
        assert_eq!(state.adam_m, m);
        assert_eq!(state.adam_v, v);
    }

    #[test]
    fn train_run_writes_log_config_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(&dir.path().join("run"));
        let train = synthetic_dataset(48, 1);
        let test = synthetic_dataset(20, 2);
        let mut lines = Vec::new();
        let report = train_run(&cfg, &train, &test, |l| lines.push(l.to_string())).unwrap();

        assert_eq!(report.records.len(), 2);
        assert!(report.records.iter().all(|r| r.mean_train_loss.is_finite()));
        assert!(report.final_test_error.is_some());
        assert_eq!(lines.len(), 3); // two epochs + summary

        let paths = run_paths(&cfg.out);
        let logged = std::fs::read_to_string(&paths.runlog).unwrap();
        assert_eq!(logged.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(logged.lines().next().unwrap()).unwrap();
        assert_eq!(first["record"], "epoch");
        assert_eq!(first["epoch"], 0);
        let last: serde_json::Value = serde_json::from_str(logged.lines().last().unwrap()).unwrap();
        assert_eq!(last["record"], "summary");

        let stored = RunConfig::from_file(&paths.config).unwrap();
        assert_eq!(stored, cfg);
        let state = load_training_state(&paths.checkpoint).unwrap();
        assert_eq!(state.epoch, 2);
        assert_eq!(state.params, report.params);
    }

    #[test]
    fn identical_configs_give_bit_identical_runs() {
        let dir = tempfile::tempdir().unwrap();
        let train = synthetic_dataset(32, 3);
        let test = synthetic_dataset(10, 4);
        let mut reports = Vec::new();
        for sub in ["a", "b"] {
            let cfg = tiny_config(&dir.path().join(sub));
            reports.push(train_run(&cfg, &train, &test, |_| {}).unwrap());
        }
        let (a, b) = (&reports[0], &reports[1]);
        assert_eq!(a.params, b.params);
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.mean_train_loss.to_bits(), rb.mean_train_loss.to_bits());
        }
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let train = synthetic_dataset(32, 5);
        let test = synthetic_dataset(10, 6);

        let mut straight = tiny_config(&dir.path().join("straight"));
        straight.schedule.epochs = 4;
        let full = train_run(&straight, &train, &test, |_| {}).unwrap();

        let mut halted = tiny_config(&dir.path().join("halted"));
        halted.schedule.epochs = 2;
        train_run(&halted, &train, &test, |_| {}).unwrap();
        halted.schedule.epochs = 4;
        let resumed = train_run(&halted, &train, &test, |_| {}).unwrap();

        assert_eq!(resumed.resumed_from, Some(2));
        assert_eq!(resumed.params, full.params);
        assert_eq!(
            resumed.final_test_error.unwrap().to_bits(),
            full.final_test_error.unwrap().to_bits()
        );
    }

    #[test]
    fn finished_run_is_a_no_op_and_mismatches_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let train = synthetic_dataset(32, 7);
        let test = synthetic_dataset(10, 8);
        let cfg = tiny_config(&dir.path().join("done"));
        let first = train_run(&cfg, &train, &test, |_| {}).unwrap();

        // Same config again: nothing new happens.
        let mut lines = Vec::new();
        let again = train_run(&cfg, &train, &test, |l| lines.push(l.to_string())).unwrap();
        assert!(lines.is_empty());
        assert_eq!(again.params, first.params);
        assert_eq!(again.resumed_from, Some(2));

        // Changing the transformation set or extents in place is refused.
        let mut changed = cfg.clone();
        changed.phi.values = vec![0.0, 90.0];
        assert!(train_run(&changed, &train, &test, |_| {}).is_err());
        let mut widened = cfg.clone();
        widened.model.hidden = 64;
        assert!(train_run(&widened, &train, &test, |_| {}).is_err());
    }

    #[test]
    fn loss_decreases_on_learnable_synthetic_data() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(&dir.path().join("learn"));
        cfg.schedule.epochs = 5;
        cfg.model.dropout = 0.0;
        let train = synthetic_dataset(40, 9);
        let report = train_run(&cfg, &train, &train, |_| {}).unwrap();
        let first = report.records.first().unwrap().mean_train_loss;
        let last = report.records.last().unwrap().mean_train_loss;
        assert!(
            last < 0.5 * first,
            "loss {first} -> {last} did not drop enough"
        );
    }

    #[test]
    fn eval_checkpoint_enforces_phi_match() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(&dir.path().join("eval"));
        // Route the dataset through containers so eval can reload it.
        let train = synthetic_dataset(32, 10);
        let test = synthetic_dataset(20, 11);
        std::fs::create_dir_all(&cfg.out).unwrap();
        let paths = run_paths(&cfg.out);
        train.save(&paths.train_set).unwrap();
        test.save(&paths.test_set).unwrap();
        cfg.dataset.kind = DatasetKind::Container;
        cfg.dataset.train = paths.train_set.clone();
        cfg.dataset.test = paths.test_set.clone();

        train_run(&cfg, &train, &test, |_| {}).unwrap();
        let report = eval_checkpoint(&cfg, false).unwrap();
        assert_eq!(report.samples, 20);
        assert!((0.0..=100.0).contains(&report.error_percent));
        assert!(paths.eval.exists());

        let mut other = cfg.clone();
        other.phi.values = vec![0.0, 90.0, 180.0];
        let err = eval_checkpoint(&other, false).unwrap_err();
        assert!(err.to_string().contains("--allow-phi-mismatch"), "{err}");
        assert!(eval_checkpoint(&other, true).is_ok());

        let mut empty = cfg.clone();
        empty.out = dir.path().join("never-trained");
        assert!(eval_checkpoint(&empty, false).is_err());
    }

    #[test]
    fn export_writes_csv_with_header_and_full_precision() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(&dir.path().join("export"));
        let train = synthetic_dataset(32, 12);
        let test = synthetic_dataset(25, 13);
        std::fs::create_dir_all(&cfg.out).unwrap();
        let paths = run_paths(&cfg.out);
        train.save(&paths.train_set).unwrap();
        test.save(&paths.test_set).unwrap();
        cfg.dataset.kind = DatasetKind::Container;
        cfg.dataset.train = paths.train_set.clone();
        cfg.dataset.test = paths.test_set.clone();
        train_run(&cfg, &train, &test, |_| {}).unwrap();

        let report = export_filters_csv(&cfg, 2).unwrap();
        assert_eq!(report.rows, 20);
        assert!(report.shortfalls.is_empty());
        let text = std::fs::read_to_string(&report.csv).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("label,v1,v2,"));
        assert!(header.ends_with(",v360"));
        assert_eq!(header.split(',').count(), 361);
        for line in lines {
            let mut fields = line.split(',');
            let label: usize = fields.next().unwrap().parse().unwrap();
            assert!(label < 10);
            let values: Vec<f64> = fields.map(|f| f.parse().unwrap()).collect();
            assert_eq!(values.len(), 360);
            assert!(values.iter().all(|v| v.is_finite()));
        }
        // Asking for more than a class holds reports the shortfall.
        let more = export_filters_csv(&cfg, 3).unwrap();
        assert_eq!(more.rows, 25);
        assert_eq!(more.shortfalls.len(), 5);
    }

    #[test]
    fn thread_count_parsing_and_equivalence() {
        assert_eq!(parse_thread_count(None).unwrap(), 1);
        assert_eq!(parse_thread_count(Some("4")).unwrap(), 4);
        assert!(parse_thread_count(Some("0")).is_err());
        assert!(parse_thread_count(Some("-2")).is_err());
        assert!(parse_thread_count(Some("lots")).is_err());

        let ds = synthetic_dataset(150, 14);
        let mut rng = Rng::seed(15);
        let params = ModelParams::init(2, 16, &mut rng).unwrap();
        let phi = TransformSet::rotations(&[0.0]).unwrap();
        let seq = evaluate_parallel(ds.images(), ds.labels(), &phi, &params, 1).unwrap();
        let par = evaluate_parallel(ds.images(), ds.labels(), &phi, &params, 3).unwrap();
        assert_eq!(seq.to_bits(), par.to_bits());
    }

    #[test]
    fn load_datasets_handles_synthesis_and_subsets() {
        let dir = tempfile::tempdir().unwrap();
        let base = synthetic_dataset(60, 16);
        let test = synthetic_dataset(30, 17);
        let train_path = dir.path().join("train.ds");
        let test_path = dir.path().join("test.ds");
        base.save(&train_path).unwrap();
        test.save(&test_path).unwrap();

        let mut cfg = RunConfig::default();
        cfg.dataset.kind = DatasetKind::Container;
        cfg.dataset.train = train_path;
        cfg.dataset.test = test_path;
        cfg.dataset.subset_train = 20;
        cfg.dataset.subset_test = 10;
        let (tr, te) = load_datasets(&cfg).unwrap();
        assert_eq!(tr.len(), 20);
        assert_eq!(te.len(), 10);
        assert!(tr.class_histogram().iter().all(|&c| c == 2));

        // Same config, same subsets.
        let (tr2, _) = load_datasets(&cfg).unwrap();
        assert_eq!(tr, tr2);
    }

    #[test]
    fn prepare_materializes_idempotent_containers() {
        let dir = tempfile::tempdir().unwrap();
        // Build a tiny IDX pair on disk to exercise the synthesis path.
        let ds = synthetic_dataset(12, 18);
        let imgs = dir.path().join("imgs.idx");
        let labs = dir.path().join("labs.idx");
        let mut img_bytes = Vec::new();
        img_bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img_bytes.extend_from_slice(&12u32.to_be_bytes());
        img_bytes.extend_from_slice(&28u32.to_be_bytes());
        img_bytes.extend_from_slice(&28u32.to_be_bytes());
        for &v in ds.images().iter() {
            img_bytes.push((v * 255.0).round() as u8);
        }
        std::fs::write(&imgs, img_bytes).unwrap();
        let mut lab_bytes = Vec::new();
        lab_bytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lab_bytes.extend_from_slice(&12u32.to_be_bytes());
        lab_bytes.extend(ds.labels().iter().map(|&l| l as u8));
        std::fs::write(&labs, lab_bytes).unwrap();

        let mut cfg = RunConfig::default();
        cfg.out = dir.path().join("prepared");
        cfg.dataset.kind = DatasetKind::Rotated;
        cfg.dataset.train_images = imgs.clone();
        cfg.dataset.train_labels = labs.clone();
        cfg.dataset.test_images = imgs;
        cfg.dataset.test_labels = labs;
        cfg.dataset.angle_lo = -30.0;
        cfg.dataset.angle_hi = 30.0;
        cfg.dataset.subset_train = 6; // must NOT shrink the containers

        let (tp, _) = prepare(&cfg).unwrap();
        let first = Dataset::load(&tp).unwrap();
        assert_eq!(first.len(), 12);
        prepare(&cfg).unwrap();
        assert_eq!(Dataset::load(&tp).unwrap(), first);

        // Train and test draw different rotation streams.
        let (_, tp2) = prepare(&cfg).unwrap();
        let test_set = Dataset::load(&tp2).unwrap();
        assert_ne!(first.images().data(), test_set.images().data());
    }
}
