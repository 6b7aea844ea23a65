//! Run configuration: a flat `key = value` text format.
//!
//! Keys are namespaced with dotted section prefixes (`dataset.`,
//! `phi.`, `model.`, `opt.`, `schedule.`). Unknown or duplicate keys
//! are rejected so typos cannot silently fall back to defaults, and
//! serialization emits every key in a fixed order so the config stored
//! with a run is complete and diffable.

use crate::error::{Error, Result};
use crate::transform::{Interpolation, TransformKind, TransformSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Where training and test samples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// IDX image/label file pairs.
    Idx,
    /// Whitespace text rows of 784 pixels + label.
    Amat,
    /// IDX base pair with per-image random rotation applied.
    Rotated,
    /// IDX base pair with per-image random scaling applied.
    Scaled,
    /// Prepared tensor containers written by `prepare`.
    Container,
}

impl DatasetKind {
    fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Idx => "idx",
            DatasetKind::Amat => "amat",
            DatasetKind::Rotated => "rotated",
            DatasetKind::Scaled => "scaled",
            DatasetKind::Container => "container",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "idx" => DatasetKind::Idx,
            "amat" => DatasetKind::Amat,
            "rotated" => DatasetKind::Rotated,
            "scaled" => DatasetKind::Scaled,
            "container" => DatasetKind::Container,
            _ => {
                return Err(Error::Config(format!(
                    "dataset.kind {s:?} (expected idx|amat|rotated|scaled|container)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// IDX pair for training (also the synthesis base).
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    /// IDX pair for testing (also the synthesis base).
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Single-file sources (amat text or prepared container).
    pub train: PathBuf,
    pub test: PathBuf,
    pub transpose_amat: bool,
    /// Rotation synthesis range in degrees.
    pub angle_lo: f64,
    pub angle_hi: f64,
    /// Scaling synthesis range.
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Seed for the per-image synthesis streams.
    pub synthesis_seed: u64,
    /// Stratified subset sizes; 0 keeps the full set.
    pub subset_train: usize,
    pub subset_test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhiConfig {
    pub kind: TransformKind,
    /// Number of branch transformations when `values` is empty.
    pub count: usize,
    /// Explicit transformation values; overrides `count` and the span.
    pub values: Vec<f64>,
    /// Optional inclusive span for evenly spaced values. Rotations
    /// without a span cover the full circle; scalings default to
    /// [0.5, 1.5].
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    /// Use lossless grid permutations for multiples of 90 degrees.
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub generator_channels: usize,
    pub hidden: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub epochs: u64,
    /// Evaluate train/test error every this many epochs (the final
    /// epoch is always evaluated).
    pub eval_every: u64,
    /// Write a checkpoint every this many epochs; 0 = only at the end.
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub phi: PhiConfig,
    pub model: ModelConfig,
    pub opt: OptConfig,
    pub schedule: ScheduleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out: PathBuf::from("runs/default"),
            dataset: DatasetConfig {
                kind: DatasetKind::Rotated,
                train_images: PathBuf::from("data/mnist/train-images-idx3-ubyte.gz"),
                train_labels: PathBuf::from("data/mnist/train-labels-idx1-ubyte.gz"),
                test_images: PathBuf::from("data/mnist/t10k-images-idx3-ubyte.gz"),
                test_labels: PathBuf::from("data/mnist/t10k-labels-idx1-ubyte.gz"),
                train: PathBuf::new(),
                test: PathBuf::new(),
                transpose_amat: false,
                angle_lo: 0.0,
                angle_hi: 360.0,
                scale_lo: 0.5,
                scale_hi: 1.5,
                synthesis_seed: 1234,
                subset_train: 0,
                subset_test: 0,
            },
            phi: PhiConfig {
                kind: TransformKind::Rotation,
                count: 4,
                values: Vec::new(),
                lo: None,
                hi: None,
                exact: true,
            },
            model: ModelConfig {
                generator_channels: 20,
                hidden: 512,
                dropout: 0.5,
            },
            opt: OptConfig {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                batch_size: 64,
            },
            schedule: ScheduleConfig {
                epochs: 15,
                eval_every: 1,
                checkpoint_every: 5,
            },
        }
    }
}

/// Optional command-line overrides layered on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Sets `phi.count` (the number of transformation branches).
    pub channels: Option<usize>,
    pub epochs: Option<u64>,
    /// Sets both `dataset.subset_train` and `dataset.subset_test`.
    pub subset: Option<usize>,
    pub transpose_amat: bool,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn parse_opt_f64(key: &str, value: &str) -> Result<Option<f64>> {
    if value.is_empty() {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_list(vs: &[f64]) -> String {
    vs.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Parses the flat text format. Every key must be known and appear
    /// at most once; anything else is a configuration error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", line_no + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("duplicate key {key}")));
            }
            seen.push(key.to_string());
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "dataset.kind" => self.dataset.kind = DatasetKind::parse(value)?,
            "dataset.train_images" => self.dataset.train_images = PathBuf::from(value),
            "dataset.train_labels" => self.dataset.train_labels = PathBuf::from(value),
            "dataset.test_images" => self.dataset.test_images = PathBuf::from(value),
            "dataset.test_labels" => self.dataset.test_labels = PathBuf::from(value),
            "dataset.train" => self.dataset.train = PathBuf::from(value),
            "dataset.test" => self.dataset.test = PathBuf::from(value),
            "dataset.transpose_amat" => self.dataset.transpose_amat = parse_bool(key, value)?,
            "dataset.angle_lo" => self.dataset.angle_lo = parse_num(key, value)?,
            "dataset.angle_hi" => self.dataset.angle_hi = parse_num(key, value)?,
            "dataset.scale_lo" => self.dataset.scale_lo = parse_num(key, value)?,
            "dataset.scale_hi" => self.dataset.scale_hi = parse_num(key, value)?,
            "dataset.synthesis_seed" => self.dataset.synthesis_seed = parse_num(key, value)?,
            "dataset.subset_train" => self.dataset.subset_train = parse_num(key, value)?,
            "dataset.subset_test" => self.dataset.subset_test = parse_num(key, value)?,
            "phi.kind" => {
                self.phi.kind = match value {
                    "rotation" => TransformKind::Rotation,
                    "scaling" => TransformKind::Scaling,
                    _ => {
                        return Err(Error::Config(format!(
                            "phi.kind {value:?} (expected rotation|scaling)"
                        )))
                    }
                }
            }
            "phi.count" => self.phi.count = parse_num(key, value)?,
            "phi.values" => {
                self.phi.values = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|tok| parse_num(key, tok.trim()))
                        .collect::<Result<Vec<f64>>>()?
                }
            }
            "phi.lo" => self.phi.lo = parse_opt_f64(key, value)?,
            "phi.hi" => self.phi.hi = parse_opt_f64(key, value)?,
            "phi.exact" => self.phi.exact = parse_bool(key, value)?,
            "model.generator_channels" => self.model.generator_channels = parse_num(key, value)?,
            "model.hidden" => self.model.hidden = parse_num(key, value)?,
            "model.dropout" => self.model.dropout = parse_num(key, value)?,
            "opt.lr" => self.opt.lr = parse_num(key, value)?,
            "opt.beta1" => self.opt.beta1 = parse_num(key, value)?,
            "opt.beta2" => self.opt.beta2 = parse_num(key, value)?,
            "opt.eps" => self.opt.eps = parse_num(key, value)?,
            "opt.batch_size" => self.opt.batch_size = parse_num(key, value)?,
            "schedule.epochs" => self.schedule.epochs = parse_num(key, value)?,
            "schedule.eval_every" => self.schedule.eval_every = parse_num(key, value)?,
            "schedule.checkpoint_every" => self.schedule.checkpoint_every = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Emits every key in canonical order. `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let d = &self.dataset;
        let p = &self.phi;
        let _ = write!(
            s,
            "seed = {}\n\
             out = {}\n\
             dataset.kind = {}\n\
             dataset.train_images = {}\n\
             dataset.train_labels = {}\n\
             dataset.test_images = {}\n\
             dataset.test_labels = {}\n\
             dataset.train = {}\n\
             dataset.test = {}\n\
             dataset.transpose_amat = {}\n\
             dataset.angle_lo = {}\n\
             dataset.angle_hi = {}\n\
             dataset.scale_lo = {}\n\
             dataset.scale_hi = {}\n\
             dataset.synthesis_seed = {}\n\
             dataset.subset_train = {}\n\
             dataset.subset_test = {}\n\
             phi.kind = {}\n\
             phi.count = {}\n\
             phi.values = {}\n\
             phi.lo = {}\n\
             phi.hi = {}\n\
             phi.exact = {}\n\
             model.generator_channels = {}\n\
             model.hidden = {}\n\
             model.dropout = {}\n\
             opt.lr = {}\n\
             opt.beta1 = {}\n\
             opt.beta2 = {}\n\
             opt.eps = {}\n\
             opt.batch_size = {}\n\
             schedule.epochs = {}\n\
             schedule.eval_every = {}\n\
             schedule.checkpoint_every = {}\n",
            self.seed,
            self.out.display(),
            d.kind.as_str(),
            d.train_images.display(),
            d.train_labels.display(),
            d.test_images.display(),
            d.test_labels.display(),
            d.train.display(),
            d.test.display(),
            d.transpose_amat,
            d.angle_lo,
            d.angle_hi,
            d.scale_lo,
            d.scale_hi,
            d.synthesis_seed,
            d.subset_train,
            d.subset_test,
            match p.kind {
                TransformKind::Rotation => "rotation",
                TransformKind::Scaling => "scaling",
            },
            p.count,
            fmt_list(&p.values),
            fmt_opt(p.lo),
            fmt_opt(p.hi),
            p.exact,
            self.model.generator_channels,
            self.model.hidden,
            self.model.dropout,
            self.opt.lr,
            self.opt.beta1,
            self.opt.beta2,
            self.opt.eps,
            self.opt.batch_size,
            self.schedule.epochs,
            self.schedule.eval_every,
            self.schedule.checkpoint_every,
        );
        s
    }

    pub fn apply_overrides(&mut self, ov: &Overrides) {
        if let Some(seed) = ov.seed {
            self.seed = seed;
        }
        if let Some(out) = &ov.out {
            self.out = out.clone();
        }
        if let Some(channels) = ov.channels {
            self.phi.count = channels;
            // An explicit branch count supersedes a value list from the
            // file; otherwise the list would silently win.
            self.phi.values.clear();
        }
        if let Some(epochs) = ov.epochs {
            self.schedule.epochs = epochs;
        }
        if let Some(subset) = ov.subset {
            self.dataset.subset_train = subset;
            self.dataset.subset_test = subset;
        }
        if ov.transpose_amat {
            self.dataset.transpose_amat = true;
        }
    }

    /// Builds the branch transformation set described by `phi.*`.
    pub fn phi_set(&self) -> Result<TransformSet> {
        let interp = if self.phi.exact {
            Interpolation::ExactRightAngle
        } else {
            Interpolation::Bilinear
        };
        let set = if !self.phi.values.is_empty() {
            TransformSet::new(self.phi.kind, &self.phi.values, interp)?
        } else {
            let n = self.phi.count;
            match (self.phi.kind, self.phi.lo, self.phi.hi) {
                (TransformKind::Rotation, None, None) => TransformSet::rotation_grid(n)?,
                (TransformKind::Rotation, Some(lo), Some(hi)) => {
                    TransformSet::rotation_span(n, lo, hi)?
                }
                (TransformKind::Scaling, lo, hi) => {
                    TransformSet::scale_span(n, lo.unwrap_or(0.5), hi.unwrap_or(1.5))?
                }
                _ => {
                    return Err(Error::Config(
                        "phi.lo and phi.hi must be set together".into(),
                    ))
                }
            }
        };
        Ok(set.with_interpolation(interp))
    }

    /// Checks every field for internal consistency. A config that
    /// passes here can be executed without further surprises.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let need = |what: &str, path: &Path| -> Result<()> {
            if path.as_os_str().is_empty() {
                Err(Error::Config(format!(
                    "dataset.kind {} requires {what}",
                    d.kind.as_str()
                )))
            } else {
                Ok(())
            }
        };
        match d.kind {
            DatasetKind::Idx | DatasetKind::Rotated | DatasetKind::Scaled => {
                need("dataset.train_images", &d.train_images)?;
                need("dataset.train_labels", &d.train_labels)?;
                need("dataset.test_images", &d.test_images)?;
                need("dataset.test_labels", &d.test_labels)?;
            }
            DatasetKind::Amat | DatasetKind::Container => {
                need("dataset.train", &d.train)?;
                need("dataset.test", &d.test)?;
            }
        }
        if d.kind == DatasetKind::Rotated
            && (d.angle_lo.is_nan() || d.angle_hi.is_nan() || d.angle_lo > d.angle_hi)
        {
            return Err(Error::Config(format!(
                "dataset.angle range [{},{}] is inverted",
                d.angle_lo, d.angle_hi
            )));
        }
        if d.kind == DatasetKind::Scaled && !(0.0 < d.scale_lo && d.scale_lo <= d.scale_hi) {
            return Err(Error::Config(format!(
                "dataset.scale range [{},{}] is invalid",
                d.scale_lo, d.scale_hi
            )));
        }
        if self.phi.values.is_empty() && self.phi.count == 0 {
            return Err(Error::Config("phi.count must be at least 1".into()));
        }
        self.phi_set()?;
        let m = &self.model;
        if m.generator_channels == 0 || m.hidden == 0 {
            return Err(Error::Config(
                "model.generator_channels and model.hidden must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config(format!(
                "model.dropout {} outside [0,1)",
                m.dropout
            )));
        }
        let o = &self.opt;
        let not_positive = |x: f64| x.is_nan() || x <= 0.0;
        if not_positive(o.lr) || not_positive(o.eps) {
            return Err(Error::Config("opt.lr and opt.eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("opt.beta1/beta2 must lie in [0,1)".into()));
        }
        if o.batch_size == 0 {
            return Err(Error::Config("opt.batch_size must be positive".into()));
        }
        let s = &self.schedule;
        if s.epochs == 0 {
            return Err(Error::Config("schedule.epochs must be at least 1".into()));
        }
        if s.eval_every == 0 {
            return Err(Error::Config("schedule.eval_every must be at least 1".into()));
        }
        Ok(())
    }
}
