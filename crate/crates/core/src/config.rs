//! Run configuration files (TOML) and stable config hashing.
//!
//! Configs are strict: unknown keys are rejected everywhere, so a typo
//! cannot silently fall back to a default. A run's identity is the FNV-1a
//! hash of its canonical JSON serialization minus the seed list; records in
//! the results store are keyed by `(config hash, seed)`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, DataPair, Normalizer, Split, SynthSpec};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::models::{Family, ModelSpec};
use crate::quantizer::QuantizerSpec;
use crate::rng::fnv1a64;

/// Model section; classes and input shape come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub width_factor: f64,
    /// Hidden layers (mlp, default 2) or conv blocks (smallconv, default 3).
    #[serde(default)]
    pub depth: Option<usize>,
    #[serde(default)]
    pub residual: bool,
}

impl ModelConfig {
    pub fn to_spec(&self, num_classes: usize, input_shape: [usize; 3]) -> Result<ModelSpec> {
        let depth = self.depth.unwrap_or(match self.family {
            Family::Mlp => 2,
            Family::SmallConv => 3,
        });
        let spec = ModelSpec {
            family: self.family,
            width_factor: self.width_factor,
            depth,
            num_classes,
            input_shape,
            residual: self.residual,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Dataset source. Paths are joined onto the dataset root (`--dataset-root`
/// or `QUANTKD_DATASET_ROOT`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synth {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        image_side: usize,
        separation: f64,
        gen_seed: u64,
        #[serde(default)]
        normalize: bool,
    },
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
        #[serde(default)]
        normalize: bool,
    },
    Cifar10 {
        dir: String,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
        #[serde(default = "default_true")]
        normalize: bool,
        #[serde(default = "default_true")]
        augment: bool,
    },
}

fn default_true() -> bool {
    true
}

impl DatasetConfig {
    /// Whether train batches get the flip-and-crop augmentation.
    pub fn augment(&self) -> bool {
        matches!(self, DatasetConfig::Cifar10 { augment: true, .. })
    }

    /// Load (or generate) both splits, applying subset limits and
    /// train-statistic normalization.
    pub fn load<E: Float>(&self, dataset_root: &Path) -> Result<DataPair<E>> {
        let (mut pair, normalize) = match self {
            DatasetConfig::Synth {
                classes,
                train_per_class,
                test_per_class,
                image_side,
                separation,
                gen_seed,
                normalize,
            } => {
                let spec = SynthSpec {
                    classes: *classes,
                    train_per_class: *train_per_class,
                    test_per_class: *test_per_class,
                    image_side: *image_side,
                    separation: *separation,
                    gen_seed: *gen_seed,
                };
                let (pair, _) = data::synth_clusters::<E>(&spec)?;
                (pair, *normalize)
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
                normalize,
            } => {
                let train = data::load_idx::<E>(
                    &dataset_root.join(train_images),
                    &dataset_root.join(train_labels),
                    Split::Train,
                )?;
                let test = data::load_idx::<E>(
                    &dataset_root.join(test_images),
                    &dataset_root.join(test_labels),
                    Split::Test,
                )?;
                let pair = DataPair {
                    train: limit(train, *train_limit),
                    test: limit(test, *test_limit),
                };
                (pair, *normalize)
            }
            DatasetConfig::Cifar10 { dir, train_limit, test_limit, normalize, .. } => {
                let root = dataset_root.join(dir);
                let pair = DataPair {
                    train: limit(data::load_cifar10_bin::<E>(&root, Split::Train)?, *train_limit),
                    test: limit(data::load_cifar10_bin::<E>(&root, Split::Test)?, *test_limit),
                };
                (pair, *normalize)
            }
        };
        if normalize {
            let norm = Normalizer::fit(&pair.train);
            pair = DataPair { train: norm.apply(&pair.train), test: norm.apply(&pair.test) };
        }
        Ok(pair)
    }
}

fn limit<E: Float>(ds: data::Dataset<E>, n: Option<usize>) -> data::Dataset<E> {
    match n {
        Some(n) if n < ds.len() => {
            let idx: Vec<usize> = (0..n).collect();
            let (images, labels) = ds.gather(&idx);
            data::Dataset { images, labels, num_classes: ds.num_classes, split: ds.split }
        }
        _ => ds,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

/// Optimizer hyperparameters; defaults are the documented recipe
/// (SGD momentum 0.9, weight decay 1e-4, cosine from 0.05, batch 64).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_schedule")]
    pub lr_schedule: LrSchedule,
}

fn default_epochs() -> u32 {
    30
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_schedule() -> LrSchedule {
    LrSchedule::Cosine
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            lr_schedule: default_schedule(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be >= 1".to_string()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("lr must be positive and finite, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be >= 0".to_string()));
        }
        Ok(())
    }
}

/// Teacher reference for a single distillation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub checkpoint: PathBuf,
    /// `{ mode = "float" }` or `{ mode = "quantized", bits = 8 }`.
    #[serde(default = "default_teacher_mode")]
    pub eval: crate::distill::TeacherMode,
}

fn default_teacher_mode() -> crate::distill::TeacherMode {
    crate::distill::TeacherMode::Float
}

/// Pretrained full-precision student used to initialize fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub student_checkpoint: PathBuf,
}

/// Grid axes for the sweep runner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub tau: Vec<f64>,
    pub width_factor: Vec<f64>,
    /// Lambda policies to compare, e.g. constant 0.5 vs GSLR.
    pub lambda: Vec<crate::distill::LambdaSpec>,
    /// Directory of hard-trained teacher checkpoints
    /// (`{family}_w{width}_s{seed}.ckpt`).
    pub zoo_dir: PathBuf,
    /// Directory of pretrained full-precision students (same naming).
    pub pretrained_dir: PathBuf,
    /// Also run the hard-label (lambda = 0, no teacher) baseline per seed.
    #[serde(default = "default_true")]
    pub include_hd_baseline: bool,
}

/// One run description: everything the training loops need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub quantizer: Option<QuantizerSpec>,
    #[serde(default)]
    pub distill: Option<DistillConfig>,
    #[serde(default)]
    pub teacher: Option<TeacherConfig>,
    #[serde(default)]
    pub init: Option<InitConfig>,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seed list is empty".to_string()));
        }
        self.optim.validate()?;
        if let Some(q) = &self.quantizer {
            q.validate()?;
        }
        if let Some(d) = &self.distill {
            d.validate()?;
        }
        Ok(())
    }

    /// Stable identity of this run's training computation: everything
    /// except the seed list and sweep axes. Two configs with the same
    /// fingerprint produce identical results for identical seeds.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Payload<'a> {
            dataset: &'a DatasetConfig,
            model: &'a ModelConfig,
            quantizer: &'a Option<QuantizerSpec>,
            distill: &'a Option<DistillConfig>,
            teacher: &'a Option<TeacherConfig>,
            init: &'a Option<InitConfig>,
            optim: &'a OptimConfig,
        }
        let payload = Payload {
            dataset: &self.dataset,
            model: &self.model,
            quantizer: &self.quantizer,
            distill: &self.distill,
            teacher: &self.teacher,
            init: &self.init,
            optim: &self.optim,
        };
        let json = serde_json::to_string(&payload).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

/// Parse a TOML run config; unknown keys are errors.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Dataset root resolution: explicit flag, else `QUANTKD_DATASET_ROOT`,
/// else the current directory.
pub fn resolve_dataset_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(env) = std::env::var_os("QUANTKD_DATASET_ROOT") {
        return PathBuf::from(env);
    }
    PathBuf::from(".")
}
