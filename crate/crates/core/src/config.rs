//! Run configuration: one TOML file describing the dataset, both models, the
//! distillation method, the scheduler and where outputs go.
//!
//! Unknown keys are rejected. Relative paths are resolved against the
//! directory containing the config file. See `configs/` for complete
//! examples.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_blobs, generate_spirals, load_image_dataset, Dataset};
use crate::divergence::DivergenceConfig;
use crate::engine::{DistillOptions, SgdSettings};
use crate::error::{Error, Result};
use crate::maps::MapKind;
use crate::network::{LayerKind, Model, ModelSpec};
use crate::scheduler::SchedulerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Spirals {
        seed: u64,
        n_per_class: usize,
        classes: usize,
        noise: f64,
    },
    Blobs {
        seed: u64,
        n_per_class: usize,
        classes: usize,
        dim: usize,
        separation: f64,
    },
    /// An `LWDS1` file.
    File { path: PathBuf },
}

impl DatasetConfig {
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self {
            DatasetConfig::Spirals {
                seed,
                n_per_class,
                classes,
                noise,
            } => generate_spirals(*n_per_class, *classes, *noise, *seed),
            DatasetConfig::Blobs {
                seed,
                n_per_class,
                classes,
                dim,
                separation,
            } => generate_blobs(*n_per_class, *classes, *dim, *separation, *seed),
            DatasetConfig::File { path } => load_image_dataset(&base.join(path)),
        }
    }

    /// Class count, when known without reading a file.
    pub fn classes(&self) -> Option<usize> {
        match self {
            DatasetConfig::Spirals { classes, .. } | DatasetConfig::Blobs { classes, .. } => Some(*classes),
            DatasetConfig::File { .. } => None,
        }
    }

    /// Per-sample input shape, when known without reading a file.
    pub fn input_shape(&self) -> Option<Vec<usize>> {
        match self {
            DatasetConfig::Spirals { .. } => Some(vec![2]),
            DatasetConfig::Blobs { dim, .. } => Some(vec![*dim]),
            DatasetConfig::File { .. } => None,
        }
    }

    fn validate(&self) -> Result<()> {
        let sizes = |n: usize, c: usize| {
            if n < 2 {
                return Err(Error::config("dataset.n_per_class", "must be at least 2"));
            }
            if c < 2 {
                return Err(Error::config("dataset.classes", "must be at least 2"));
            }
            Ok(())
        };
        match self {
            DatasetConfig::Spirals {
                n_per_class,
                classes,
                noise,
                ..
            } => {
                sizes(*n_per_class, *classes)?;
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return Err(Error::config("dataset.noise", "must be non-negative"));
                }
            }
            DatasetConfig::Blobs {
                n_per_class,
                classes,
                dim,
                separation,
                ..
            } => {
                sizes(*n_per_class, *classes)?;
                if *dim == 0 {
                    return Err(Error::config("dataset.dim", "must be positive"));
                }
                if !(*separation >= 0.0 && separation.is_finite()) {
                    return Err(Error::config("dataset.separation", "must be non-negative"));
                }
            }
            DatasetConfig::File { .. } => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerKind>,
    /// Seeds weight initialization.
    #[serde(default)]
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Seeds the shuffles of teacher training.
    pub train_seed: u64,
}

impl TeacherConfig {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: MapKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub differentiable_maps: Option<bool>,
    #[serde(default = "default_refresh")]
    pub hessian_refresh: usize,
    #[serde(default = "default_probe")]
    pub probe_size: usize,
}

fn default_refresh() -> usize {
    5
}

fn default_probe() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub metrics: PathBuf,
    pub checkpoint_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub teacher: TeacherConfig,
    pub student: ModelSpec,
    pub method: MethodConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub divergence: DivergenceConfig,
    pub training: TrainingConfig,
    pub output: OutputConfig,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Parse errors keep toml's message, which names the offending key and line.
fn toml_error(e: toml::de::Error) -> Error {
    Error::config("config", e.to_string().trim().replace('\n', " "))
}

fn check_classes(field: &str, spec: &ModelSpec, classes: Option<usize>) -> Result<()> {
    let Some(classes) = classes else { return Ok(()) };
    match spec.layers.last() {
        Some(LayerKind::Classifier { classes: c }) if *c == classes => Ok(()),
        Some(LayerKind::Classifier { classes: c }) => Err(Error::config(
            field,
            format!("classifier has {c} outputs but the dataset has {classes} classes"),
        )),
        _ => Err(Error::config(field, "last layer must be a classifier")),
    }
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(toml_error)?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base).map_err(|e| match e {
            Error::Config { field, reason } => Error::Config {
                field,
                reason: format!("{reason} (in {})", path.display()),
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Checks every block, including that both models build and fit the
    /// dataset.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.scheduler.validate()?;
        self.distill_options().validate()?;
        self.teacher_settings_check()?;
        let teacher = self.teacher.spec();
        for (field, spec) in [("teacher.layers", &teacher), ("student.layers", &self.student)] {
            Model::build(spec.clone()).map_err(|e| match e {
                Error::Config { .. } => e,
                other => Error::config(field, other.to_string()),
            })?;
            check_classes(field, spec, self.dataset.classes())?;
        }
        if let Some(shape) = self.dataset.input_shape() {
            for (field, spec) in [("teacher.input_shape", &teacher), ("student.input_shape", &self.student)] {
                if spec.input_shape != shape {
                    return Err(Error::config(
                        field,
                        format!("{:?} does not match dataset samples {:?}", spec.input_shape, shape),
                    ));
                }
            }
        }
        Ok(())
    }

    fn teacher_settings_check(&self) -> Result<()> {
        if self.teacher.batch_size == 0 {
            return Err(Error::config("teacher.batch_size", "must be at least 1"));
        }
        if !(self.teacher.lr > 0.0 && self.teacher.lr.is_finite()) {
            return Err(Error::config("teacher.lr", "must be positive and finite"));
        }
        Ok(())
    }

    pub fn teacher_settings(&self) -> SgdSettings {
        SgdSettings {
            epochs: self.teacher.epochs,
            batch_size: self.teacher.batch_size,
            lr: self.teacher.lr,
            seed: self.teacher.train_seed,
        }
    }

    pub fn distill_options(&self) -> DistillOptions {
        DistillOptions {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            lambda: self.training.lambda,
            seed: self.training.seed,
            differentiable_maps: self.training.differentiable_maps,
            hessian_refresh: self.training.hessian_refresh,
            probe_size: self.training.probe_size,
            divergence: self.divergence,
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        self.dataset.load(&self.base_dir)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.base_dir.join(&self.output.metrics)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.base_dir.join(&self.output.checkpoint_dir)
    }
}
