//! Experiment configuration read from TOML. Unknown keys are errors;
//! omitted keys take the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::task::TaskParams;
use crate::error::{LccError, Result};
use crate::lcc::{ComponentFlags, LccHyper, Target};
use crate::model::{ModelConfig, TrainHyper, WeightKind};
use crate::probing::ProbeHyper;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub n_samples: usize,
    pub seed: u64,
    pub min_count: usize,
    pub max_count: usize,
    pub max_fillers: usize,
    pub max_margin: usize,
    /// JSONL file to use instead of generating the synthetic task.
    pub dataset: Option<PathBuf>,
}

impl Default for TaskSection {
    fn default() -> Self {
        let p = TaskParams::default();
        Self {
            n_samples: p.n_samples,
            seed: p.seed,
            min_count: p.min_count,
            max_count: p.max_count,
            max_fillers: p.max_fillers,
            max_margin: p.max_margin,
            dataset: None,
        }
    }
}

impl TaskSection {
    pub fn params(&self) -> TaskParams {
        TaskParams {
            n_samples: self.n_samples,
            seed: self.seed,
            min_count: self.min_count,
            max_count: self.max_count,
            max_fillers: self.max_fillers,
            max_margin: self.max_margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
    /// Dense checkpoint to load instead of training.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let h = TrainHyper::default();
        Self {
            lr: h.lr,
            epochs: h.epochs,
            batch_size: h.batch_size,
            grad_clip: h.grad_clip,
            seed: h.seed,
            checkpoint: None,
        }
    }
}

impl TrainSection {
    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            grad_clip: self.grad_clip,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    #[default]
    Unstructured,
    SemiStructured,
    StructuredHeads,
}

/// Which matrices pruning may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    #[default]
    All,
    Attention,
    Qkv,
}

impl PruneScope {
    pub fn kinds(self) -> Vec<WeightKind> {
        WeightKind::ALL
            .into_iter()
            .filter(|k| match self {
                PruneScope::All => true,
                PruneScope::Attention => k.is_attention(),
                PruneScope::Qkv => matches!(k, WeightKind::Q | WeightKind::K | WeightKind::V),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub scheme: SchemeKind,
    /// Fraction removed, for the unstructured and head schemes.
    pub ratio: f64,
    /// Kept weights per group, for the semi-structured scheme.
    pub n: usize,
    pub m: usize,
    pub scope: PruneScope,
    /// Training sequences drawn for the activation norms.
    pub calibration_samples: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            scheme: SchemeKind::Unstructured,
            ratio: 0.5,
            n: 2,
            m: 4,
            scope: PruneScope::All,
            calibration_samples: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    #[default]
    Probe,
    Random,
    Mse,
    Kl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Components composing the probing-time `c`.
    pub k: usize,
    /// Fraction of heads selected for compensation.
    pub fraction: f64,
    pub selector: Selector,
    pub lr: f64,
    pub epochs: usize,
    pub train_fraction: f64,
    pub batch_size: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let h = ProbeHyper::default();
        Self {
            k: 1,
            fraction: 0.25,
            selector: Selector::Probe,
            lr: h.lr,
            epochs: h.epochs,
            train_fraction: h.train_fraction,
            batch_size: h.batch_size,
        }
    }
}

impl ProbeSection {
    pub fn hyper(&self, seed: u64) -> ProbeHyper {
        ProbeHyper {
            lr: self.lr,
            epochs: self.epochs,
            train_fraction: self.train_fraction,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LccSection {
    pub target: Target,
    pub use_directions: bool,
    pub use_bias: bool,
    pub zero_init: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub response_only: bool,
    /// Samples drawn from the recovery split.
    pub recovery_samples: usize,
}

impl Default for LccSection {
    fn default() -> Self {
        let h = LccHyper::default();
        let f = ComponentFlags::default();
        Self {
            target: Target::AttentionHead,
            use_directions: f.use_directions,
            use_bias: f.use_bias,
            zero_init: f.zero_init,
            lr: h.lr,
            epochs: h.epochs,
            batch_size: h.batch_size,
            response_only: h.response_only,
            recovery_samples: 100,
        }
    }
}

impl LccSection {
    pub fn flags(&self) -> ComponentFlags {
        ComponentFlags {
            use_directions: self.use_directions,
            use_bias: self.use_bias,
            zero_init: self.zero_init,
        }
    }

    pub fn hyper(&self, seed: u64) -> LccHyper {
        LccHyper {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            response_only: self.response_only,
        }
    }
}

/// A full experiment. `seed` drives every stage after dense training:
/// calibration and recovery sampling, the probe split, random head
/// selection and component training order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub task: TaskSection,
    pub train: TrainSection,
    pub prune: PruneSection,
    pub probe: ProbeSection,
    pub lcc: LccSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            task: TaskSection::default(),
            train: TrainSection::default(),
            prune: PruneSection::default(),
            probe: ProbeSection::default(),
            lcc: LccSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LccError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LccError::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| LccError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.out_dir);
        if let Some(p) = cfg.task.dataset.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.train.checkpoint.as_mut() {
            rebase(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LccError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for path in [&self.task.dataset, &self.train.checkpoint].into_iter().flatten() {
            if !path.is_file() {
                return Err(LccError::Config(format!("{} does not exist", path.display())));
            }
        }
        let p = &self.prune;
        match p.scheme {
            SchemeKind::SemiStructured if p.n == 0 || p.n > p.m => {
                return Err(LccError::Config(format!("invalid {}:{} pattern", p.n, p.m)));
            }
            SchemeKind::Unstructured | SchemeKind::StructuredHeads if !(0.0..1.0).contains(&p.ratio) => {
                return Err(LccError::Config(format!("prune ratio {} outside [0, 1)", p.ratio)));
            }
            _ => {}
        }
        if p.calibration_samples == 0 {
            return Err(LccError::Config("calibration_samples must be positive".into()));
        }
        if !(self.probe.fraction > 0.0 && self.probe.fraction <= 1.0) {
            return Err(LccError::Config(format!("head fraction {} outside (0, 1]", self.probe.fraction)));
        }
        if self.probe.k == 0 || self.probe.k > self.model.d_head {
            return Err(LccError::Config(format!("k = {} outside 1..={}", self.probe.k, self.model.d_head)));
        }
        if self.lcc.recovery_samples == 0 {
            return Err(LccError::Config("recovery_samples must be positive".into()));
        }
        if !self.lcc.use_directions && !self.lcc.use_bias {
            return Err(LccError::Config("components need directions, bias or both".into()));
        }
        Ok(())
    }
}
