//! Run configuration, stored as TOML and echoed into every checkpoint.
//!
//! ```toml
//! format_version = 1
//! seed = 7
//! batch_size = 32
//!
//! [model]
//! n_layers = 2
//! n_heads = 4
//! d_model = 64
//! d_ff = 256
//! max_len = 64
//! dropout = 0.1
//!
//! [supervision]
//! enabled = true
//! alpha = 0.4
//! beta = 0.4
//! # layer = 1        # defaults to the top encoder layer
//! csh_head = 0
//! psh_head = 1
//!
//! [optimizer]
//! lr_scale = 1.0
//! warmup = 4000
//! beta1 = 0.9
//! beta2 = 0.98
//! eps = 1e-9
//!
//! [training]
//! steps = 10000
//! checkpoint_every = 1000
//! max_src_vocab = 32000
//! max_tgt_vocab = 32000
//! precision = "f32"
//!
//! [paths]
//! train_src = "train.src"
//! train_tgt = "train.tgt"
//! train_trees = "train.conllu"
//! output_dir = "run"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SupervisionConfig};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub model: ModelSection,
    #[serde(default)]
    pub supervision: SupervisionSection,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

fn default_batch() -> usize {
    32
}

/// Architecture sizes. Vocabulary sizes come from the training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_max_len() -> usize {
    128
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelSection {
    pub fn with_vocab(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            src_vocab,
            tgt_vocab,
            max_len: self.max_len,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisionSection {
    /// `false` removes the attention losses from the graph entirely.
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_weight")]
    pub alpha: f64,
    #[serde(default = "default_weight")]
    pub beta: f64,
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default)]
    pub csh_head: usize,
    #[serde(default = "one")]
    pub psh_head: usize,
}

fn yes() -> bool {
    true
}

fn default_weight() -> f64 {
    0.4
}

fn one() -> usize {
    1
}

impl Default for SupervisionSection {
    fn default() -> Self {
        SupervisionSection {
            enabled: true,
            alpha: 0.4,
            beta: 0.4,
            layer: None,
            csh_head: 0,
            psh_head: 1,
        }
    }
}

impl SupervisionSection {
    /// Head selection and weights, whether or not the losses are enabled.
    pub fn heads(&self) -> SupervisionConfig {
        SupervisionConfig {
            alpha: self.alpha,
            beta: self.beta,
            layer: self.layer,
            csh_head: self.csh_head,
            psh_head: self.psh_head,
        }
    }

    /// The supervision used by the training objective.
    pub fn active(&self) -> Option<SupervisionConfig> {
        self.enabled.then(|| self.heads())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "unit")]
    pub lr_scale: f64,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn unit() -> f64 {
    1.0
}

fn default_warmup() -> usize {
    4000
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.98
}

fn default_eps() -> f64 {
    1e-9
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_scale: 1.0,
            warmup: 4000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

impl OptimizerConfig {
    /// Inverse square-root schedule with linear warmup; `step` starts at 1.
    pub fn learning_rate(&self, d_model: usize, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.lr_scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// 0 disables intermediate checkpoints; the final one is always written.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_vocab")]
    pub max_src_vocab: usize,
    #[serde(default = "default_vocab")]
    pub max_tgt_vocab: usize,
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

fn default_steps() -> usize {
    1000
}

fn default_vocab() -> usize {
    32000
}

fn default_precision() -> Precision {
    Precision::F32
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: default_steps(),
            checkpoint_every: 0,
            max_src_vocab: default_vocab(),
            max_tgt_vocab: default_vocab(),
            precision: default_precision(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub train_trees: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.paths.train_src,
            &mut cfg.paths.train_tgt,
            &mut cfg.paths.train_trees,
            &mut cfg.paths.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "format_version {} is not supported (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let model = self.model.with_vocab(5, 5);
        model.validate()?;
        self.supervision.heads().validate(&model)?;
        let o = &self.optimizer;
        if !(o.lr_scale > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("optimizer needs lr_scale > 0, betas in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }

    /// Applies command-line overrides for the seed and the loss weights.
    pub fn with_overrides(mut self, seed: Option<u64>, alpha: Option<f64>, beta: Option<f64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(a) = alpha {
            self.supervision.alpha = a;
        }
        if let Some(b) = beta {
            self.supervision.beta = b;
        }
        self.validate()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "format_version = 1\n[model]\nn_layers = 1\nn_heads = 2\nd_model = 8\nd_ff = 16\n";

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.optimizer.warmup, 4000);
        assert_eq!(cfg.supervision.alpha, 0.4);
        assert!(cfg.supervision.enabled);
        assert_eq!(cfg.supervision.heads().resolved_layer(&cfg.model.with_vocab(9, 9)), 0);
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(RunConfig::from_toml(&MINIMAL.replace("format_version = 1", "format_version = 2")).is_err());
        assert!(RunConfig::from_toml(&MINIMAL.replace("d_model = 8", "d_model = 7")).is_err());
        assert!(RunConfig::from_toml(&format!("{MINIMAL}typo = 3\n")).is_err());
        let err = RunConfig::from_toml(&format!("{MINIMAL}[supervision]\ncsh_head = 1\n")).unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn overrides_win() {
        let cfg = RunConfig::from_toml(MINIMAL)
            .unwrap()
            .with_overrides(Some(9), Some(0.0), Some(1.5))
            .unwrap();
        assert_eq!((cfg.seed, cfg.supervision.alpha, cfg.supervision.beta), (9, 0.0, 1.5));
        assert!(RunConfig::from_toml(MINIMAL).unwrap().with_overrides(None, Some(-1.0), None).is_err());
    }

    #[test]
    fn warmup_schedule() {
        let o = OptimizerConfig {
            warmup: 4,
            ..Default::default()
        };
        let d = 16;
        // peak at the end of warmup: 16^-0.5 * 4^-0.5
        assert!((o.learning_rate(d, 4) - 0.125).abs() < 1e-15);
        assert!((o.learning_rate(d, 1) - 0.25 * 4f64.powf(-1.5)).abs() < 1e-15);
        assert!((o.learning_rate(d, 16) - 0.0625).abs() < 1e-15);
    }
}
