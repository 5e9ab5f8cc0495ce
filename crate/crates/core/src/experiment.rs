//! Experiment configuration files (TOML, strict schema).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cells::{Activation, CellFamily, CellSpec, IntegrationMode, MiBiasInit};
use crate::data::{SplitFractions, TextMode};
use crate::error::{Error, Result};
use crate::tensor::SamplingScheme;

/// Either a named preset (`ptb-rnn`, `text8-lstm`, `ones`) or explicit
/// scalars broadcast to every unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MiBiasSetting {
    Preset(String),
    Explicit(MiBiasInit),
}

impl Default for MiBiasSetting {
    fn default() -> Self {
        MiBiasSetting::Preset("text8-lstm".into())
    }
}

impl MiBiasSetting {
    pub fn resolve(&self) -> Result<MiBiasInit> {
        match self {
            MiBiasSetting::Preset(name) => MiBiasInit::named(name),
            MiBiasSetting::Explicit(init) => {
                let v = [init.alpha, init.beta1, init.beta2, init.b];
                if v.iter().all(|x| x.is_finite()) {
                    Ok(*init)
                } else {
                    Err(Error::config("MI bias values must be finite"))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: CellFamily,
    pub mode: IntegrationMode,
    pub hidden: usize,
    /// Plain RNN only.
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub mi_bias: MiBiasSetting,
    /// `W` entries are drawn from `uniform[−r_w, r_w]`.
    #[serde(default = "default_range")]
    pub r_w: f64,
    #[serde(default = "default_range")]
    pub r_u: f64,
    /// Readout weight range.
    #[serde(default = "default_range")]
    pub r_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Rescale the batch gradient to at most this L2 norm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    /// Use only the first `n` shuffled training windows of each epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub windows_per_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: PathBuf,
    #[serde(default)]
    pub text_mode: TextMode,
    #[serde(default)]
    pub split: SplitFractions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Where metrics and checkpoints go.
    pub output: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

/// Settings for the gradient-flow and robustness experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Time steps whose `ln ‖∂C/∂h_t‖` is tracked.
    #[serde(default = "default_probes")]
    pub probes: Vec<usize>,
    /// Size of the fixed training subset the norms are averaged over.
    #[serde(default = "default_probe_sequences")]
    pub probe_sequences: usize,
    #[serde(default = "default_r_w_values")]
    pub r_w_values: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// `|h|` above this counts as saturated.
    #[serde(default = "default_saturation")]
    pub saturation_threshold: f64,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            probes: default_probes(),
            probe_sequences: default_probe_sequences(),
            r_w_values: default_r_w_values(),
            seeds: default_seeds(),
            saturation_threshold: default_saturation(),
            bins: default_bins(),
        }
    }
}

fn default_probes() -> Vec<usize> {
    vec![1, 5, 10]
}

fn default_probe_sequences() -> usize {
    512
}

fn default_r_w_values() -> Vec<f64> {
    vec![0.02, 0.1, 0.3, 0.6]
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_saturation() -> f64 {
    0.9
}

fn default_bins() -> usize {
    20
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_range() -> f64 {
    0.02
}

fn default_seq_len() -> usize {
    50
}

fn default_batch() -> usize {
    8
}

fn default_lr() -> f64 {
    1e-4
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative corpus and output paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            if cfg.data.corpus.is_relative() {
                cfg.data.corpus = dir.join(&cfg.data.corpus);
            }
            if cfg.output.is_relative() {
                cfg.output = dir.join(&cfg.output);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.hidden == 0 {
            return Err(Error::config("model.hidden must be at least 1"));
        }
        m.mi_bias.resolve()?;
        for (name, r) in [("r_w", m.r_w), ("r_u", m.r_u), ("r_v", m.r_v)] {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::config(format!("model.{name} must be positive, got {r}")));
            }
        }
        let t = &self.train;
        if t.seq_len == 0 || t.batch == 0 {
            return Err(Error::config("train.seq_len and train.batch must be at least 1"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::config(format!("train.lr must be positive, got {}", t.lr)));
        }
        if let Some(c) = t.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config(format!("train.clip must be positive, got {c}")));
            }
        }
        if t.windows_per_epoch == Some(0) {
            return Err(Error::config("train.windows_per_epoch must be at least 1"));
        }
        self.data.split.validate()?;
        let d = &self.diagnostics;
        if d.probe_sequences == 0 || d.bins == 0 || d.seeds.is_empty() || d.r_w_values.is_empty() {
            return Err(Error::config(
                "diagnostics needs at least one probe sequence, bin, seed and r_w value",
            ));
        }
        if d.r_w_values.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::config("diagnostics r_w values must be positive"));
        }
        if !(d.saturation_threshold > 0.0 && d.saturation_threshold < 1.0) {
            return Err(Error::config("saturation threshold must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Cell shape for a vocabulary of `vocab` symbols.
    pub fn cell_spec(&self, vocab: usize) -> Result<CellSpec> {
        Ok(CellSpec {
            family: self.model.family,
            mode: self.model.mode,
            activation: self.model.activation,
            hidden: self.model.hidden,
            input: vocab,
            bias_init: self.model.mi_bias.resolve()?,
            w_scheme: SamplingScheme::symmetric(self.model.r_w),
            u_scheme: SamplingScheme::symmetric(self.model.r_u),
        })
    }
}
