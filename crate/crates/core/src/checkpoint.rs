//! Checkpoint container.
//!
//! ```text
//! magic    8 bytes   "MIRNNCKP"
//! hlen     u64 LE    length of the JSON header in bytes
//! header   hlen      UTF-8 JSON: version, config, vocab, tensor layout,
//!                    optimizer scalars, schedule, epoch, RNG state, history
//! payload  f64 LE    parameters, then Adam m, then Adam v, each in layout order
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::CharVocab;
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::model::Model;
use crate::optim::{AdamState, LrSchedule};
use crate::params::Parameters;
use crate::tensor::Rng;
use crate::train::EpochMetrics;

pub const MAGIC: &[u8; 8] = b"MIRNNCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub vocab: CharVocab,
    pub model: Model,
    pub adam: AdamState,
    pub schedule: LrSchedule,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_bpc: Option<f64>,
    pub rng_state: u64,
    pub history: Vec<EpochMetrics>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct AdamScalars {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: ExperimentConfig,
    vocab: String,
    tensors: Vec<TensorEntry>,
    adam: AdamScalars,
    schedule: LrSchedule,
    epoch: usize,
    best_val_bpc: Option<f64>,
    rng_state: u64,
    history: Vec<EpochMetrics>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.to_json(),
            tensors: self
                .model
                .layout()
                .into_iter()
                .map(|(name, len)| TensorEntry { name, len })
                .collect(),
            adam: AdamScalars {
                step: self.adam.step,
                lr: self.adam.lr,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
            },
            schedule: self.schedule.clone(),
            epoch: self.epoch,
            best_val_bpc: self.best_val_bpc,
            rng_state: self.rng_state,
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let params = self.model.flatten();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * 3 * params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in params.iter().chain(&self.adam.m).chain(&self.adam.v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", header.version)));
        }
        let vocab = CharVocab::from_json(&header.vocab)?;
        let spec = header.config.cell_spec(vocab.size())?;
        let mut model = Model::sample(
            &spec,
            crate::tensor::SamplingScheme::symmetric(header.config.model.r_v),
            &mut Rng::new(0),
        )?;
        let layout = model.layout();
        let stored: Vec<(String, usize)> = header.tensors.into_iter().map(|t| (t.name, t.len)).collect();
        if layout != stored {
            return Err(bad("tensor layout does not match the stored configuration"));
        }
        let n = model.param_count();
        let payload = &body[hlen..];
        if payload.len() != 8 * 3 * n {
            return Err(bad(format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                8 * 3 * n
            )));
        }
        let floats: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.load_flat(&floats[..n]);
        let a = header.adam;
        Ok(Checkpoint {
            config: header.config,
            vocab,
            model,
            adam: AdamState {
                step: a.step,
                m: floats[n..2 * n].to_vec(),
                v: floats[2 * n..].to_vec(),
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
            },
            schedule: header.schedule,
            epoch: header.epoch,
            best_val_bpc: header.best_val_bpc,
            rng_state: header.rng_state,
            history: header.history,
        })
    }

    /// Writes via a temporary file and a rename, so a crash never leaves a
    /// half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{CellFamily, IntegrationMode};
    use crate::experiment::{DataConfig, ModelConfig, TrainConfig};

    fn sample(family: CellFamily) -> Checkpoint {
        let config = ExperimentConfig {
            name: "t".into(),
            output: "out".into(),
            model: ModelConfig {
                family,
                mode: IntegrationMode::MiGeneral,
                hidden: 3,
                activation: crate::cells::Activation::Tanh,
                mi_bias: Default::default(),
                r_w: 0.3,
                r_u: 0.3,
                r_v: 0.3,
            },
            train: TrainConfig {
                seq_len: 4,
                batch: 2,
                lr: 1e-3,
                epochs: 2,
                seed: 1,
                clip: None,
                windows_per_epoch: None,
            },
            data: DataConfig {
                corpus: "c.txt".into(),
                text_mode: Default::default(),
                split: Default::default(),
            },
            diagnostics: Default::default(),
        };
        let vocab = CharVocab::from_text("abc");
        let spec = config.cell_spec(vocab.size()).unwrap();
        let mut rng = Rng::new(9);
        let model = Model::sample(&spec, crate::tensor::SamplingScheme::symmetric(0.3), &mut rng).unwrap();
        let mut adam = AdamState::new(&model, 1e-3).unwrap();
        adam.m.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sin());
        adam.v.iter_mut().enumerate().for_each(|(i, v)| *v = 1.0 / (i as f64 + 3.0));
        adam.step = 17;
        Checkpoint {
            config,
            vocab,
            model,
            adam,
            schedule: LrSchedule::default(),
            epoch: 3,
            best_val_bpc: Some(1.0 / 3.0),
            rng_state: rng.state(),
            history: vec![EpochMetrics {
                epoch: 0,
                train_bpc: None,
                valid_bpc: 2.0_f64.sqrt(),
                lr: 1e-3,
                halved: false,
            }],
        }
    }

    #[test]
    fn byte_round_trip_is_exact() {
        for family in CellFamily::ALL {
            let ck = sample(family);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let ck = sample(CellFamily::Lstm);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample(CellFamily::Rnn).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Checkpoint(_))));
    }
}
