//! Character-level language-model training: Adam on mini-batches of
//! windows, per-epoch validation, learning-rate halving, metrics and
//! checkpoints.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bptt::{backward_through_time, loss_bpc, unroll_forward, LossReport, LossScope};
use crate::checkpoint::Checkpoint;
use crate::data::{batch_sequences, load_corpus, split_corpus, window, window_count, CharVocab, Split};
use crate::error::{Error, Result};
use crate::experiment::{DataConfig, ExperimentConfig};
use crate::model::Model;
use crate::optim::{AdamState, LrSchedule};
use crate::params::{zeros_like, Parameters};
use crate::tensor::{Rng, SamplingScheme};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training BPC over the epoch's updates; absent for epoch 0.
    pub train_bpc: Option<f64>,
    pub valid_bpc: f64,
    /// Learning rate in effect for the next epoch.
    pub lr: f64,
    pub halved: bool,
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,train_bpc,valid_bpc,lr\n");
    for m in history {
        let train = m.train_bpc.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", m.epoch, train, m.valid_bpc, m.lr));
    }
    out
}

/// An encoded corpus split three ways, with the vocabulary of its training
/// part.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: CharVocab,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    /// Characters of valid and test that are missing from train.
    pub unknown: usize,
}

impl Corpus {
    pub fn load(data: &DataConfig) -> Result<Corpus> {
        let text = load_corpus(&data.corpus, data.text_mode)?;
        Corpus::from_text(&text, data)
    }

    pub fn from_text(text: &str, data: &DataConfig) -> Result<Corpus> {
        let splits = split_corpus(text, data.split)?;
        let vocab = CharVocab::from_text(&splits.train);
        let valid = vocab.encode(&splits.valid);
        let test = vocab.encode(&splits.test);
        Ok(Corpus {
            train: vocab.encode(&splits.train).ids,
            valid: valid.ids,
            test: test.ids,
            unknown: valid.unknown + test.unknown,
            vocab,
        })
    }

    pub fn tokens(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Summed loss of every window of `tokens`, each unrolled from a zero state.
pub fn evaluate_tokens(model: &Model, tokens: &[usize], seq_len: usize) -> Result<LossReport> {
    let n = window_count(tokens.len(), seq_len);
    if n == 0 {
        return Err(Error::rejected(format!(
            "evaluation needs more than {seq_len} characters, got {}",
            tokens.len()
        )));
    }
    let reports: Vec<LossReport> = (0..n)
        .into_par_iter()
        .map(|k| {
            let (x, y) = window(tokens, seq_len, k);
            let rec = unroll_forward(model, x, &model.cell.initial_state())?;
            loss_bpc(&rec, y)
        })
        .collect::<Result<_>>()?;
    Ok(reports
        .iter()
        .fold(LossReport::from_nll(0.0, 0), |acc, r| acc.merge(r)))
}

/// Gradient of the mean per-character NLL over a batch, and the summed loss.
pub fn batch_gradient(model: &Model, inputs: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<(Model, LossReport)> {
    let parts: Vec<(Model, LossReport)> = inputs
        .par_iter()
        .zip(targets)
        .map(|(x, y)| {
            let rec = unroll_forward(model, x, &model.cell.initial_state())?;
            let loss = loss_bpc(&rec, y)?;
            let (g, _) = backward_through_time(model, &rec, y, LossScope::FullSequence)?;
            Ok((g, loss))
        })
        .collect::<Result<_>>()?;
    // fixed reduction order keeps results independent of thread scheduling
    let mut grad = zeros_like(model);
    let mut loss = LossReport::from_nll(0.0, 0);
    for (g, l) in &parts {
        grad.accumulate(g);
        loss = loss.merge(l);
    }
    if loss.count > 0 {
        grad.scale(1.0 / loss.count as f64);
    }
    Ok((grad, loss))
}

pub struct Trainer {
    pub config: ExperimentConfig,
    pub corpus: Corpus,
    pub model: Model,
    pub adam: AdamState,
    pub schedule: LrSchedule,
    pub rng: Rng,
    pub epoch: usize,
    pub best_val_bpc: Option<f64>,
    pub history: Vec<EpochMetrics>,
}

/// Where a finished run left its files.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub best_val_bpc: f64,
    pub output: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Trainer> {
        let corpus = Corpus::load(&config.data)?;
        Trainer::with_corpus(config, corpus)
    }

    /// A fresh run on an already encoded corpus. The model is sampled from a
    /// generator seeded with `train.seed`; the same generator then drives
    /// window shuffling.
    pub fn with_corpus(config: ExperimentConfig, corpus: Corpus) -> Result<Trainer> {
        config.validate()?;
        let mut rng = Rng::new(config.train.seed);
        let spec = config.cell_spec(corpus.vocab.size())?;
        let model = Model::sample(&spec, SamplingScheme::symmetric(config.model.r_v), &mut rng)?;
        let adam = AdamState::new(&model, config.train.lr)?;
        Ok(Trainer {
            config,
            corpus,
            model,
            adam,
            schedule: LrSchedule::default(),
            rng,
            epoch: 0,
            best_val_bpc: None,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, corpus: Corpus) -> Result<Trainer> {
        if ck.vocab != corpus.vocab {
            return Err(Error::Checkpoint(
                "checkpoint vocabulary differs from the corpus vocabulary".into(),
            ));
        }
        Ok(Trainer {
            config: ck.config,
            corpus,
            model: ck.model,
            adam: ck.adam,
            schedule: ck.schedule,
            rng: Rng::new(ck.rng_state),
            epoch: ck.epoch,
            best_val_bpc: ck.best_val_bpc,
            history: ck.history,
        })
    }

    /// Continues from a checkpoint file, reloading the corpus it names.
    pub fn resume(path: &Path) -> Result<Trainer> {
        let ck = Checkpoint::load(path)?;
        let corpus = Corpus::load(&ck.config.data)?;
        Trainer::from_checkpoint(ck, corpus)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab: self.corpus.vocab.clone(),
            model: self.model.clone(),
            adam: self.adam.clone(),
            schedule: self.schedule.clone(),
            epoch: self.epoch,
            best_val_bpc: self.best_val_bpc,
            rng_state: self.rng.state(),
            history: self.history.clone(),
        }
    }

    pub fn evaluate(&self, split: Split) -> Result<LossReport> {
        evaluate_tokens(&self.model, self.corpus.tokens(split), self.config.train.seq_len)
    }

    /// One pass over the (optionally capped) shuffled training windows.
    /// Returns the mean training BPC measured before each update.
    pub fn train_epoch(&mut self) -> Result<f64> {
        let t = &self.config.train;
        let (seq_len, batch, clip, cap) = (t.seq_len, t.batch, t.clip, t.windows_per_epoch);
        let stream = batch_sequences(&self.corpus.train, seq_len, batch, Some(&mut self.rng), Split::Train)?;
        let mut remaining = cap.unwrap_or(usize::MAX);
        let mut total = LossReport::from_nll(0.0, 0);
        for b in stream {
            if remaining == 0 {
                break;
            }
            let n = b.len().min(remaining);
            remaining -= n;
            let (mut grad, loss) = batch_gradient(&self.model, &b.inputs[..n], &b.targets[..n])?;
            if !loss.nll_nats.is_finite() {
                return Err(Error::Divergence(format!(
                    "training loss became {} in epoch {}",
                    loss.nll_nats,
                    self.epoch + 1
                )));
            }
            if let Some(c) = clip {
                let norm = grad.norm_l2();
                if norm > c {
                    grad.scale(c / norm);
                }
            }
            self.adam.apply(&mut self.model, &grad)?;
            total = total.merge(&loss);
        }
        if !self.model.is_finite() {
            return Err(Error::Divergence(format!("parameters became non-finite in epoch {}", self.epoch + 1)));
        }
        Ok(total.bpc)
    }

    /// Trains to the configured epoch budget, writing metrics and
    /// checkpoints into `output` after every epoch.
    ///
    /// On divergence the last completed epoch's checkpoint is left in place
    /// and the error is returned.
    pub fn run(&mut self, output: Option<&Path>) -> Result<TrainOutcome> {
        if let Some(dir) = output {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let vocab = dir.join(VOCAB_FILE);
            std::fs::write(&vocab, self.corpus.vocab.to_json()).map_err(|e| Error::io(&vocab, e))?;
        }
        if self.history.is_empty() {
            self.start()?;
            self.persist(output, true)?;
        }
        while self.epoch < self.config.train.epochs {
            let improved = self.step_epoch()?;
            self.persist(output, improved)?;
        }
        Ok(TrainOutcome {
            history: self.history.clone(),
            best_val_bpc: self.best_val_bpc.unwrap_or(f64::NAN),
            output: output.map(Path::to_path_buf),
        })
    }

    /// Records the untrained validation BPC as epoch 0.
    pub fn start(&mut self) -> Result<()> {
        let valid = self.evaluate(Split::Valid)?.bpc;
        self.best_val_bpc = Some(valid);
        self.history = vec![EpochMetrics {
            epoch: 0,
            train_bpc: None,
            valid_bpc: valid,
            lr: self.adam.lr,
            halved: false,
        }];
        Ok(())
    }

    /// Trains and validates one epoch, applying the learning-rate schedule.
    /// Returns whether validation BPC reached a new best.
    pub fn step_epoch(&mut self) -> Result<bool> {
        if self.history.is_empty() {
            self.start()?;
        }
        let train = self.train_epoch()?;
        let valid = self.evaluate(Split::Valid)?.bpc;
        let halved = self.schedule.step(valid, &mut self.adam.lr)?;
        self.epoch += 1;
        let improved = self.best_val_bpc.is_none_or(|b| valid < b);
        if improved {
            self.best_val_bpc = Some(valid);
        }
        self.history.push(EpochMetrics {
            epoch: self.epoch,
            train_bpc: Some(train),
            valid_bpc: valid,
            lr: self.adam.lr,
            halved,
        });
        Ok(improved)
    }

    fn persist(&self, output: Option<&Path>, best: bool) -> Result<()> {
        let Some(dir) = output else { return Ok(()) };
        let metrics = dir.join(METRICS_FILE);
        std::fs::write(&metrics, metrics_csv(&self.history)).map_err(|e| Error::io(&metrics, e))?;
        let ck = self.checkpoint();
        ck.save(&dir.join(LAST_CHECKPOINT))?;
        if best {
            ck.save(&dir.join(BEST_CHECKPOINT))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{CellFamily, IntegrationMode};
    use crate::data::{SplitFractions, TextMode};
    use crate::experiment::{ModelConfig, TrainConfig};

    fn config(epochs: usize) -> ExperimentConfig {
        ExperimentConfig {
            name: "toy".into(),
            output: "unused".into(),
            model: ModelConfig {
                family: CellFamily::Rnn,
                mode: IntegrationMode::MiGeneral,
                hidden: 6,
                activation: crate::cells::Activation::Tanh,
                mi_bias: Default::default(),
                r_w: 0.1,
                r_u: 0.1,
                r_v: 0.1,
            },
            train: TrainConfig {
                seq_len: 8,
                batch: 4,
                lr: 1e-2,
                epochs,
                seed: 3,
                clip: None,
                windows_per_epoch: None,
            },
            data: DataConfig {
                corpus: "unused".into(),
                text_mode: TextMode::Utf8,
                split: SplitFractions {
                    train: 0.8,
                    valid: 0.1,
                    test: 0.1,
                },
            },
            diagnostics: Default::default(),
        }
    }

    fn corpus() -> Corpus {
        let text = "the quick brown fox jumps over the lazy dog. ".repeat(12);
        Corpus::from_text(&text, &config(0).data).unwrap()
    }

    #[test]
    fn zero_epochs_reports_initial_validation_only() {
        let mut t = Trainer::with_corpus(config(0), corpus()).unwrap();
        let before = t.model.clone();
        let out = t.run(None).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.history[0].train_bpc, None);
        assert_eq!(t.model, before);
        assert_eq!(t.adam.step, 0);
    }

    #[test]
    fn training_lowers_validation_bpc() {
        let mut t = Trainer::with_corpus(config(4), corpus()).unwrap();
        let out = t.run(None).unwrap();
        assert!(out.history[4].valid_bpc < out.history[0].valid_bpc - 0.5);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let mut straight = Trainer::with_corpus(config(3), corpus()).unwrap();
        straight.run(None).unwrap();

        let mut first = Trainer::with_corpus(config(1), corpus()).unwrap();
        first.run(None).unwrap();
        let mut ck = Checkpoint::from_bytes(&first.checkpoint().to_bytes()).unwrap();
        ck.config.train.epochs = 3;
        let mut resumed = Trainer::from_checkpoint(ck, corpus()).unwrap();
        resumed.run(None).unwrap();

        assert_eq!(metrics_csv(&resumed.history), metrics_csv(&straight.history));
        assert_eq!(resumed.model, straight.model);
        assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes());
    }

    #[test]
    fn batch_gradient_is_the_mean_of_sequence_gradients() {
        let t = Trainer::with_corpus(config(0), corpus()).unwrap();
        let xs = vec![t.corpus.train[0..8].to_vec(), t.corpus.train[8..16].to_vec()];
        let ys = vec![t.corpus.train[1..9].to_vec(), t.corpus.train[9..17].to_vec()];
        let (g, loss) = batch_gradient(&t.model, &xs, &ys).unwrap();
        assert_eq!(loss.count, 16);
        let f = |m: &Model| batch_gradient(m, &xs, &ys).unwrap().1.nll_nats / 16.0;
        let numeric = crate::oracles::finite_diff_grad(f, &t.model, 1e-5).unwrap();
        assert!(crate::oracles::max_relative_error(&g.flatten(), &numeric.flatten(), 1e-4) <= 1e-6);
    }

    #[test]
    fn unknown_characters_are_counted() {
        let mut cfg = config(0).data;
        cfg.split = SplitFractions {
            train: 0.5,
            valid: 0.25,
            test: 0.25,
        };
        let c = Corpus::from_text("aaaaabxyzq", &cfg).unwrap();
        assert_eq!(c.vocab.symbols(), &['a']);
        assert_eq!(c.unknown, 5);
        assert!(c.valid.iter().chain(&c.test).all(|i| *i < c.vocab.size()));
    }

    #[test]
    fn metrics_csv_format() {
        let h = vec![
            EpochMetrics {
                epoch: 0,
                train_bpc: None,
                valid_bpc: 4.5,
                lr: 1e-4,
                halved: false,
            },
            EpochMetrics {
                epoch: 1,
                train_bpc: Some(4.25),
                valid_bpc: 4.0,
                lr: 5e-5,
                halved: true,
            },
        ];
        assert_eq!(metrics_csv(&h), "epoch,train_bpc,valid_bpc,lr\n0,,4.5,0.0001\n1,4.25,4,0.00005\n");
        assert_eq!(metrics_csv(&[]), "epoch,train_bpc,valid_bpc,lr\n");
    }
}
