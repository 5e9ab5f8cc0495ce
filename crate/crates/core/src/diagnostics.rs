//! Gradient-flow and robustness experiments: gradient norms over training,
//! hidden-activation histograms, the weight-scale sweep and validation-curve
//! comparisons, plus their CSV/JSON reports.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bptt::{backward_through_time, jacobian_product, log_norm, unroll_forward, LossScope};
use crate::cells::{Activation, IntegrationMode};
use crate::data::{window, window_count};
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::model::Model;
use crate::train::{Corpus, Trainer};

/// Start indices of `count` windows spread evenly over the token stream.
pub fn probe_windows(len: usize, seq_len: usize, count: usize) -> Vec<usize> {
    let n = window_count(len, seq_len);
    let count = count.min(n);
    (0..count).map(|i| i * n / count).collect()
}

/// Mean over the probe windows of `ln ‖∂C/∂h_t‖₂` for each `t` in `probes`,
/// where `C` is the loss of the final prediction of each window.
pub fn probe_gradient_norms(
    model: &Model,
    tokens: &[usize],
    seq_len: usize,
    probes: &[usize],
    count: usize,
) -> Result<Vec<f64>> {
    if let Some(p) = probes.iter().find(|p| **p > seq_len) {
        return Err(Error::config(format!("probe {p} lies beyond seq_len {seq_len}")));
    }
    let windows = probe_windows(tokens.len(), seq_len, count);
    if windows.is_empty() {
        return Err(Error::rejected("no probe windows available"));
    }
    let per_window: Vec<Vec<f64>> = windows
        .par_iter()
        .map(|&k| {
            let (x, y) = window(tokens, seq_len, k);
            let rec = unroll_forward(model, x, &model.cell.initial_state())?;
            let (_, trace) = backward_through_time(model, &rec, y, LossScope::FinalStep)?;
            Ok(probes.iter().map(|&t| trace.log_norms[t]).collect())
        })
        .collect::<Result<_>>()?;
    Ok(mean_columns(&per_window, probes.len()))
}

/// The same averages computed by carrying `∂C/∂h_T` back through explicit
/// Jacobian products instead of the general backward pass. Plain RNN only.
pub fn probe_gradient_norms_by_chain(
    model: &Model,
    tokens: &[usize],
    seq_len: usize,
    probes: &[usize],
    count: usize,
) -> Result<Vec<f64>> {
    let windows = probe_windows(tokens.len(), seq_len, count);
    let per_window: Vec<Vec<f64>> = windows
        .par_iter()
        .map(|&k| {
            let (x, y) = window(tokens, seq_len, k);
            let rec = unroll_forward(model, x, &model.cell.initial_state())?;
            let (_, trace) = backward_through_time(model, &rec, y, LossScope::FinalStep)?;
            let last = &trace.hidden_grads[seq_len];
            probes
                .iter()
                .map(|&t| {
                    if t == seq_len {
                        return Ok(log_norm(last));
                    }
                    let p = jacobian_product(&model.cell, &rec, seq_len, t)?;
                    Ok(log_norm(&p.matvec(last)?))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(mean_columns(&per_window, probes.len()))
}

fn mean_columns(rows: &[Vec<f64>], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.iter().map(|v| v / rows.len() as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormPoint {
    pub epoch: usize,
    pub t: usize,
    pub model: String,
    pub log_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationHistogram {
    pub model: String,
    /// `bins + 1` edges spanning `[−1, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    pub saturated: u64,
    pub threshold: f64,
}

impl ActivationHistogram {
    /// Bins `values` on `[−1, 1]`; values outside the range are clamped into
    /// the end bins.
    pub fn from_values(model: &str, values: impl IntoIterator<Item = f64>, bins: usize, threshold: f64) -> Self {
        let edges: Vec<f64> = (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect();
        let mut h = ActivationHistogram {
            model: model.to_string(),
            edges,
            counts: vec![0; bins],
            total: 0,
            saturated: 0,
            threshold,
        };
        for v in values {
            h.add(v);
        }
        h
    }

    fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let pos = ((v + 1.0) / 2.0 * bins as f64).floor();
        let k = (pos.max(0.0) as usize).min(bins - 1);
        self.counts[k] += 1;
        self.total += 1;
        if v.abs() > self.threshold {
            self.saturated += 1;
        }
    }

    pub fn saturation_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.saturated as f64 / self.total as f64
        }
    }
}

/// Histogram of every hidden unit at every step of every validation window.
pub fn activation_histogram(
    tag: &str,
    model: &Model,
    tokens: &[usize],
    seq_len: usize,
    bins: usize,
    threshold: f64,
) -> Result<ActivationHistogram> {
    let n = window_count(tokens.len(), seq_len);
    let parts: Vec<ActivationHistogram> = (0..n)
        .into_par_iter()
        .map(|k| {
            let (x, _) = window(tokens, seq_len, k);
            let rec = unroll_forward(model, x, &model.cell.initial_state())?;
            let values = rec.states[1..].iter().flat_map(|s| s.h.iter().copied());
            Ok(ActivationHistogram::from_values(tag, values, bins, threshold))
        })
        .collect::<Result<_>>()?;
    let mut out = ActivationHistogram::from_values(tag, [], bins, threshold);
    for p in parts {
        for (a, b) in out.counts.iter_mut().zip(&p.counts) {
            *a += b;
        }
        out.total += p.total;
        out.saturated += p.saturated;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub r_w: f64,
    pub seed: u64,
    pub test_bpc: Option<f64>,
    pub diverged: bool,
}

/// Robustness of one model to the `W` scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpread {
    pub model: String,
    /// Mean test BPC per `r_w`, in sweep order.
    pub means: Vec<(f64, f64)>,
    /// Population standard deviation of `means` (0 for a single value).
    pub std: f64,
    /// `max − min` of `means`.
    pub spread: f64,
}

/// Per-model spread of the seed-averaged BPC across `r_w`. Diverged rows are
/// left out and reported in `warnings`.
pub fn sweep_spreads(rows: &[SweepRow], warnings: &mut Vec<String>) -> Vec<SweepSpread> {
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    models
        .into_iter()
        .map(|m| {
            let mut scales: Vec<f64> = Vec::new();
            for r in rows.iter().filter(|r| r.model == m) {
                if !scales.contains(&r.r_w) {
                    scales.push(r.r_w);
                }
            }
            let mut means = Vec::new();
            for s in scales {
                let mut vals = Vec::new();
                for r in rows.iter().filter(|r| r.model == m && r.r_w == s) {
                    match (r.diverged, r.test_bpc) {
                        (false, Some(v)) => vals.push(v),
                        _ => warnings.push(format!(
                            "{m} r_w={s} seed={} diverged; excluded from the spread",
                            r.seed
                        )),
                    }
                }
                if !vals.is_empty() {
                    means.push((s, vals.iter().sum::<f64>() / vals.len() as f64));
                }
            }
            let values: Vec<f64> = means.iter().map(|(_, v)| *v).collect();
            let spread = if values.is_empty() {
                0.0
            } else {
                values.iter().cloned().fold(f64::MIN, f64::max) - values.iter().cloned().fold(f64::MAX, f64::min)
            };
            SweepSpread {
                model: m.to_string(),
                std: population_std(&values),
                spread,
                means,
            }
        })
        .collect()
}

/// Two-pass population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Inconclusive,
    Fail,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Inconclusive => "INCONCLUSIVE",
            Verdict::Fail => "FAIL",
        })
    }
}

/// Outcome of "`candidate` is lower than `baseline`" under seed noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginCheck {
    pub baseline_mean: f64,
    pub candidate_mean: f64,
    /// `sqrt(s_b²/n_b + s_c²/n_c)` with sample variances.
    pub pooled_se: f64,
    pub verdict: Verdict,
}

/// Passes when the candidate mean is lower by more than one pooled standard
/// error, fails when it is higher by more than one, and is inconclusive in
/// between. Needs at least two samples per side.
pub fn margin_check(baseline: &[f64], candidate: &[f64]) -> Result<MarginCheck> {
    if baseline.len() < 2 || candidate.len() < 2 {
        return Err(Error::rejected("the margin rule needs at least two seeds per model"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (b, c) = (mean(baseline), mean(candidate));
    let se = (sample_variance(baseline) / baseline.len() as f64
        + sample_variance(candidate) / candidate.len() as f64)
        .sqrt();
    let verdict = if b - c > se {
        Verdict::Pass
    } else if c - b > se {
        Verdict::Fail
    } else {
        Verdict::Inconclusive
    };
    Ok(MarginCheck {
        baseline_mean: b,
        candidate_mean: c,
        pooled_se: se,
        verdict,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub model: String,
    pub seed: u64,
    pub epoch: usize,
    pub valid_bpc: f64,
}

/// A named variant of a base configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub tag: String,
    pub config: ExperimentConfig,
}

/// `base` with its RNN block switched to `mode` and `activation`.
pub fn variant(base: &ExperimentConfig, tag: &str, mode: IntegrationMode, activation: Activation) -> Variant {
    let mut config = base.clone();
    config.model.mode = mode;
    config.model.activation = activation;
    config.name = tag.to_string();
    Variant {
        tag: tag.to_string(),
        config,
    }
}

/// Trains each variant and records the probe norms after every epoch,
/// including the untrained epoch 0.
pub fn gradient_norm_experiment(variants: &[Variant], corpus: &Corpus) -> Result<Vec<NormPoint>> {
    let per_variant: Vec<Vec<NormPoint>> = variants
        .par_iter()
        .map(|v| {
            let d = &v.config.diagnostics;
            let seq_len = v.config.train.seq_len;
            let mut trainer = Trainer::with_corpus(v.config.clone(), corpus.clone())?;
            let mut points = Vec::new();
            let mut record = |epoch: usize, model: &Model| -> Result<()> {
                let norms = probe_gradient_norms(model, &corpus.train, seq_len, &d.probes, d.probe_sequences)?;
                for (t, l) in d.probes.iter().zip(norms) {
                    points.push(NormPoint {
                        epoch,
                        t: *t,
                        model: v.tag.clone(),
                        log_norm: l,
                    });
                }
                Ok(())
            };
            record(0, &trainer.model)?;
            for epoch in 1..=v.config.train.epochs {
                trainer.step_epoch()?;
                record(epoch, &trainer.model)?;
            }
            Ok(points)
        })
        .collect::<Result<_>>()?;
    Ok(per_variant.into_iter().flatten().collect())
}

/// Trains each variant to budget and histograms its validation activations.
pub fn histogram_experiment(variants: &[Variant], corpus: &Corpus) -> Result<Vec<ActivationHistogram>> {
    variants
        .par_iter()
        .map(|v| {
            let mut trainer = Trainer::with_corpus(v.config.clone(), corpus.clone())?;
            trainer.run(None)?;
            let d = &v.config.diagnostics;
            activation_histogram(
                &v.tag,
                &trainer.model,
                &corpus.valid,
                v.config.train.seq_len,
                d.bins,
                d.saturation_threshold,
            )
        })
        .collect()
}

/// Every `(variant, r_w, seed)` cell trained to budget and scored on the
/// test split. Divergence is recorded rather than propagated.
pub fn scaling_sweep(variants: &[Variant], corpus: &Corpus) -> Result<Vec<SweepRow>> {
    let jobs: Vec<(&Variant, f64, u64)> = variants
        .iter()
        .flat_map(|v| {
            let d = &v.config.diagnostics;
            d.r_w_values
                .iter()
                .flat_map(move |r| d.seeds.iter().map(move |s| (v, *r, *s)))
        })
        .collect();
    jobs.par_iter()
        .map(|(v, r_w, seed)| {
            let mut config = v.config.clone();
            config.model.r_w = *r_w;
            config.train.seed = *seed;
            let mut trainer = Trainer::with_corpus(config, corpus.clone())?;
            let outcome = trainer.run(None).and_then(|_| trainer.evaluate(crate::data::Split::Test));
            let (test_bpc, diverged) = match outcome {
                Ok(r) if r.bpc.is_finite() => (Some(r.bpc), false),
                Ok(_) | Err(Error::Divergence(_)) => (None, true),
                Err(e) => return Err(e),
            };
            Ok(SweepRow {
                model: v.tag.clone(),
                r_w: *r_w,
                seed: *seed,
                test_bpc,
                diverged,
            })
        })
        .collect()
}

/// Validation BPC after every epoch for each variant and seed.
pub fn curve_experiment(variants: &[Variant], corpus: &Corpus) -> Result<Vec<CurvePoint>> {
    let jobs: Vec<(&Variant, u64)> = variants
        .iter()
        .flat_map(|v| v.config.diagnostics.seeds.iter().map(move |s| (v, *s)))
        .collect();
    let runs: Vec<Vec<CurvePoint>> = jobs
        .par_iter()
        .map(|(v, seed)| {
            let mut config = v.config.clone();
            config.train.seed = *seed;
            let mut trainer = Trainer::with_corpus(config, corpus.clone())?;
            let outcome = trainer.run(None)?;
            Ok(outcome
                .history
                .iter()
                .map(|m| CurvePoint {
                    model: v.tag.clone(),
                    seed: *seed,
                    epoch: m.epoch,
                    valid_bpc: m.valid_bpc,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(runs.into_iter().flatten().collect())
}

/// Final-epoch validation BPC of `candidate` against `baseline`, per seed.
pub fn compare_curves(points: &[CurvePoint], baseline: &str, candidate: &str) -> Result<MarginCheck> {
    let finals = |tag: &str| -> Vec<f64> {
        let last = points.iter().filter(|p| p.model == tag).map(|p| p.epoch).max();
        points
            .iter()
            .filter(|p| p.model == tag && Some(p.epoch) == last)
            .map(|p| p.valid_bpc)
            .collect()
    };
    margin_check(&finals(baseline), &finals(candidate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub version: String,
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub lr: f64,
}

/// Everything one `diagnose` run produced.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub metadata: Option<ReportMetadata>,
    pub norms: Vec<NormPoint>,
    pub histograms: Vec<ActivationHistogram>,
    pub sweep: Vec<SweepRow>,
    pub spreads: Vec<SweepSpread>,
    pub curves: Vec<CurvePoint>,
    pub comparisons: Vec<(String, MarginCheck)>,
    pub warnings: Vec<String>,
}

pub fn norms_csv(points: &[NormPoint]) -> String {
    let mut out = String::from("epoch,t,model,log_norm\n");
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.epoch, p.t, p.model, p.log_norm));
    }
    out
}

pub fn hist_csv(hists: &[ActivationHistogram]) -> String {
    let mut out = String::from("model,bin_lo,bin_hi,count\n");
    for h in hists {
        for (k, c) in h.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", h.model, h.edges[k], h.edges[k + 1], c));
        }
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("model,r_w,seed,test_bpc,diverged\n");
    for r in rows {
        let bpc = r.test_bpc.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.model, r.r_w, r.seed, bpc, r.diverged));
    }
    out
}

pub fn curves_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("model,seed,epoch,valid_bpc\n");
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.model, p.seed, p.epoch, p.valid_bpc));
    }
    out
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(json: &str) -> Result<Report> {
        serde_json::from_str(json).map_err(|e| Error::rejected(format!("report summary: {e}")))
    }
}

/// Writes `norms.csv`, `hist.csv`, `sweep.csv`, `curves.csv` and
/// `summary.json` into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("norms.csv", norms_csv(&report.norms)),
        ("hist.csv", hist_csv(&report.histograms)),
        ("sweep.csv", sweep_csv(&report.sweep)),
        ("curves.csv", curves_csv(&report.curves)),
        ("summary.json", report.to_json()),
    ];
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
