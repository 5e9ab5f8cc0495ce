//! Unrolling, the character-prediction loss, and backpropagation through
//! time, including the explicit per-step Jacobian products used to study
//! gradient flow.

use std::f64::consts::LN_2;

use crate::cells::{Cell, CellState, Input, StepCache};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::zeros_like;
use crate::tensor::{norm_l2, Matrix, Vector};

/// Stand-in for `log 0` in emitted traces. Any finite, nonzero `f64` norm has
/// a log above −745, so this value cannot collide with a real measurement.
pub const LOG_NORM_ZERO: f64 = -1.0e4;

/// Forward trajectory of one sequence.
#[derive(Debug, Clone)]
pub struct UnrollRecord {
    /// `h_0 … h_T`; index `t` is the state after `t` steps.
    pub states: Vec<CellState>,
    /// `caches[t − 1]` produced `states[t]`.
    pub caches: Vec<StepCache>,
    /// `logits[t − 1]` is the readout of `states[t]`.
    pub logits: Vec<Vector>,
    pub inputs: Vec<usize>,
}

impl UnrollRecord {
    pub fn len(&self) -> usize {
        self.caches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub nll_nats: f64,
    pub bpc: f64,
    pub count: usize,
}

impl LossReport {
    pub fn from_nll(nll_nats: f64, count: usize) -> Self {
        let bpc = if count == 0 {
            0.0
        } else {
            nll_nats / (count as f64 * LN_2)
        };
        LossReport {
            nll_nats,
            bpc,
            count,
        }
    }

    pub fn merge(&self, other: &LossReport) -> LossReport {
        LossReport::from_nll(self.nll_nats + other.nll_nats, self.count + other.count)
    }
}

/// Which predictions the objective sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossScope {
    /// Every step's prediction (the training objective).
    FullSequence,
    /// Only the prediction made from the last hidden state.
    FinalStep,
}

/// `∂C/∂h_t` for every `t = 0 … T`.
#[derive(Debug, Clone)]
pub struct GradientTrace {
    pub hidden_grads: Vec<Vector>,
    /// `ln ‖∂C/∂h_t‖₂`, with [`LOG_NORM_ZERO`] for an exactly zero gradient.
    pub log_norms: Vec<f64>,
    /// `factors[k − 1]` is [`step_jacobian`] of step `k`; empty unless
    /// [`GradientTrace::store_factors`] was called.
    pub factors: Vec<Matrix>,
}

impl GradientTrace {
    fn from_grads(hidden_grads: Vec<Vector>) -> Self {
        let log_norms = hidden_grads.iter().map(|g| log_norm(g)).collect();
        GradientTrace {
            hidden_grads,
            log_norms,
            factors: Vec::new(),
        }
    }

    /// Keeps the explicit per-step factors of a plain RNN record.
    pub fn store_factors(&mut self, cell: &Cell, record: &UnrollRecord) -> Result<()> {
        self.factors = record
            .caches
            .iter()
            .map(|c| step_jacobian(cell, c))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// CSV rows `epoch,t,log_l2_norm`, header included.
    pub fn to_csv(&self, epoch: usize) -> String {
        let mut out = String::from("epoch,t,log_l2_norm\n");
        for (t, l) in self.log_norms.iter().enumerate() {
            out.push_str(&format!("{epoch},{t},{l}\n"));
        }
        out
    }
}

pub fn log_norm(v: &[f64]) -> f64 {
    let n = norm_l2(v);
    if n > 0.0 {
        n.ln()
    } else {
        LOG_NORM_ZERO
    }
}

/// Runs the cell over `inputs` starting from `h0`, reading out logits at every
/// step.
pub fn unroll_forward(model: &Model, inputs: &[usize], h0: &CellState) -> Result<UnrollRecord> {
    model.check()?;
    if inputs.is_empty() {
        return Err(Error::rejected("cannot unroll an empty sequence"));
    }
    if model.cell.input_dim() != model.vocab() {
        return Err(Error::rejected(format!(
            "cell reads {} symbols but the readout predicts {}",
            model.cell.input_dim(),
            model.vocab()
        )));
    }
    let mut states = Vec::with_capacity(inputs.len() + 1);
    let mut caches = Vec::with_capacity(inputs.len());
    let mut logits = Vec::with_capacity(inputs.len());
    // validates the first step's shapes; later steps reuse them
    let (mut state, cache) = model.cell.step(Input::OneHot(inputs[0]), h0)?;
    states.push(h0.clone());
    logits.push(model.readout.logits(&state.h));
    caches.push(cache);
    for &x in &inputs[1..] {
        if x >= model.vocab() {
            return Err(Error::rejected(format!("input symbol {x} outside vocabulary")));
        }
        let (next, cache) = model.cell.step_unchecked(Input::OneHot(x), &state);
        states.push(state);
        logits.push(model.readout.logits(&next.h));
        caches.push(cache);
        state = next;
    }
    states.push(state);
    Ok(UnrollRecord {
        states,
        caches,
        logits,
        inputs: inputs.to_vec(),
    })
}

/// `log Σ exp(logits)`, stable for large magnitudes.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|v| (v - lse).exp()).collect()
}

/// Negative log-likelihood of `targets` under the recorded logits.
pub fn loss_bpc(record: &UnrollRecord, targets: &[usize]) -> Result<LossReport> {
    loss_from_logits(&record.logits, targets)
}

pub fn loss_from_logits(logits: &[Vector], targets: &[usize]) -> Result<LossReport> {
    if logits.len() != targets.len() {
        return Err(Error::rejected(format!(
            "{} predictions but {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let mut nll = 0.0;
    for (l, &y) in logits.iter().zip(targets) {
        if y >= l.len() {
            return Err(Error::rejected(format!(
                "target {y} outside a vocabulary of {}",
                l.len()
            )));
        }
        nll += log_sum_exp(l) - l[y];
    }
    Ok(LossReport::from_nll(nll, targets.len()))
}

/// Loss of the predictions selected by `scope`.
pub fn scoped_loss(record: &UnrollRecord, targets: &[usize], scope: LossScope) -> Result<LossReport> {
    match scope {
        LossScope::FullSequence => loss_bpc(record, targets),
        LossScope::FinalStep => {
            let t = record.len();
            if targets.len() != t {
                return Err(Error::rejected("one target per step is required"));
            }
            loss_from_logits(&record.logits[t - 1..], &targets[t - 1..])
        }
    }
}

/// Exact gradients of the scoped negative log-likelihood (in nats) with
/// respect to every parameter of `model`, plus `∂C/∂h_t` at every step.
pub fn backward_through_time(
    model: &Model,
    record: &UnrollRecord,
    targets: &[usize],
    scope: LossScope,
) -> Result<(Model, GradientTrace)> {
    let steps = record.len();
    if targets.len() != steps || record.logits.len() != steps || record.states.len() != steps + 1 {
        return Err(Error::rejected("unroll record and targets disagree in length"));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= model.vocab()) {
        return Err(Error::rejected(format!("target {bad} outside vocabulary")));
    }
    let d = model.hidden();
    let mut grads = zeros_like(model);
    let mut hidden_grads = vec![Vector::zeros(d); steps + 1];
    let mut d_h_next = vec![0.0; d];
    let mut d_c_next: Option<Vec<f64>> = record.states[0].c.as_ref().map(|_| vec![0.0; d]);

    for t in (1..=steps).rev() {
        let h_t = &record.states[t].h;
        let mut d_h = d_h_next;
        let contributes = scope == LossScope::FullSequence || t == steps;
        if contributes {
            let mut d_logits = softmax(&record.logits[t - 1]);
            d_logits[targets[t - 1]] -= 1.0;
            grads.readout.weight.add_outer(&d_logits, h_t);
            for (b, g) in grads.readout.bias.iter_mut().zip(&d_logits) {
                *b += g;
            }
            model.readout.weight.matvec_transposed_acc(&d_logits, &mut d_h);
        }
        hidden_grads[t] = Vector::from_vec(d_h.clone());
        let step = model
            .cell
            .step_backward(&record.caches[t - 1], &d_h, d_c_next.as_deref(), &mut grads.cell)?;
        d_h_next = step.d_h_prev.into_vec();
        d_c_next = step.d_c_prev.map(Vector::into_vec);
    }
    hidden_grads[0] = Vector::from_vec(d_h_next);
    Ok((grads, GradientTrace::from_grads(hidden_grads)))
}

/// The plain-RNN backward factor of step `k`,
/// `F_k = Uᵀ diag(g_k) diag(φ'_k)`, mapping `∂C/∂h_k` to the contribution
/// `∂C/∂h_{k−1}`. `g_k` is 1, `Wx_k` or `α⊙Wx_k + β₁` depending on the mode.
pub fn step_jacobian(cell: &Cell, cache: &StepCache) -> Result<Matrix> {
    let (Cell::Rnn(rnn), StepCache::Rnn(k)) = (cell, cache) else {
        return Err(Error::rejected(
            "explicit Jacobian factors are defined for plain RNN cells only",
        ));
    };
    let gate = rnn.block.recurrent_gate(&k.wx);
    let scale: Vec<f64> = gate
        .iter()
        .zip(&k.out)
        .map(|(g, y)| g * k.activation.derivative_from_output(*y))
        .collect();
    // Uᵀ diag(s): column i of Uᵀ (row i of U) scaled by s_i
    let u_t = rnn.block.u.transpose();
    u_t.matmul(&Matrix::diag(&scale))
}

/// `∂h_from/∂h_to` in backward orientation: the `d × d` matrix `P` with
/// `∂C/∂h_to = P · ∂C/∂h_from` when the only loss source is at `from_t`.
/// Equals `F_{to+1} F_{to+2} ⋯ F_{from}`.
pub fn jacobian_product(cell: &Cell, record: &UnrollRecord, from_t: usize, to_t: usize) -> Result<Matrix> {
    if to_t >= from_t || from_t > record.len() {
        return Err(Error::rejected(format!(
            "jacobian_product needs to_t < from_t <= {}, got {to_t} and {from_t}",
            record.len()
        )));
    }
    let mut product = step_jacobian(cell, &record.caches[to_t])?;
    for k in to_t + 2..=from_t {
        product = product.matmul(&step_jacobian(cell, &record.caches[k - 1])?)?;
    }
    Ok(product)
}

#[cfg(test)]
mod tests;
