//! Recurrent cells built from integration blocks.
//!
//! Each cell family (plain RNN, LSTM, GRU) computes every gate and state
//! through [`MiParams`] blocks, so switching a whole cell between additive and
//! multiplicative integration is a matter of the blocks' [`IntegrationMode`].

mod block;
mod gru;
mod lstm;
mod rnn;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use block::{block_backward, block_forward, BlockCache, BlockGrad, InputRecord, MiGates, MiParams};
pub use gru::{GruCache, GruCell};
pub use lstm::{LstmCache, LstmCell};
pub use rnn::RnnCell;

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::{Rng, SamplingScheme, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationMode {
    Additive,
    MiSimple,
    MiGeneral,
}

impl IntegrationMode {
    pub const ALL: [IntegrationMode; 3] = [
        IntegrationMode::Additive,
        IntegrationMode::MiSimple,
        IntegrationMode::MiGeneral,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            IntegrationMode::Additive => "additive",
            IntegrationMode::MiSimple => "mi_simple",
            IntegrationMode::MiGeneral => "mi_general",
        }
    }
}

impl fmt::Display for IntegrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(&self, a: f64) -> f64 {
        match self {
            Activation::Identity => a,
            Activation::Tanh => a.tanh(),
            Activation::Sigmoid => sigmoid(a),
        }
    }

    /// `φ'(a)` expressed through `y = φ(a)`.
    pub fn derivative_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn derivative(&self, a: f64) -> f64 {
        self.derivative_from_output(self.apply(a))
    }
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellFamily {
    Rnn,
    Lstm,
    Gru,
}

impl CellFamily {
    pub const ALL: [CellFamily; 3] = [CellFamily::Rnn, CellFamily::Lstm, CellFamily::Gru];

    pub fn as_str(&self) -> &'static str {
        match self {
            CellFamily::Rnn => "rnn",
            CellFamily::Lstm => "lstm",
            CellFamily::Gru => "gru",
        }
    }
}

impl fmt::Display for CellFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Initial values for the bias vectors `{α, β₁, β₂, b}`, broadcast to the
/// block width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiBiasInit {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub b: f64,
}

impl Default for MiBiasInit {
    fn default() -> Self {
        MiBiasInit::TEXT8_LSTM
    }
}

impl MiBiasInit {
    /// `{2, 0.5, 0.5, 0}`, used for the plain MI-RNN.
    pub const PTB_RNN: MiBiasInit = MiBiasInit {
        alpha: 2.0,
        beta1: 0.5,
        beta2: 0.5,
        b: 0.0,
    };
    /// `{1, 0.5, 0.5, 0}`, the library default.
    pub const TEXT8_LSTM: MiBiasInit = MiBiasInit {
        alpha: 1.0,
        beta1: 0.5,
        beta2: 0.5,
        b: 0.0,
    };
    /// `{1, 1, 1, 0}`.
    pub const ONES: MiBiasInit = MiBiasInit {
        alpha: 1.0,
        beta1: 1.0,
        beta2: 1.0,
        b: 0.0,
    };
    /// α = 0, β₁ = β₂ = 1: the general form collapses to the additive block.
    pub const DEGENERATE: MiBiasInit = MiBiasInit {
        alpha: 0.0,
        beta1: 1.0,
        beta2: 1.0,
        b: 0.0,
    };

    pub const PRESET_NAMES: [&'static str; 3] = ["ptb-rnn", "text8-lstm", "ones"];

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "ptb-rnn" => Ok(MiBiasInit::PTB_RNN),
            "text8-lstm" => Ok(MiBiasInit::TEXT8_LSTM),
            "ones" => Ok(MiBiasInit::ONES),
            other => Err(Error::config(format!(
                "unknown MI bias preset {other:?} (expected one of {:?})",
                MiBiasInit::PRESET_NAMES
            ))),
        }
    }
}

/// A block input: either a dense vector or a one-hot index, for which `Wx`
/// is just a column of `W`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Input<'a> {
    Dense(&'a [f64]),
    OneHot(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub h: Vector,
    /// Cell memory; only LSTMs have one.
    pub c: Option<Vector>,
}

impl CellState {
    pub fn zeros(family: CellFamily, d: usize) -> Self {
        CellState {
            h: Vector::zeros(d),
            c: (family == CellFamily::Lstm).then(|| Vector::zeros(d)),
        }
    }
}

/// Shape and initialization of a cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSpec {
    pub family: CellFamily,
    pub mode: IntegrationMode,
    /// Only used by the plain RNN; gated cells fix their own activations.
    pub activation: Activation,
    pub hidden: usize,
    pub input: usize,
    pub bias_init: MiBiasInit,
    pub w_scheme: SamplingScheme,
    pub u_scheme: SamplingScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Cell {
    Rnn(RnnCell),
    Lstm(LstmCell),
    Gru(GruCell),
}

#[derive(Debug, Clone)]
pub enum StepCache {
    Rnn(BlockCache),
    Lstm(LstmCache),
    Gru(GruCache),
}

/// Gradients flowing out of one step toward earlier steps and the input.
#[derive(Debug, Clone)]
pub struct StepGrad {
    pub d_h_prev: Vector,
    pub d_c_prev: Option<Vector>,
    /// Empty for one-hot inputs.
    pub d_x: Vector,
}

impl Cell {
    pub fn sample(spec: &CellSpec, rng: &mut Rng) -> Result<Cell> {
        if spec.hidden == 0 || spec.input == 0 {
            return Err(Error::config("cell dimensions must be at least 1"));
        }
        let mut block = || {
            MiParams::sample(
                spec.mode,
                spec.hidden,
                spec.input,
                spec.hidden,
                spec.bias_init,
                spec.w_scheme,
                spec.u_scheme,
                rng,
            )
        };
        Ok(match spec.family {
            CellFamily::Rnn => Cell::Rnn(RnnCell {
                block: block()?,
                activation: spec.activation,
            }),
            CellFamily::Lstm => Cell::Lstm(LstmCell {
                z: block()?,
                i: block()?,
                f: block()?,
                o: block()?,
            }),
            CellFamily::Gru => Cell::Gru(GruCell {
                z: block()?,
                r: block()?,
                h: block()?,
            }),
        })
    }

    pub fn family(&self) -> CellFamily {
        match self {
            Cell::Rnn(_) => CellFamily::Rnn,
            Cell::Lstm(_) => CellFamily::Lstm,
            Cell::Gru(_) => CellFamily::Gru,
        }
    }

    pub fn blocks(&self) -> Vec<&MiParams> {
        match self {
            Cell::Rnn(c) => vec![&c.block],
            Cell::Lstm(c) => vec![&c.z, &c.i, &c.f, &c.o],
            Cell::Gru(c) => vec![&c.z, &c.r, &c.h],
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut MiParams> {
        match self {
            Cell::Rnn(c) => vec![&mut c.block],
            Cell::Lstm(c) => vec![&mut c.z, &mut c.i, &mut c.f, &mut c.o],
            Cell::Gru(c) => vec![&mut c.z, &mut c.r, &mut c.h],
        }
    }

    pub fn mode(&self) -> IntegrationMode {
        self.blocks()[0].mode
    }

    pub fn hidden(&self) -> usize {
        self.blocks()[0].hidden()
    }

    pub fn input_dim(&self) -> usize {
        self.blocks()[0].input_dim()
    }

    /// Same weights, every block switched to `mode`.
    pub fn with_mode(&self, mode: IntegrationMode, init: MiBiasInit) -> Cell {
        let mut c = self.clone();
        for b in c.blocks_mut() {
            *b = b.with_mode(mode, init);
        }
        c
    }

    pub fn initial_state(&self) -> CellState {
        CellState::zeros(self.family(), self.hidden())
    }

    fn check_state(&self, s: &CellState) -> Result<()> {
        let d = self.hidden();
        if s.h.len() != d {
            return Err(Error::rejected(format!(
                "hidden state has length {}, cell width is {d}",
                s.h.len()
            )));
        }
        match (self.family(), &s.c) {
            (CellFamily::Lstm, None) => Err(Error::rejected("LSTM step needs a cell state")),
            (CellFamily::Lstm, Some(c)) if c.len() != d => {
                Err(Error::rejected("LSTM cell state has the wrong length"))
            }
            _ => Ok(()),
        }
    }

    fn check_input(&self, x: Input<'_>) -> Result<()> {
        let n = self.input_dim();
        match x {
            Input::Dense(v) if v.len() != n => Err(Error::rejected(format!(
                "input has length {}, expected {n}",
                v.len()
            ))),
            Input::OneHot(i) if i >= n => Err(Error::rejected(format!(
                "one-hot index {i} out of range for input dimension {n}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn step(&self, x: Input<'_>, s: &CellState) -> Result<(CellState, StepCache)> {
        self.check_input(x)?;
        self.check_state(s)?;
        Ok(self.step_unchecked(x, s))
    }

    pub(crate) fn step_unchecked(&self, x: Input<'_>, s: &CellState) -> (CellState, StepCache) {
        match self {
            Cell::Rnn(c) => {
                let (h, cache) = c.forward(x, &s.h);
                (CellState { h, c: None }, StepCache::Rnn(cache))
            }
            Cell::Lstm(c) => {
                let c_prev = s.c.as_ref().expect("checked LSTM state");
                let (state, cache) = c.forward(x, &s.h, c_prev);
                (state, StepCache::Lstm(cache))
            }
            Cell::Gru(c) => {
                let (h, cache) = c.forward(x, &s.h);
                (CellState { h, c: None }, StepCache::Gru(cache))
            }
        }
    }

    /// Backpropagates `d_h` (and `d_c` for LSTMs) through one step,
    /// accumulating parameter gradients into `grads`.
    pub fn step_backward(
        &self,
        cache: &StepCache,
        d_h: &[f64],
        d_c: Option<&[f64]>,
        grads: &mut Cell,
    ) -> Result<StepGrad> {
        let d = self.hidden();
        if d_h.len() != d || d_c.is_some_and(|c| c.len() != d) {
            return Err(Error::rejected("upstream gradient length differs from cell width"));
        }
        match (self, cache, grads) {
            (Cell::Rnn(c), StepCache::Rnn(k), Cell::Rnn(g)) => Ok(c.backward(k, d_h, g)),
            (Cell::Lstm(c), StepCache::Lstm(k), Cell::Lstm(g)) => {
                let zeros;
                let d_c = match d_c {
                    Some(v) => v,
                    None => {
                        zeros = vec![0.0; d];
                        &zeros
                    }
                };
                Ok(c.backward(k, d_h, d_c, g))
            }
            (Cell::Gru(c), StepCache::Gru(k), Cell::Gru(g)) => Ok(c.backward(k, d_h, g)),
            _ => Err(Error::rejected("cache or gradient bundle belongs to a different cell family")),
        }
    }
}

impl Parameters for Cell {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        let names = block_names(self.family());
        for (name, block) in names.iter().zip(self.blocks()) {
            block.visit(&mut |t, data| f(&format!("{name}.{t}"), data));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        let names = block_names(self.family());
        for (name, block) in names.iter().zip(self.blocks_mut()) {
            block.visit_mut(&mut |t, data| f(&format!("{name}.{t}"), data));
        }
    }
}

fn block_names(family: CellFamily) -> &'static [&'static str] {
    match family {
        CellFamily::Rnn => &["h"],
        CellFamily::Lstm => &["z", "i", "f", "o"],
        CellFamily::Gru => &["z", "r", "h"],
    }
}

macro_rules! impl_from_str {
    ($ty:ty, $what:literal) => {
        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                serde_json::from_value(serde_json::Value::String(s.to_string()))
                    .map_err(|_| Error::config(format!(concat!("unknown ", $what, " {:?}"), s)))
            }
        }
    };
}

impl_from_str!(IntegrationMode, "integration mode");
impl_from_str!(Activation, "activation");
impl_from_str!(CellFamily, "cell family");
