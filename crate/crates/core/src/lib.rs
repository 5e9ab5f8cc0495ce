//! Recurrent networks with multiplicative integration.
//!
//! The crate provides additive and multiplicative integration blocks, the
//! RNN/LSTM/GRU cells built from them, exact backpropagation through time,
//! an Adam trainer for character-level language models, gradient-flow
//! diagnostics, and a set of brute-force oracles that the analytic code is
//! verified against.

pub mod bptt;
pub mod cells;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod model;
pub mod optim;
pub mod oracles;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use cells::{Activation, Cell, CellFamily, CellState, Input, IntegrationMode, MiBiasInit, MiParams};
pub use error::{Error, Result};
pub use model::{Model, Readout};
pub use params::Parameters;
pub use tensor::{Matrix, Rng, RngConfig, Vector};
