//! A recurrent cell plus the softmax readout that turns hidden states into
//! next-character distributions.

use serde::{Deserialize, Serialize};

use crate::cells::{Cell, CellSpec};
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::{fill_matrix, Matrix, Rng, SamplingScheme, Vector};

/// Affine map `logits = V h + c`, shared across time steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub weight: Matrix,
    pub bias: Vector,
}

impl Readout {
    pub fn zeros(vocab: usize, hidden: usize) -> Self {
        Readout {
            weight: Matrix::zeros(vocab, hidden),
            bias: Vector::zeros(vocab),
        }
    }

    pub fn vocab(&self) -> usize {
        self.weight.rows()
    }

    pub(crate) fn logits(&self, h: &[f64]) -> Vector {
        let mut out = vec![0.0; self.vocab()];
        self.weight.matvec_into(h, &mut out);
        for (o, b) in out.iter_mut().zip(self.bias.iter()) {
            *o += b;
        }
        out.into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub cell: Cell,
    pub readout: Readout,
}

impl Model {
    /// Samples a model whose inputs are one-hot over `spec.input` symbols and
    /// whose readout predicts the same vocabulary.
    pub fn sample(spec: &CellSpec, readout_scheme: SamplingScheme, rng: &mut Rng) -> Result<Model> {
        let cell = Cell::sample(spec, rng)?;
        let weight = fill_matrix(rng, readout_scheme, spec.input, spec.hidden)?;
        Ok(Model {
            cell,
            readout: Readout {
                weight,
                bias: Vector::zeros(spec.input),
            },
        })
    }

    pub fn vocab(&self) -> usize {
        self.readout.vocab()
    }

    pub fn hidden(&self) -> usize {
        self.cell.hidden()
    }

    pub fn check(&self) -> Result<()> {
        if self.readout.weight.cols() != self.cell.hidden() {
            return Err(Error::rejected(format!(
                "readout expects hidden size {}, cell has {}",
                self.readout.weight.cols(),
                self.cell.hidden()
            )));
        }
        if self.readout.bias.len() != self.readout.vocab() {
            return Err(Error::rejected("readout bias length differs from vocabulary"));
        }
        Ok(())
    }
}

impl Parameters for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.cell.visit(&mut |name, t| f(&format!("cell.{name}"), t));
        f("readout.V", self.readout.weight.as_slice());
        f("readout.c", &self.readout.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.cell.visit_mut(&mut |name, t| f(&format!("cell.{name}"), t));
        f("readout.V", self.readout.weight.as_mut_slice());
        f("readout.c", &mut self.readout.bias);
    }
}
