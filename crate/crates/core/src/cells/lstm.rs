//! LSTM without peepholes, every gate and the block input computed by an
//! integration block over `(x_t, h_{t−1})`:
//!
//! ```text
//! z = tanh(B_z)   i = σ(B_i)   f = σ(B_f)   o = σ(B_o)
//! c_t = i ⊙ z + f ⊙ c_{t−1}
//! h_t = o ⊙ tanh(c_t)
//! ```

use serde::{Deserialize, Serialize};

use super::block::{backward_acc, forward_unchecked, BlockCache, MiParams};
use super::rnn::dense_dx;
use super::{Activation, CellState, Input, StepGrad};
use crate::tensor::Vector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub z: MiParams,
    pub i: MiParams,
    pub f: MiParams,
    pub o: MiParams,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    pub z: BlockCache,
    pub i: BlockCache,
    pub f: BlockCache,
    pub o: BlockCache,
    pub c_prev: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

impl LstmCell {
    pub(crate) fn forward(&self, x: Input<'_>, h_prev: &[f64], c_prev: &[f64]) -> (CellState, LstmCache) {
        let z = forward_unchecked(&self.z, Activation::Tanh, x, h_prev);
        let i = forward_unchecked(&self.i, Activation::Sigmoid, x, h_prev);
        let f = forward_unchecked(&self.f, Activation::Sigmoid, x, h_prev);
        let o = forward_unchecked(&self.o, Activation::Sigmoid, x, h_prev);
        let d = c_prev.len();
        let c: Vec<f64> = (0..d)
            .map(|k| i.out[k] * z.out[k] + f.out[k] * c_prev[k])
            .collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = (0..d).map(|k| o.out[k] * tanh_c[k]).collect();
        let state = CellState {
            h: h.into(),
            c: Some(c.into()),
        };
        let cache = LstmCache {
            z,
            i,
            f,
            o,
            c_prev: c_prev.to_vec(),
            tanh_c,
        };
        (state, cache)
    }

    pub(crate) fn backward(&self, k: &LstmCache, d_h: &[f64], d_c: &[f64], g: &mut LstmCell) -> StepGrad {
        let d = d_h.len();
        let mut d_o = vec![0.0; d];
        let mut d_z = vec![0.0; d];
        let mut d_i = vec![0.0; d];
        let mut d_f = vec![0.0; d];
        let mut d_c_prev = vec![0.0; d];
        for j in 0..d {
            let tc = k.tanh_c[j];
            d_o[j] = d_h[j] * tc;
            let dc = d_c[j] + d_h[j] * k.o.out[j] * (1.0 - tc * tc);
            d_i[j] = dc * k.z.out[j];
            d_z[j] = dc * k.i.out[j];
            d_f[j] = dc * k.c_prev[j];
            d_c_prev[j] = dc * k.f.out[j];
        }
        let mut d_h_prev = vec![0.0; d];
        let mut d_x = dense_dx(&k.z, self.z.input_dim());
        backward_acc(&self.z, &k.z, &d_z, &mut g.z, &mut d_h_prev, d_x.as_mut());
        backward_acc(&self.i, &k.i, &d_i, &mut g.i, &mut d_h_prev, d_x.as_mut());
        backward_acc(&self.f, &k.f, &d_f, &mut g.f, &mut d_h_prev, d_x.as_mut());
        backward_acc(&self.o, &k.o, &d_o, &mut g.o, &mut d_h_prev, d_x.as_mut());
        StepGrad {
            d_h_prev: d_h_prev.into(),
            d_c_prev: Some(Vector::from_vec(d_c_prev)),
            d_x: d_x.unwrap_or_default().into(),
        }
    }
}
