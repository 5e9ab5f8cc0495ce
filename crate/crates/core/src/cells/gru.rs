//! GRU with integration blocks:
//!
//! ```text
//! z = σ(B_z(x, h))   r = σ(B_r(x, h))   h̃ = tanh(B_h(x, r ⊙ h))
//! h_t = (1 − z) ⊙ h_{t−1} + z ⊙ h̃
//! ```

use serde::{Deserialize, Serialize};

use super::block::{backward_acc, forward_unchecked, BlockCache, MiParams};
use super::rnn::dense_dx;
use super::{Activation, Input, StepGrad};
use crate::tensor::Vector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub z: MiParams,
    pub r: MiParams,
    pub h: MiParams,
}

#[derive(Debug, Clone)]
pub struct GruCache {
    pub z: BlockCache,
    pub r: BlockCache,
    /// Candidate block; its recurrent input is `r ⊙ h_{t−1}`.
    pub h: BlockCache,
    pub h_prev: Vec<f64>,
}

impl GruCell {
    pub(crate) fn forward(&self, x: Input<'_>, h_prev: &[f64]) -> (Vector, GruCache) {
        let z = forward_unchecked(&self.z, Activation::Sigmoid, x, h_prev);
        let r = forward_unchecked(&self.r, Activation::Sigmoid, x, h_prev);
        let reset: Vec<f64> = r.out.iter().zip(h_prev).map(|(a, b)| a * b).collect();
        let cand = forward_unchecked(&self.h, Activation::Tanh, x, &reset);
        let h: Vec<f64> = (0..h_prev.len())
            .map(|k| (1.0 - z.out[k]) * h_prev[k] + z.out[k] * cand.out[k])
            .collect();
        let cache = GruCache {
            z,
            r,
            h: cand,
            h_prev: h_prev.to_vec(),
        };
        (h.into(), cache)
    }

    pub(crate) fn backward(&self, k: &GruCache, d_h: &[f64], g: &mut GruCell) -> StepGrad {
        let d = d_h.len();
        let mut d_h_prev: Vec<f64> = (0..d).map(|j| d_h[j] * (1.0 - k.z.out[j])).collect();
        let d_z: Vec<f64> = (0..d).map(|j| d_h[j] * (k.h.out[j] - k.h_prev[j])).collect();
        let d_cand: Vec<f64> = (0..d).map(|j| d_h[j] * k.z.out[j]).collect();

        let mut d_x = dense_dx(&k.z, self.z.input_dim());
        let mut d_reset = vec![0.0; d];
        backward_acc(&self.h, &k.h, &d_cand, &mut g.h, &mut d_reset, d_x.as_mut());
        let d_r: Vec<f64> = (0..d).map(|j| d_reset[j] * k.h_prev[j]).collect();
        for j in 0..d {
            d_h_prev[j] += d_reset[j] * k.r.out[j];
        }
        backward_acc(&self.z, &k.z, &d_z, &mut g.z, &mut d_h_prev, d_x.as_mut());
        backward_acc(&self.r, &k.r, &d_r, &mut g.r, &mut d_h_prev, d_x.as_mut());
        StepGrad {
            d_h_prev: d_h_prev.into(),
            d_c_prev: None,
            d_x: d_x.unwrap_or_default().into(),
        }
    }
}
