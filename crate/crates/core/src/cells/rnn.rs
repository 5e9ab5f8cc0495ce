use serde::{Deserialize, Serialize};

use super::block::{backward_acc, forward_unchecked, BlockCache, MiParams};
use super::{Activation, Input, StepGrad};
use crate::tensor::Vector;

/// `h_t = φ(block(x_t, h_{t−1}))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnCell {
    pub block: MiParams,
    pub activation: Activation,
}

impl RnnCell {
    pub(crate) fn forward(&self, x: Input<'_>, h_prev: &[f64]) -> (Vector, BlockCache) {
        let cache = forward_unchecked(&self.block, self.activation, x, h_prev);
        (Vector::from_vec(cache.out.clone()), cache)
    }

    pub(crate) fn backward(&self, cache: &BlockCache, d_h: &[f64], grads: &mut RnnCell) -> StepGrad {
        let mut d_h_prev = vec![0.0; self.block.recurrent_dim()];
        let mut d_x = dense_dx(cache, self.block.input_dim());
        backward_acc(&self.block, cache, d_h, &mut grads.block, &mut d_h_prev, d_x.as_mut());
        StepGrad {
            d_h_prev: d_h_prev.into(),
            d_c_prev: None,
            d_x: d_x.unwrap_or_default().into(),
        }
    }
}

pub(super) fn dense_dx(cache: &BlockCache, n: usize) -> Option<Vec<f64>> {
    match cache.x {
        super::InputRecord::Dense(_) => Some(vec![0.0; n]),
        super::InputRecord::OneHot(_) => None,
    }
}
