//! The integration block shared by every cell: additive `φ(Wx + Uz + b)`,
//! simple multiplicative `φ(Wx ⊙ Uz + b)`, and the general gated form
//! `φ(α⊙Wx⊙Uz + β₁⊙Uz + β₂⊙Wx + b)`.

use serde::{Deserialize, Serialize};

use super::{Activation, Input, IntegrationMode, MiBiasInit};
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::{fill_matrix, Matrix, Rng, SamplingScheme, Vector};

/// Gating vectors of the general multiplicative form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiGates {
    pub alpha: Vector,
    pub beta1: Vector,
    pub beta2: Vector,
}

/// Parameters of one integration block: `W` is `d × n`, `U` is `d × m`.
///
/// `gates` is `Some` exactly when `mode` is [`IntegrationMode::MiGeneral`];
/// the other two modes carry no α/β at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiParams {
    pub w: Matrix,
    pub u: Matrix,
    pub b: Vector,
    pub gates: Option<MiGates>,
    pub mode: IntegrationMode,
}

impl MiParams {
    /// All-zero weights with biases from `init`.
    pub fn zeros(mode: IntegrationMode, d: usize, n: usize, m: usize, init: MiBiasInit) -> Self {
        let gates = (mode == IntegrationMode::MiGeneral).then(|| MiGates {
            alpha: Vector::filled(d, init.alpha),
            beta1: Vector::filled(d, init.beta1),
            beta2: Vector::filled(d, init.beta2),
        });
        MiParams {
            w: Matrix::zeros(d, n),
            u: Matrix::zeros(d, m),
            b: Vector::filled(d, init.b),
            gates,
            mode,
        }
    }

    /// Uniformly sampled `W`, `U`; biases from `init`.
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        mode: IntegrationMode,
        d: usize,
        n: usize,
        m: usize,
        init: MiBiasInit,
        w_scheme: SamplingScheme,
        u_scheme: SamplingScheme,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut p = MiParams::zeros(mode, d, n, m, init);
        p.w = fill_matrix(rng, w_scheme, d, n)?;
        p.u = fill_matrix(rng, u_scheme, d, m)?;
        Ok(p)
    }

    pub fn hidden(&self) -> usize {
        self.b.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn recurrent_dim(&self) -> usize {
        self.u.cols()
    }

    /// Converts to another mode, keeping `W`, `U`, `b`. Entering the general
    /// mode installs the given gate values.
    pub fn with_mode(&self, mode: IntegrationMode, init: MiBiasInit) -> Self {
        let mut p = self.clone();
        p.mode = mode;
        p.gates = match (mode, &self.gates) {
            (IntegrationMode::MiGeneral, Some(g)) => Some(g.clone()),
            (IntegrationMode::MiGeneral, None) => {
                let d = self.hidden();
                Some(MiGates {
                    alpha: Vector::filled(d, init.alpha),
                    beta1: Vector::filled(d, init.beta1),
                    beta2: Vector::filled(d, init.beta2),
                })
            }
            _ => None,
        };
        p
    }

    /// The per-unit factor multiplying `U` in `∂pre/∂z`: 1 for additive,
    /// `Wx` for simple MI, `α⊙Wx + β₁` for general MI.
    pub fn recurrent_gate(&self, wx: &[f64]) -> Vec<f64> {
        match (&self.mode, &self.gates) {
            (IntegrationMode::Additive, _) => vec![1.0; wx.len()],
            (IntegrationMode::MiSimple, _) => wx.to_vec(),
            (IntegrationMode::MiGeneral, Some(g)) => wx
                .iter()
                .zip(g.alpha.iter().zip(g.beta1.iter()))
                .map(|(w, (a, b1))| a * w + b1)
                .collect(),
            (IntegrationMode::MiGeneral, None) => unreachable!("general mode without gates"),
        }
    }

    fn check_consistent(&self) -> Result<()> {
        let d = self.hidden();
        if self.w.rows() != d || self.u.rows() != d {
            return Err(Error::rejected("block W/U row count differs from bias length"));
        }
        match (&self.mode, &self.gates) {
            (IntegrationMode::MiGeneral, Some(g)) => {
                if g.alpha.len() != d || g.beta1.len() != d || g.beta2.len() != d {
                    return Err(Error::rejected("gate vector length differs from block width"));
                }
            }
            (IntegrationMode::MiGeneral, None) => {
                return Err(Error::rejected("general MI block is missing its gates"))
            }
            (_, Some(_)) => return Err(Error::rejected("gates present on a non-general block")),
            _ => {}
        }
        Ok(())
    }
}

impl Parameters for MiParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("W", self.w.as_slice());
        f("U", self.u.as_slice());
        f("b", &self.b);
        if let Some(g) = &self.gates {
            f("alpha", &g.alpha);
            f("beta1", &g.beta1);
            f("beta2", &g.beta2);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("W", self.w.as_mut_slice());
        f("U", self.u.as_mut_slice());
        f("b", &mut self.b);
        if let Some(g) = &mut self.gates {
            f("alpha", &mut g.alpha);
            f("beta1", &mut g.beta1);
            f("beta2", &mut g.beta2);
        }
    }
}

/// Owned copy of a block input, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum InputRecord {
    Dense(Vec<f64>),
    OneHot(usize),
}

impl InputRecord {
    fn len_matches(&self, n: usize) -> bool {
        match self {
            InputRecord::Dense(x) => x.len() == n,
            InputRecord::OneHot(i) => *i < n,
        }
    }
}

/// Everything the backward pass needs from one block evaluation.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub x: InputRecord,
    pub z: Vec<f64>,
    pub wx: Vec<f64>,
    pub uz: Vec<f64>,
    pub pre: Vec<f64>,
    pub out: Vec<f64>,
    pub activation: Activation,
}

/// Gradients of one block: parameters plus both inputs.
#[derive(Debug, Clone)]
pub struct BlockGrad {
    pub d_params: MiParams,
    /// Zero-length for one-hot inputs, which are not differentiable.
    pub d_x: Vector,
    pub d_z: Vector,
}

/// Evaluates the block and records what backward needs.
pub fn block_forward(
    p: &MiParams,
    phi: Activation,
    x: Input<'_>,
    z: &[f64],
) -> Result<(Vector, BlockCache)> {
    p.check_consistent()?;
    let n = p.input_dim();
    match x {
        Input::Dense(v) if v.len() != n => {
            return Err(Error::rejected(format!(
                "block input has length {}, expected {n}",
                v.len()
            )))
        }
        Input::OneHot(i) if i >= n => {
            return Err(Error::rejected(format!(
                "one-hot index {i} out of range for input dimension {n}"
            )))
        }
        _ => {}
    }
    if z.len() != p.recurrent_dim() {
        return Err(Error::rejected(format!(
            "block recurrent input has length {}, expected {}",
            z.len(),
            p.recurrent_dim()
        )));
    }
    let cache = forward_unchecked(p, phi, x, z);
    Ok((Vector::from_vec(cache.out.clone()), cache))
}

pub(crate) fn forward_unchecked(p: &MiParams, phi: Activation, x: Input<'_>, z: &[f64]) -> BlockCache {
    let d = p.hidden();
    let mut wx = vec![0.0; d];
    let x_rec = match x {
        Input::Dense(v) => {
            p.w.matvec_into(v, &mut wx);
            InputRecord::Dense(v.to_vec())
        }
        Input::OneHot(i) => {
            p.w.column_into(i, &mut wx);
            InputRecord::OneHot(i)
        }
    };
    let mut uz = vec![0.0; d];
    p.u.matvec_into(z, &mut uz);

    let pre: Vec<f64> = match (&p.mode, &p.gates) {
        (IntegrationMode::Additive, _) => (0..d).map(|k| wx[k] + uz[k] + p.b[k]).collect(),
        (IntegrationMode::MiSimple, _) => (0..d).map(|k| wx[k] * uz[k] + p.b[k]).collect(),
        (IntegrationMode::MiGeneral, Some(g)) => (0..d)
            .map(|k| {
                g.alpha[k] * wx[k] * uz[k] + g.beta1[k] * uz[k] + g.beta2[k] * wx[k] + p.b[k]
            })
            .collect(),
        (IntegrationMode::MiGeneral, None) => unreachable!("checked by check_consistent"),
    };
    let out = pre.iter().map(|&a| phi.apply(a)).collect();
    BlockCache {
        x: x_rec,
        z: z.to_vec(),
        wx,
        uz,
        pre,
        out,
        activation: phi,
    }
}

/// Exact gradients of `⟨d_out, out⟩` with respect to parameters and inputs.
pub fn block_backward(p: &MiParams, cache: &BlockCache, d_out: &[f64]) -> Result<BlockGrad> {
    p.check_consistent()?;
    let d = p.hidden();
    if d_out.len() != d {
        return Err(Error::rejected(format!(
            "upstream gradient has length {}, block width is {d}",
            d_out.len()
        )));
    }
    if cache.out.len() != d
        || cache.z.len() != p.recurrent_dim()
        || !cache.x.len_matches(p.input_dim())
    {
        return Err(Error::rejected("block cache does not match these parameters"));
    }
    let mut d_params = p.clone();
    d_params.fill(0.0);
    let mut d_z = vec![0.0; p.recurrent_dim()];
    let mut d_x = match cache.x {
        InputRecord::Dense(_) => vec![0.0; p.input_dim()],
        InputRecord::OneHot(_) => Vec::new(),
    };
    backward_acc(p, cache, d_out, &mut d_params, &mut d_z, Some(&mut d_x));
    Ok(BlockGrad {
        d_params,
        d_x: d_x.into(),
        d_z: d_z.into(),
    })
}

/// Accumulates parameter gradients into `grad`, and input gradients into
/// `d_z` and (for dense inputs) `d_x`.
pub(crate) fn backward_acc(
    p: &MiParams,
    cache: &BlockCache,
    d_out: &[f64],
    grad: &mut MiParams,
    d_z: &mut [f64],
    d_x: Option<&mut Vec<f64>>,
) {
    let d = p.hidden();
    // gradient at the pre-activation
    let g: Vec<f64> = (0..d)
        .map(|k| d_out[k] * cache.activation.derivative_from_output(cache.out[k]))
        .collect();

    let (d_wx, d_uz): (Vec<f64>, Vec<f64>) = match (&p.mode, &p.gates) {
        (IntegrationMode::Additive, _) => (g.clone(), g.clone()),
        (IntegrationMode::MiSimple, _) => (
            (0..d).map(|k| g[k] * cache.uz[k]).collect(),
            (0..d).map(|k| g[k] * cache.wx[k]).collect(),
        ),
        (IntegrationMode::MiGeneral, Some(gates)) => {
            let dg = grad.gates.as_mut().expect("gradient bundle mirrors gates");
            for k in 0..d {
                dg.alpha[k] += g[k] * cache.wx[k] * cache.uz[k];
                dg.beta1[k] += g[k] * cache.uz[k];
                dg.beta2[k] += g[k] * cache.wx[k];
            }
            (
                (0..d)
                    .map(|k| g[k] * (gates.alpha[k] * cache.uz[k] + gates.beta2[k]))
                    .collect(),
                (0..d)
                    .map(|k| g[k] * (gates.alpha[k] * cache.wx[k] + gates.beta1[k]))
                    .collect(),
            )
        }
        (IntegrationMode::MiGeneral, None) => unreachable!("general mode without gates"),
    };

    for (db, gk) in grad.b.iter_mut().zip(&g) {
        *db += gk;
    }
    match &cache.x {
        InputRecord::Dense(x) => {
            grad.w.add_outer(&d_wx, x);
            if let Some(dx) = d_x {
                p.w.matvec_transposed_acc(&d_wx, dx);
            }
        }
        InputRecord::OneHot(i) => grad.w.add_to_column(*i, &d_wx),
    }
    grad.u.add_outer(&d_uz, &cache.z);
    p.u.matvec_transposed_acc(&d_uz, d_z);
}
