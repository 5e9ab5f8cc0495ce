//! Brute-force references that the analytic code is checked against.
//!
//! Nothing in here calls into the backward passes or shares code paths with
//! the algorithms it verifies: finite differences only evaluate a scalar
//! function, path enumeration never reuses partial sums, and the bilinear
//! form is evaluated slice by slice.

use crate::cells::{Activation, Input, IntegrationMode, MiBiasInit, MiParams, RnnCell};
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::{Matrix, Rng, Vector};

/// Longest observation sequence accepted by the (unscaled) forward algorithm.
pub const MAX_HMM_LEN: usize = 50;
/// Largest number of hidden paths the brute-force enumerator will visit.
pub const MAX_BRUTEFORCE_PATHS: u128 = 10_000_000;
pub const STOCHASTIC_TOL: f64 = 1e-12;
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// A discrete HMM in column-stochastic form.
///
/// `transition[i][j] = Pr[h_{t+1} = i | h_t = j]` (`m × m`),
/// `emission[i][j] = Pr[x_t = i | h_t = j]` (`symbols × m`),
/// `initial[j] = Pr[h_0 = j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmSpec {
    pub transition: Matrix,
    pub emission: Matrix,
    pub initial: Vector,
}

impl HmmSpec {
    pub fn states(&self) -> usize {
        self.initial.len()
    }

    pub fn symbols(&self) -> usize {
        self.emission.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.states();
        if m == 0 {
            return Err(Error::rejected("HMM needs at least one state"));
        }
        if self.transition.shape() != (m, m) || self.emission.cols() != m {
            return Err(Error::rejected("HMM matrix shapes disagree with the state count"));
        }
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !self.transition.as_slice().iter().all(in_unit)
            || !self.emission.as_slice().iter().all(in_unit)
            || !self.initial.iter().all(in_unit)
        {
            return Err(Error::rejected("HMM probabilities must lie in [0, 1]"));
        }
        for j in 0..m {
            let t: f64 = (0..m).map(|i| self.transition.get(i, j)).sum();
            if (t - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::rejected(format!(
                    "transition column {j} sums to {t}, not 1"
                )));
            }
            let e: f64 = (0..self.symbols()).map(|i| self.emission.get(i, j)).sum();
            if (e - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::rejected(format!("emission column {j} sums to {e}, not 1")));
            }
        }
        let s: f64 = self.initial.iter().sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::rejected(format!("initial distribution sums to {s}, not 1")));
        }
        Ok(())
    }

    fn check_obs(&self, obs: &[usize]) -> Result<()> {
        if let Some(&bad) = obs.iter().find(|&&o| o >= self.symbols()) {
            return Err(Error::rejected(format!(
                "observation {bad} outside an alphabet of {}",
                self.symbols()
            )));
        }
        if obs.len() > MAX_HMM_LEN {
            return Err(Error::rejected(format!(
                "sequence of length {} exceeds the unscaled forward limit {MAX_HMM_LEN}",
                obs.len()
            )));
        }
        Ok(())
    }

    /// A random spec with strictly positive, normalized columns.
    pub fn random(states: usize, symbols: usize, rng: &mut Rng) -> HmmSpec {
        let mut column_stochastic = |rows: usize, cols: usize| {
            let mut m = Matrix::zeros(rows, cols);
            for j in 0..cols {
                let col: Vec<f64> = (0..rows).map(|_| 0.05 + rng.next_f64()).collect();
                let total: f64 = col.iter().sum();
                for (i, v) in col.iter().enumerate() {
                    m.set(i, j, v / total);
                }
            }
            m
        };
        let transition = column_stochastic(states, states);
        let emission = column_stochastic(symbols, states);
        let initial = column_stochastic(states, 1).as_slice().to_vec().into();
        HmmSpec {
            transition,
            emission,
            initial,
        }
    }

    /// Emission probabilities of `symbol` for every state.
    fn emission_row(&self, symbol: usize) -> &[f64] {
        self.emission.row(symbol)
    }
}

/// Forward-algorithm alphas `α_1 … α_T`, following
/// `α_{t+1} = Pr[x_{t+1} | ·] ⊙ (U α_t)` with `α_0 = Pr[h_0]`, so a transition
/// precedes the first emission.
pub fn hmm_forward(spec: &HmmSpec, obs: &[usize]) -> Result<Vec<Vector>> {
    spec.validate()?;
    spec.check_obs(obs)?;
    let m = spec.states();
    let mut alpha = spec.initial.as_slice().to_vec();
    let mut out = Vec::with_capacity(obs.len());
    for &x in obs {
        let emit = spec.emission_row(x);
        let next: Vec<f64> = (0..m)
            .map(|i| emit[i] * (0..m).map(|j| spec.transition.get(i, j) * alpha[j]).sum::<f64>())
            .collect();
        alpha = next;
        out.push(Vector::from_vec(alpha.clone()));
    }
    Ok(out)
}

/// Sequence likelihood by explicit enumeration of every hidden path
/// `h_0, h_1, …, h_T`.
pub fn hmm_bruteforce(spec: &HmmSpec, obs: &[usize]) -> Result<f64> {
    spec.validate()?;
    spec.check_obs(obs)?;
    let m = spec.states();
    let paths = (m as u128).checked_pow(obs.len() as u32).unwrap_or(u128::MAX);
    if paths > MAX_BRUTEFORCE_PATHS {
        return Err(Error::rejected(format!(
            "{m}^{} hidden paths exceed the enumeration limit",
            obs.len()
        )));
    }

    fn walk(spec: &HmmSpec, obs: &[usize], prev: usize, prob: f64) -> f64 {
        let Some((&x, rest)) = obs.split_first() else {
            return prob;
        };
        let mut total = 0.0;
        for s in 0..spec.states() {
            let p = prob * spec.transition.get(s, prev) * spec.emission.get(x, s);
            total += walk(spec, rest, s, p);
        }
        total
    }

    Ok((0..m).map(|s0| walk(spec, obs, s0, spec.initial[s0])).sum())
}

/// Builds the linear, bias-free simple-MI RNN whose hidden states are the
/// forward alphas of `spec`, and runs it over `obs`.
pub fn mi_rnn_as_hmm(spec: &HmmSpec, obs: &[usize]) -> Result<Vec<Vector>> {
    spec.validate()?;
    let m = spec.states();
    let mut block = MiParams::zeros(IntegrationMode::MiSimple, m, spec.symbols(), m, MiBiasInit::ONES);
    // The block's W is states × symbols, so column x picks Pr[x | h = ·].
    block.w = spec.emission.transpose();
    block.u = spec.transition.clone();
    block.b = Vector::zeros(m);
    let cell = RnnCell {
        block,
        activation: Activation::Identity,
    };
    run_hmm_cell(&cell, &spec.initial, obs)
}

/// Runs an arbitrary RNN cell as an HMM, first checking every structural
/// condition under which it computes forward alphas.
pub fn run_hmm_cell(cell: &RnnCell, initial: &[f64], obs: &[usize]) -> Result<Vec<Vector>> {
    let p = &cell.block;
    let violated = |what: &str| Err(Error::rejected(format!("HMM mapping requires {what}")));
    if p.mode != IntegrationMode::MiSimple {
        return violated("simple multiplicative integration");
    }
    if cell.activation != Activation::Identity {
        return violated("a linear (identity) activation");
    }
    if p.b.iter().any(|&v| v != 0.0) {
        return violated("all bias terms to be zero");
    }
    let m = p.hidden();
    let spec = HmmSpec {
        transition: p.u.clone(),
        emission: p.w.transpose(),
        initial: initial.to_vec().into(),
    };
    if p.u.shape() != (m, m) || initial.len() != m {
        return violated("a square transition matrix matching the initial distribution");
    }
    if spec.validate().is_err() {
        return violated("W and U to be column-stochastic probability matrices and h0 a distribution");
    }
    if let Some(&bad) = obs.iter().find(|&&o| o >= p.input_dim()) {
        return violated(&format!("one-hot inputs (symbol {bad} has no column)"));
    }

    let mut h = initial.to_vec();
    let mut out = Vec::with_capacity(obs.len());
    for &x in obs {
        let (next, _) = cell.forward(Input::OneHot(x), &h);
        h = next.into_vec();
        out.push(Vector::from_vec(h.clone()));
    }
    Ok(out)
}

/// Third-order tensor of shape `d × n × m`, stored as `d` slices of `n × m`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderTensor {
    pub slices: Vec<Matrix>,
}

impl SecondOrderTensor {
    pub fn zeros(d: usize, n: usize, m: usize) -> Self {
        SecondOrderTensor {
            slices: vec![Matrix::zeros(n, m); d],
        }
    }

    /// Slices `α_i · w_i ⊗ u_i` where `w_i`, `u_i` are the i-th rows of the
    /// block's `W` and `U`.
    pub fn rank_one_from(p: &MiParams, alpha: &[f64]) -> Result<Self> {
        if alpha.len() != p.hidden() {
            return Err(Error::rejected("alpha length differs from block width"));
        }
        let (n, m) = (p.input_dim(), p.recurrent_dim());
        let slices = (0..p.hidden())
            .map(|i| {
                let (w, u) = (p.w.row(i), p.u.row(i));
                let mut s = Matrix::zeros(n, m);
                for a in 0..n {
                    for b in 0..m {
                        s.set(a, b, alpha[i] * w[a] * u[b]);
                    }
                }
                s
            })
            .collect();
        Ok(SecondOrderTensor { slices })
    }
}

/// `s_i = xᵀ T⁽ⁱ⁾ h`.
pub fn bilinear_second_order(t: &SecondOrderTensor, x: &[f64], h: &[f64]) -> Result<Vector> {
    let mut out = Vec::with_capacity(t.slices.len());
    for slice in &t.slices {
        if slice.shape() != (x.len(), h.len()) {
            return Err(Error::rejected(format!(
                "tensor slice is {:?}, inputs are {}x{}",
                slice.shape(),
                x.len(),
                h.len()
            )));
        }
        let th = slice.matvec(h)?;
        out.push(x.iter().zip(th.iter()).map(|(a, b)| a * b).sum());
    }
    Ok(out.into())
}

/// `[diag(α) diag(Wx) U] h` with the matrix formed explicitly.
pub fn diagonal_decomposition(p: &MiParams, alpha: &[f64], x: &[f64], h: &[f64]) -> Result<Vector> {
    let wx = p.w.matvec(x)?;
    let scale: Vec<f64> = alpha.iter().zip(wx.iter()).map(|(a, w)| a * w).collect();
    let m = Matrix::diag(&scale).matmul(&p.u)?;
    m.matvec(h)
}

/// Central-difference gradient of `f` at `params`, one scalar at a time.
pub fn finite_diff_grad<P, F>(f: F, params: &P, step: f64) -> Result<P>
where
    P: Parameters + Clone,
    F: Fn(&P) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::rejected("finite-difference step must be positive"));
    }
    let base = params.flatten();
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(base.len());
    let mut flat = base.clone();
    for i in 0..base.len() {
        flat[i] = base[i] + step;
        probe.load_flat(&flat);
        let plus = f(&probe);
        flat[i] = base[i] - step;
        probe.load_flat(&flat);
        let minus = f(&probe);
        flat[i] = base[i];
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::rejected(format!(
                "objective is not finite around parameter {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    let mut out = params.clone();
    out.load_flat(&grad);
    Ok(out)
}

/// Largest elementwise `|a − b| / max(|a|, |b|, floor)` over two flat
/// buffers. `floor` keeps entries that are zero up to rounding from
/// dominating the ratio.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::block_forward;
    use crate::tensor::SamplingScheme;

    /// One scalar "parameter set" for checking the difference quotient itself.
    #[derive(Clone)]
    struct Flat(Vec<f64>);

    impl Parameters for Flat {
        fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
            f("theta", &self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
            f("theta", &mut self.0)
        }
    }

    #[test]
    fn fd_quadratic_and_constant() {
        let theta = Flat(vec![0.3, -1.2, 2.5, 0.0]);
        let g = finite_diff_grad(|p: &Flat| p.0.iter().map(|v| v * v).sum(), &theta, 1e-5).unwrap();
        for (gi, ti) in g.0.iter().zip(&theta.0) {
            assert!((gi - 2.0 * ti).abs() <= 1e-8);
        }
        let c = finite_diff_grad(|_: &Flat| 3.25, &theta, 1e-5).unwrap();
        assert!(c.0.iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn fd_rejects_bad_step_and_nonfinite_objective() {
        let theta = Flat(vec![1.0]);
        assert!(finite_diff_grad(|_: &Flat| 0.0, &theta, 0.0).is_err());
        assert!(finite_diff_grad(|p: &Flat| (p.0[0] - 1.0).ln(), &theta, 1e-5).is_err());
    }

    #[test]
    fn fd_error_is_second_order() {
        // f = Σ sin(θ) · e^θ has nonzero third derivatives everywhere
        let theta = Flat(vec![0.4, -0.7, 1.1]);
        let f = |p: &Flat| p.0.iter().map(|t| t.sin() * t.exp()).sum::<f64>();
        let exact: Vec<f64> = theta.0.iter().map(|t| t.exp() * (t.sin() + t.cos())).collect();
        let err = |h: f64| {
            let g = finite_diff_grad(f, &theta, h).unwrap();
            max_abs_diff(&g.0, &exact)
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn single_state_hmm_is_emission_product() {
        let spec = HmmSpec {
            transition: Matrix::identity(1),
            emission: Matrix::from_rows(&[vec![0.2], vec![0.5], vec![0.3]]).unwrap(),
            initial: Vector::from_vec(vec![1.0]),
        };
        let obs = [0, 1, 1, 2, 0];
        let expected: f64 = obs.iter().map(|&o| spec.emission.get(o, 0)).product();
        let alphas = hmm_forward(&spec, &obs).unwrap();
        assert!((alphas.last().unwrap()[0] - expected).abs() <= 1e-15);
        assert!((hmm_bruteforce(&spec, &obs).unwrap() - expected).abs() <= 1e-15);
        let hs = mi_rnn_as_hmm(&spec, &obs).unwrap();
        let mut running = 1.0;
        for (t, &o) in obs.iter().enumerate() {
            running *= spec.emission.get(o, 0);
            assert!((hs[t][0] - running).abs() <= 1e-15);
        }
    }

    #[test]
    fn deterministic_cycle_hmm() {
        // state j -> j+1 mod 3, state j emits symbol j
        let mut trans = Matrix::zeros(3, 3);
        for j in 0..3 {
            trans.set((j + 1) % 3, j, 1.0);
        }
        let spec = HmmSpec {
            transition: trans,
            emission: Matrix::identity(3),
            initial: Vector::from_vec(vec![1.0, 0.0, 0.0]),
        };
        // h0 = 0, so the first emitted state is 1
        let cycle = [1, 2, 0, 1, 2, 0, 1];
        let lik = |obs: &[usize]| hmm_forward(&spec, obs).unwrap().last().unwrap().iter().sum::<f64>();
        assert_eq!(lik(&cycle), 1.0);
        assert_eq!(hmm_bruteforce(&spec, &cycle).unwrap(), 1.0);
        assert_eq!(lik(&[1, 2, 1]), 0.0);
        assert_eq!(lik(&[0]), 0.0);
    }

    #[test]
    fn forward_matches_enumeration_on_random_specs() {
        let mut rng = Rng::new(99);
        for _ in 0..20 {
            let spec = HmmSpec::random(3, 4, &mut rng);
            let obs: Vec<usize> = (0..8).map(|_| rng.below(4)).collect();
            let fwd: f64 = hmm_forward(&spec, &obs).unwrap().last().unwrap().iter().sum();
            let brute = hmm_bruteforce(&spec, &obs).unwrap();
            assert!((fwd - brute).abs() <= 1e-12, "{fwd} vs {brute}");
        }
    }

    #[test]
    fn base_case_t1() {
        let mut rng = Rng::new(3);
        let spec = HmmSpec::random(3, 2, &mut rng);
        let brute = hmm_bruteforce(&spec, &[1]).unwrap();
        let fwd: f64 = hmm_forward(&spec, &[1]).unwrap()[0].iter().sum();
        assert!((brute - fwd).abs() <= 1e-15);
    }

    #[test]
    fn alpha_mass_never_grows() {
        let mut rng = Rng::new(17);
        for _ in 0..10 {
            let spec = HmmSpec::random(4, 5, &mut rng);
            let obs: Vec<usize> = (0..12).map(|_| rng.below(5)).collect();
            let alphas = hmm_forward(&spec, &obs).unwrap();
            let sums: Vec<f64> = alphas.iter().map(|a| a.iter().sum()).collect();
            assert!(alphas.iter().all(|a| a.iter().all(|v| *v >= 0.0)));
            assert!(sums.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn hmm_rejections() {
        let mut rng = Rng::new(4);
        let mut spec = HmmSpec::random(2, 3, &mut rng);
        assert!(hmm_forward(&spec, &[3]).is_err());
        assert!(hmm_forward(&spec, &vec![0; MAX_HMM_LEN + 1]).is_err());
        assert!(hmm_bruteforce(&HmmSpec::random(10, 2, &mut rng), &[0; 8]).is_err());
        spec.transition.set(0, 0, spec.transition.get(0, 0) + 0.1);
        assert!(matches!(hmm_forward(&spec, &[0]), Err(Error::RejectedInput(_))));
    }

    #[test]
    fn hmm_cell_constraints_are_named() {
        let mut rng = Rng::new(8);
        let spec = HmmSpec::random(3, 3, &mut rng);
        let mut block = MiParams::zeros(IntegrationMode::MiSimple, 3, 3, 3, MiBiasInit::ONES);
        block.w = spec.emission.transpose();
        block.u = spec.transition.clone();
        let good = RnnCell {
            block,
            activation: Activation::Identity,
        };
        assert!(run_hmm_cell(&good, &spec.initial, &[0, 1, 2]).is_ok());

        let mut tanh = good.clone();
        tanh.activation = Activation::Tanh;
        let msg = run_hmm_cell(&tanh, &spec.initial, &[0]).unwrap_err().to_string();
        assert!(msg.contains("linear"), "{msg}");

        let mut biased = good.clone();
        biased.block.b[1] = 0.1;
        let msg = run_hmm_cell(&biased, &spec.initial, &[0]).unwrap_err().to_string();
        assert!(msg.contains("bias"), "{msg}");

        let additive = RnnCell {
            block: good.block.with_mode(IntegrationMode::Additive, MiBiasInit::ONES),
            activation: Activation::Identity,
        };
        let msg = run_hmm_cell(&additive, &spec.initial, &[0]).unwrap_err().to_string();
        assert!(msg.contains("multiplicative"), "{msg}");
    }

    #[test]
    fn rank_one_slices_reproduce_the_second_order_term() {
        let mut rng = Rng::new(21);
        let s = SamplingScheme::symmetric(1.0);
        for _ in 0..20 {
            let p = MiParams::sample(IntegrationMode::MiGeneral, 4, 3, 5, MiBiasInit::ONES, s, s, &mut rng)
                .unwrap();
            let alpha: Vec<f64> = (0..4).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let x: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let h: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();

            let t = SecondOrderTensor::rank_one_from(&p, &alpha).unwrap();
            let bil = bilinear_second_order(&t, &x, &h).unwrap();
            let diag = diagonal_decomposition(&p, &alpha, &x, &h).unwrap();

            let mut only_second = p.clone();
            let g = only_second.gates.as_mut().unwrap();
            g.alpha = alpha.clone().into();
            g.beta1 = Vector::zeros(4);
            g.beta2 = Vector::zeros(4);
            only_second.b = Vector::zeros(4);
            let (mi, _) = block_forward(&only_second, Activation::Identity, Input::Dense(&x), &h).unwrap();

            assert!(max_abs_diff(&bil, &mi) <= 1e-12);
            assert!(max_abs_diff(&diag, &mi) <= 1e-12);
        }
    }

    #[test]
    fn zero_tensor_and_shape_errors() {
        let t = SecondOrderTensor::zeros(3, 2, 4);
        let s = bilinear_second_order(&t, &[1.0, 2.0], &[1.0; 4]).unwrap();
        assert_eq!(s.as_slice(), &[0.0; 3]);
        assert!(bilinear_second_order(&t, &[1.0], &[1.0; 4]).is_err());
    }
}
