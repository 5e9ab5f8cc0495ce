//! Self-check suite: analytic code against the brute-force oracles.
//!
//! Every check draws its instances from `Rng::new(base_seed + i)`, so a
//! failing instance can be replayed in isolation with [`replay`].

use serde::{Deserialize, Serialize};

use crate::bptt::{
    backward_through_time, jacobian_product, loss_from_logits, scoped_loss, unroll_forward, LossScope,
};
use crate::cells::{
    block_forward, Activation, CellFamily, CellSpec, Input, IntegrationMode, MiBiasInit, MiParams,
};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::oracles::{
    bilinear_second_order, diagonal_decomposition, finite_diff_grad, hmm_bruteforce, hmm_forward,
    max_abs_diff, max_relative_error, mi_rnn_as_hmm, HmmSpec, SecondOrderTensor, DEFAULT_FD_STEP,
};
use crate::params::Parameters;
use crate::tensor::{Rng, SamplingScheme, Vector};

pub const MANIFEST_VERSION: u32 = 1;
pub const GRADIENT_TOL: f64 = 1e-6;
pub const GRADIENT_FLOOR: f64 = 1e-4;
pub const DEGENERACY_TOL: f64 = 1e-12;
pub const HMM_TOL: f64 = 1e-12;
pub const SECOND_ORDER_TOL: f64 = 1e-12;
pub const CHAIN_TOL: f64 = 1e-10;
pub const UNIFORM_TOL: f64 = 1e-12;

/// A deliberately planted bug, used to show that the suite catches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Fault {
    /// Negate the analytic parameter gradients of one cell family.
    FlipBackwardSign { family: CellFamily },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Gradient,
    Degeneracy,
    Hmm,
    SecondOrder,
    Chain,
    UniformBpc,
}

impl CheckKind {
    pub const ALL: [CheckKind; 6] = [
        CheckKind::Gradient,
        CheckKind::Degeneracy,
        CheckKind::Hmm,
        CheckKind::SecondOrder,
        CheckKind::Chain,
        CheckKind::UniformBpc,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CheckKind::Gradient => "gradient",
            CheckKind::Degeneracy => "degeneracy",
            CheckKind::Hmm => "hmm",
            CheckKind::SecondOrder => "second_order",
            CheckKind::Chain => "chain",
            CheckKind::UniformBpc => "uniform_bpc",
        }
    }

    /// Instances per run.
    pub fn instances(&self) -> usize {
        match self {
            CheckKind::Gradient => 10,
            CheckKind::Degeneracy => 10,
            CheckKind::Hmm => 20,
            CheckKind::SecondOrder => 100,
            CheckKind::Chain => 10,
            CheckKind::UniformBpc => 1,
        }
    }

    pub fn tolerance(&self) -> f64 {
        match self {
            CheckKind::Gradient => GRADIENT_TOL,
            CheckKind::Degeneracy => DEGENERACY_TOL,
            CheckKind::Hmm => HMM_TOL,
            CheckKind::SecondOrder => SECOND_ORDER_TOL,
            CheckKind::Chain => CHAIN_TOL,
            CheckKind::UniformBpc => UNIFORM_TOL,
        }
    }
}

impl std::fmt::Display for CheckKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
}

/// One failing comparison inside an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub seed: u64,
    pub detail: String,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: CheckKind,
    pub instances: usize,
    pub tolerance: f64,
    pub max_error: f64,
    pub failures: Vec<Failure>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub base_seed: u64,
    pub fault: Option<Fault>,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("verify manifest: {e}")))
    }

    pub fn failures(&self) -> impl Iterator<Item = (CheckKind, &Failure)> {
        self.checks
            .iter()
            .flat_map(|c| c.failures.iter().map(move |f| (c.check, f)))
    }
}

/// Comparisons made on one instance: `(label, error)`.
type Measurements = Vec<(String, f64)>;

/// Runs one instance of `check` drawn from `seed`.
pub fn run_instance(check: CheckKind, seed: u64, fault: Option<Fault>) -> Result<Measurements> {
    let mut rng = Rng::new(seed);
    match check {
        CheckKind::Gradient => gradient_instance(&mut rng, fault),
        CheckKind::Degeneracy => degeneracy_instance(&mut rng),
        CheckKind::Hmm => hmm_instance(&mut rng),
        CheckKind::SecondOrder => second_order_instance(&mut rng),
        CheckKind::Chain => chain_instance(&mut rng),
        CheckKind::UniformBpc => uniform_instance(),
    }
}

/// Replays a single instance and folds it into a result.
pub fn replay(check: CheckKind, seed: u64, fault: Option<Fault>) -> Result<CheckResult> {
    let mut result = empty_result(check, 1);
    record(&mut result, seed, run_instance(check, seed, fault)?);
    Ok(result)
}

pub fn run_check(check: CheckKind, opts: &VerifyOptions) -> Result<CheckResult> {
    let n = check.instances();
    let mut result = empty_result(check, n);
    for i in 0..n {
        let seed = opts.seed.wrapping_add(i as u64);
        record(&mut result, seed, run_instance(check, seed, opts.fault)?);
    }
    Ok(result)
}

pub fn run_verify(opts: &VerifyOptions) -> Result<Manifest> {
    let checks = CheckKind::ALL
        .iter()
        .map(|c| run_check(*c, opts))
        .collect::<Result<Vec<_>>>()?;
    let passed = checks.iter().all(|c| c.passed);
    Ok(Manifest {
        version: MANIFEST_VERSION,
        base_seed: opts.seed,
        fault: opts.fault,
        checks,
        passed,
    })
}

fn empty_result(check: CheckKind, instances: usize) -> CheckResult {
    CheckResult {
        check,
        instances,
        tolerance: check.tolerance(),
        max_error: 0.0,
        failures: Vec::new(),
        passed: true,
    }
}

fn record(result: &mut CheckResult, seed: u64, measured: Measurements) {
    for (label, err) in measured {
        // NaN counts as a failure
        let ok = err <= result.tolerance;
        result.max_error = if err.is_nan() { f64::NAN } else { result.max_error.max(err) };
        if !ok {
            result.passed = false;
            result.failures.push(Failure {
                seed,
                detail: label,
                error: err,
            });
        }
    }
}

fn random_spec(family: CellFamily, mode: IntegrationMode, d: usize, vocab: usize, rng: &mut Rng) -> CellSpec {
    let r = rng.uniform(0.2, 0.8);
    CellSpec {
        family,
        mode,
        activation: Activation::Tanh,
        hidden: d,
        input: vocab,
        bias_init: MiBiasInit::TEXT8_LSTM,
        w_scheme: SamplingScheme::symmetric(r),
        u_scheme: SamplingScheme::symmetric(r),
    }
}

/// A model whose bias vectors are random too, so no gradient term vanishes.
fn random_model(family: CellFamily, mode: IntegrationMode, d: usize, vocab: usize, rng: &mut Rng) -> Result<Model> {
    let spec = random_spec(family, mode, d, vocab, rng);
    let mut m = Model::sample(&spec, SamplingScheme::symmetric(0.5), rng)?;
    for b in m.cell.blocks_mut() {
        b.b.iter_mut().for_each(|v| *v = rng.uniform(-0.4, 0.4));
        if let Some(g) = b.gates.as_mut() {
            for v in g.alpha.iter_mut().chain(g.beta1.iter_mut()).chain(g.beta2.iter_mut()) {
                *v = rng.uniform(-1.2, 1.2);
            }
        }
    }
    m.readout.bias.iter_mut().for_each(|v| *v = rng.uniform(-0.3, 0.3));
    Ok(m)
}

fn tokens(len: usize, vocab: usize, rng: &mut Rng) -> Vec<usize> {
    (0..len).map(|_| rng.below(vocab)).collect()
}

fn gradient_instance(rng: &mut Rng, fault: Option<Fault>) -> Result<Measurements> {
    const T: usize = 4;
    let mut out = Vec::new();
    for family in CellFamily::ALL {
        for mode in IntegrationMode::ALL {
            let d = 2 + rng.below(7);
            let vocab = 2 + rng.below(5);
            let m = random_model(family, mode, d, vocab, rng)?;
            let inputs = tokens(T, vocab, rng);
            let targets = tokens(T, vocab, rng);
            let rec = unroll_forward(&m, &inputs, &m.cell.initial_state())?;
            let (mut analytic, _) = backward_through_time(&m, &rec, &targets, LossScope::FullSequence)?;
            if fault == Some(Fault::FlipBackwardSign { family }) {
                analytic.cell.scale(-1.0);
            }
            // Mean per-character loss: the summed loss is T times larger and
            // its rounding noise, divided by the step, swamps small gradients.
            analytic.scale(1.0 / T as f64);
            let nll = |p: &Model| -> f64 {
                unroll_forward(p, &inputs, &p.cell.initial_state())
                    .and_then(|r| scoped_loss(&r, &targets, LossScope::FullSequence))
                    .map(|l| l.nll_nats / T as f64)
                    .unwrap_or(f64::NAN)
            };
            let numeric = finite_diff_grad(nll, &m, DEFAULT_FD_STEP)?;
            let err = max_relative_error(&analytic.flatten(), &numeric.flatten(), GRADIENT_FLOOR);
            out.push((format!("{family}/{mode} d={d} vocab={vocab}"), err));
        }
    }
    Ok(out)
}

/// Parameters of `b` restricted to the tensors `a` also has.
fn shared_slice(a: &Model, b: &Model) -> (Vec<f64>, Vec<f64>) {
    let mut left = Vec::new();
    a.visit(&mut |_, v| left.extend_from_slice(v));
    let names: Vec<String> = a.layout().into_iter().map(|(n, _)| n).collect();
    let mut right = Vec::new();
    b.visit(&mut |name, v| {
        if names.iter().any(|n| n == name) {
            right.extend_from_slice(v);
        }
    });
    (left, right)
}

fn degeneracy_instance(rng: &mut Rng) -> Result<Measurements> {
    let mut out = Vec::new();
    for family in CellFamily::ALL {
        let d = 2 + rng.below(7);
        let vocab = 2 + rng.below(5);
        let len = 1 + rng.below(6);
        let add = random_model(family, IntegrationMode::Additive, d, vocab, rng)?;
        let mut gen = add.clone();
        gen.cell = add.cell.with_mode(IntegrationMode::MiGeneral, MiBiasInit::DEGENERATE);
        let inputs = tokens(len, vocab, rng);
        let targets = tokens(len, vocab, rng);

        let ra = unroll_forward(&add, &inputs, &add.cell.initial_state())?;
        let rg = unroll_forward(&gen, &inputs, &gen.cell.initial_state())?;
        let flat = |r: &crate::bptt::UnrollRecord| -> Vec<f64> {
            r.states
                .iter()
                .flat_map(|s| s.h.iter().chain(s.c.iter().flat_map(|c| c.iter())).copied().collect::<Vec<_>>())
                .chain(r.logits.iter().flat_map(|l| l.iter().copied().collect::<Vec<_>>()))
                .collect()
        };
        out.push((format!("{family} forward"), max_abs_diff(&flat(&ra), &flat(&rg))));

        let (ga, _) = backward_through_time(&add, &ra, &targets, LossScope::FullSequence)?;
        let (gg, _) = backward_through_time(&gen, &rg, &targets, LossScope::FullSequence)?;
        let (a, g) = shared_slice(&ga, &gg);
        let err = if a.len() == g.len() { max_abs_diff(&a, &g) } else { f64::INFINITY };
        out.push((format!("{family} backward"), err));
    }
    Ok(out)
}

fn hmm_instance(rng: &mut Rng) -> Result<Measurements> {
    let states = 1 + rng.below(4);
    let symbols = 1 + rng.below(5);
    let len = 1 + rng.below(8);
    let spec = HmmSpec::random(states, symbols, rng);
    let obs = tokens(len, symbols, rng);
    let forward = hmm_forward(&spec, &obs)?;
    let mi = mi_rnn_as_hmm(&spec, &obs)?;
    let brute = hmm_bruteforce(&spec, &obs)?;
    let last: f64 = forward.last().map(|a| a.iter().sum()).unwrap_or(1.0);
    let states_err = forward
        .iter()
        .zip(&mi)
        .map(|(a, b)| max_abs_diff(a, b))
        .fold(0.0, f64::max);
    let label = format!("m={states} symbols={symbols} T={len}");
    Ok(vec![
        (format!("{label} forward vs network"), states_err),
        (format!("{label} forward vs enumeration"), (last - brute).abs()),
    ])
}

fn second_order_instance(rng: &mut Rng) -> Result<Measurements> {
    let d = 1 + rng.below(6);
    let n = 1 + rng.below(6);
    let m = 1 + rng.below(6);
    let s = SamplingScheme::symmetric(1.0);
    let mut p = MiParams::sample(IntegrationMode::MiGeneral, d, n, m, MiBiasInit::ONES, s, s, rng)?;
    let alpha: Vec<f64> = (0..d).map(|_| rng.uniform(-2.0, 2.0)).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let h: Vec<f64> = (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect();

    let t = SecondOrderTensor::rank_one_from(&p, &alpha)?;
    let bil = bilinear_second_order(&t, &x, &h)?;
    let diag = diagonal_decomposition(&p, &alpha, &x, &h)?;
    let g = p.gates.as_mut().expect("general block has gates");
    g.alpha = alpha.into();
    g.beta1 = Vector::zeros(d);
    g.beta2 = Vector::zeros(d);
    p.b = Vector::zeros(d);
    let (mi, _) = block_forward(&p, Activation::Identity, Input::Dense(&x), &h)?;
    let label = format!("d={d} n={n} m={m}");
    Ok(vec![
        (format!("{label} tensor vs block"), max_abs_diff(&bil, &mi)),
        (format!("{label} diagonal vs block"), max_abs_diff(&diag, &mi)),
    ])
}

fn chain_instance(rng: &mut Rng) -> Result<Measurements> {
    const T: usize = 5;
    let mut out = Vec::new();
    for mode in IntegrationMode::ALL {
        let d = 2 + rng.below(7);
        let vocab = 2 + rng.below(5);
        let m = random_model(CellFamily::Rnn, mode, d, vocab, rng)?;
        let inputs = tokens(T, vocab, rng);
        let targets = tokens(T, vocab, rng);
        let rec = unroll_forward(&m, &inputs, &m.cell.initial_state())?;
        let (_, trace) = backward_through_time(&m, &rec, &targets, LossScope::FinalStep)?;
        for n in 1..=T {
            let p = jacobian_product(&m.cell, &rec, T, T - n)?;
            let carried = p.matvec(&trace.hidden_grads[T])?;
            let err = max_relative_error(&carried, &trace.hidden_grads[T - n], 1e-12);
            out.push((format!("rnn/{mode} n={n}"), err));
        }
    }
    Ok(out)
}

fn uniform_instance() -> Result<Measurements> {
    let logits = vec![Vector::zeros(27); 10];
    let targets: Vec<usize> = (0..10).map(|i| (i * 7) % 27).collect();
    let report = loss_from_logits(&logits, &targets)?;
    Ok(vec![("27 equal logits".into(), (report.bpc - 27f64.log2()).abs())])
}
