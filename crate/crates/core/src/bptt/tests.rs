use super::*;
use crate::cells::{Activation, CellFamily, CellSpec, IntegrationMode, MiBiasInit};
use crate::oracles::{finite_diff_grad, max_relative_error, DEFAULT_FD_STEP};
use crate::params::Parameters;
use crate::tensor::{Rng, SamplingScheme};

fn spec(family: CellFamily, mode: IntegrationMode, d: usize, vocab: usize) -> CellSpec {
    CellSpec {
        family,
        mode,
        activation: Activation::Tanh,
        hidden: d,
        input: vocab,
        bias_init: MiBiasInit::TEXT8_LSTM,
        w_scheme: SamplingScheme::symmetric(0.6),
        u_scheme: SamplingScheme::symmetric(0.6),
    }
}

fn model(family: CellFamily, mode: IntegrationMode, seed: u64) -> Model {
    let mut rng = Rng::new(seed);
    let mut m = Model::sample(&spec(family, mode, 4, 5), SamplingScheme::symmetric(0.5), &mut rng).unwrap();
    for b in m.cell.blocks_mut() {
        b.b.iter_mut().for_each(|v| *v = rng.uniform(-0.4, 0.4));
        if let Some(g) = b.gates.as_mut() {
            for v in g.alpha.iter_mut().chain(g.beta1.iter_mut()).chain(g.beta2.iter_mut()) {
                *v = rng.uniform(-1.2, 1.2);
            }
        }
    }
    m.readout.bias.iter_mut().for_each(|v| *v = rng.uniform(-0.3, 0.3));
    m
}

fn sequence(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::new(seed);
    (0..len).map(|_| rng.below(vocab)).collect()
}

fn nll(m: &Model, inputs: &[usize], targets: &[usize], scope: LossScope) -> f64 {
    let h0 = m.cell.initial_state();
    let rec = unroll_forward(m, inputs, &h0).unwrap();
    scoped_loss(&rec, targets, scope).unwrap().nll_nats
}

const FAMILIES: [CellFamily; 3] = [CellFamily::Rnn, CellFamily::Lstm, CellFamily::Gru];

#[test]
fn bptt_matches_finite_differences_for_every_cell_and_mode() {
    for (i, family) in FAMILIES.into_iter().enumerate() {
        for (j, mode) in IntegrationMode::ALL.into_iter().enumerate() {
            let m = model(family, mode, 10 + (3 * i + j) as u64);
            let inputs = sequence(4, 5, 100 + i as u64);
            let targets = sequence(4, 5, 200 + j as u64);
            for scope in [LossScope::FullSequence, LossScope::FinalStep] {
                let rec = unroll_forward(&m, &inputs, &m.cell.initial_state()).unwrap();
                let (analytic, _) = backward_through_time(&m, &rec, &targets, scope).unwrap();
                let numeric =
                    finite_diff_grad(|p| nll(p, &inputs, &targets, scope), &m, DEFAULT_FD_STEP).unwrap();
                let err = max_relative_error(&analytic.flatten(), &numeric.flatten(), 1e-4);
                assert!(err <= 1e-6, "{family} {mode} {scope:?}: {err:e}");
            }
        }
    }
}

#[test]
fn single_step_gradient_matches_finite_differences() {
    for family in FAMILIES {
        let m = model(family, IntegrationMode::MiGeneral, 7);
        let rec = unroll_forward(&m, &[3], &m.cell.initial_state()).unwrap();
        let (analytic, trace) = backward_through_time(&m, &rec, &[1], LossScope::FullSequence).unwrap();
        let numeric = finite_diff_grad(|p| nll(p, &[3], &[1], LossScope::FullSequence), &m, DEFAULT_FD_STEP).unwrap();
        assert!(max_relative_error(&analytic.flatten(), &numeric.flatten(), 1e-4) <= 1e-6);
        assert_eq!(trace.hidden_grads.len(), 2);
    }
}

#[test]
fn hidden_gradient_at_time_zero_matches_perturbing_the_initial_state() {
    for family in FAMILIES {
        let m = model(family, IntegrationMode::MiSimple, 21);
        let inputs = sequence(5, 5, 1);
        let targets = sequence(5, 5, 2);
        let mut h0 = m.cell.initial_state();
        let mut rng = Rng::new(3);
        h0.h.iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
        let rec = unroll_forward(&m, &inputs, &h0).unwrap();
        let (_, trace) = backward_through_time(&m, &rec, &targets, LossScope::FullSequence).unwrap();
        let f = |h: &CellState| loss_bpc(&unroll_forward(&m, &inputs, h).unwrap(), &targets).unwrap().nll_nats;
        let step = DEFAULT_FD_STEP;
        let numeric: Vec<f64> = (0..4)
            .map(|k| {
                let (mut p, mut q) = (h0.clone(), h0.clone());
                p.h[k] += step;
                q.h[k] -= step;
                (f(&p) - f(&q)) / (2.0 * step)
            })
            .collect();
        let err = max_relative_error(&trace.hidden_grads[0], &numeric, 1e-4);
        assert!(err <= 1e-6, "{family}: {err:e}");
    }
}

#[test]
fn zero_readout_gives_uniform_prediction() {
    let mut m = model(CellFamily::Rnn, IntegrationMode::Additive, 5);
    m.readout = crate::model::Readout::zeros(5, 4);
    let inputs = sequence(6, 5, 9);
    let targets = sequence(6, 5, 10);
    let rec = unroll_forward(&m, &inputs, &m.cell.initial_state()).unwrap();
    let report = loss_bpc(&rec, &targets).unwrap();
    assert!((report.nll_nats - 6.0 * 5f64.ln()).abs() < 1e-12);
    assert!((report.bpc - 5f64.log2()).abs() < 1e-12);
    assert_eq!(report.count, 6);
}

#[test]
fn manual_unroll_matches_stepwise_computation() {
    let m = model(CellFamily::Lstm, IntegrationMode::MiGeneral, 8);
    let inputs = [0, 4, 2, 2];
    let rec = unroll_forward(&m, &inputs, &m.cell.initial_state()).unwrap();
    let mut s = m.cell.initial_state();
    for (t, &x) in inputs.iter().enumerate() {
        s = m.cell.step(Input::OneHot(x), &s).unwrap().0;
        assert_eq!(s, rec.states[t + 1]);
        let logits = m.readout.weight.matvec(&s.h).unwrap();
        for (a, (b, c)) in rec.logits[t].iter().zip(logits.iter().zip(m.readout.bias.iter())) {
            assert!((a - (b + c)).abs() < 1e-15);
        }
    }
}

#[test]
fn log_softmax_is_shift_invariant_and_stable() {
    let l = [1.0, -2.0, 0.5, 3.0];
    let shifted: Vec<f64> = l.iter().map(|v| v + 1000.0).collect();
    let a = log_sum_exp(&l) - l[2];
    let b = log_sum_exp(&shifted) - shifted[2];
    assert!((a - b).abs() < 1e-10);
    let p = softmax(&shifted);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(log_sum_exp(&[1e308, 1e308]).is_finite());
}

#[test]
fn linear_jacobian_product_is_a_power_of_the_transposed_recurrence() {
    let mut s = spec(CellFamily::Rnn, IntegrationMode::Additive, 4, 5);
    s.activation = Activation::Identity;
    let m = Model::sample(&s, SamplingScheme::symmetric(0.5), &mut Rng::new(4)).unwrap();
    let rec = unroll_forward(&m, &sequence(6, 5, 3), &m.cell.initial_state()).unwrap();
    let u_t = m.cell.blocks()[0].u.transpose();
    let mut expected = u_t.clone();
    for _ in 1..5 {
        expected = expected.matmul(&u_t).unwrap();
    }
    let p = jacobian_product(&m.cell, &rec, 6, 1).unwrap();
    assert!(max_abs_diff(p.as_slice(), expected.as_slice()) <= 1e-10);
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    crate::oracles::max_abs_diff(a, b)
}

#[test]
fn jacobian_product_carries_the_final_gradient_back() {
    for mode in IntegrationMode::ALL {
        let m = model(CellFamily::Rnn, mode, 30);
        let inputs = sequence(8, 5, 31);
        let targets = sequence(8, 5, 32);
        let rec = unroll_forward(&m, &inputs, &m.cell.initial_state()).unwrap();
        let (_, trace) = backward_through_time(&m, &rec, &targets, LossScope::FinalStep).unwrap();
        for n in 1..=8 {
            let p = jacobian_product(&m.cell, &rec, 8, 8 - n).unwrap();
            let carried = p.matvec(&trace.hidden_grads[8]).unwrap();
            let err = max_relative_error(&carried, &trace.hidden_grads[8 - n], 1e-12);
            assert!(err <= 1e-10, "{mode} n={n}: {err:e}");
        }
    }
}

#[test]
fn full_gradient_is_the_sum_of_per_step_chains() {
    let m = model(CellFamily::Gru, IntegrationMode::MiGeneral, 40);
    let inputs = sequence(5, 5, 41);
    let targets = sequence(5, 5, 42);
    let rec = unroll_forward(&m, &inputs, &m.cell.initial_state()).unwrap();
    let (full, _) = backward_through_time(&m, &rec, &targets, LossScope::FullSequence).unwrap();
    let mut summed = crate::params::zeros_like(&m);
    for t in 1..=5 {
        let prefix = unroll_forward(&m, &inputs[..t], &m.cell.initial_state()).unwrap();
        let (g, _) = backward_through_time(&m, &prefix, &targets[..t], LossScope::FinalStep).unwrap();
        summed.accumulate(&g);
    }
    assert!(max_relative_error(&full.flatten(), &summed.flatten(), 1e-12) <= 1e-10);
}

#[test]
fn gradient_trace_has_one_entry_per_state() {
    let m = model(CellFamily::Rnn, IntegrationMode::MiSimple, 50);
    let rec = unroll_forward(&m, &sequence(7, 5, 1), &m.cell.initial_state()).unwrap();
    let (_, trace) = backward_through_time(&m, &rec, &sequence(7, 5, 2), LossScope::FinalStep).unwrap();
    assert_eq!(trace.log_norms.len(), 8);
    for (g, l) in trace.hidden_grads.iter().zip(&trace.log_norms) {
        assert_eq!(*l, log_norm(g));
    }
    assert_eq!(log_norm(&[0.0, 0.0]), LOG_NORM_ZERO);
}

#[test]
fn rejections() {
    let m = model(CellFamily::Lstm, IntegrationMode::Additive, 60);
    assert!(unroll_forward(&m, &[], &m.cell.initial_state()).is_err());
    assert!(unroll_forward(&m, &[5], &m.cell.initial_state()).is_err());
    assert!(unroll_forward(&m, &[0, 9], &m.cell.initial_state()).is_err());
    let rec = unroll_forward(&m, &[0, 1], &m.cell.initial_state()).unwrap();
    assert!(backward_through_time(&m, &rec, &[0], LossScope::FullSequence).is_err());
    assert!(backward_through_time(&m, &rec, &[0, 7], LossScope::FullSequence).is_err());
    assert!(jacobian_product(&m.cell, &rec, 2, 0).is_err());
    let r = model(CellFamily::Rnn, IntegrationMode::Additive, 61);
    let rec = unroll_forward(&r, &[0, 1], &r.cell.initial_state()).unwrap();
    assert!(jacobian_product(&r.cell, &rec, 1, 1).is_err());
    assert!(jacobian_product(&r.cell, &rec, 3, 0).is_err());
    assert!(jacobian_product(&r.cell, &rec, 2, 0).is_ok());
}

#[test]
fn single_factor_is_the_local_jacobian() {
    let m = model(CellFamily::Rnn, IntegrationMode::MiGeneral, 70);
    let rec = unroll_forward(&m, &[1, 2, 3], &m.cell.initial_state()).unwrap();
    let single = jacobian_product(&m.cell, &rec, 2, 1).unwrap();
    // perturb h_1 and watch h_2 move: column j of ∂h_2/∂h_1 is row j of the factor
    let step = DEFAULT_FD_STEP;
    for j in 0..4 {
        let (mut p, mut q) = (rec.states[1].clone(), rec.states[1].clone());
        p.h[j] += step;
        q.h[j] -= step;
        let hp = m.cell.step(Input::OneHot(2), &p).unwrap().0.h;
        let hq = m.cell.step(Input::OneHot(2), &q).unwrap().0.h;
        for i in 0..4 {
            let numeric = (hp[i] - hq[i]) / (2.0 * step);
            assert!((numeric - single.get(j, i)).abs() < 1e-8);
        }
    }
}

#[test]
fn degenerate_general_product_equals_additive_product() {
    let add = model(CellFamily::Rnn, IntegrationMode::Additive, 71);
    let mut gen = add.clone();
    gen.cell = add.cell.with_mode(IntegrationMode::MiGeneral, MiBiasInit::DEGENERATE);
    gen.cell.blocks_mut()[0].b = add.cell.blocks()[0].b.clone();
    let inputs = sequence(6, 5, 72);
    let ra = unroll_forward(&add, &inputs, &add.cell.initial_state()).unwrap();
    let rg = unroll_forward(&gen, &inputs, &gen.cell.initial_state()).unwrap();
    let pa = jacobian_product(&add.cell, &ra, 6, 1).unwrap();
    let pg = jacobian_product(&gen.cell, &rg, 6, 1).unwrap();
    assert!(max_abs_diff(pa.as_slice(), pg.as_slice()) <= 1e-12);
}

#[test]
fn stored_factors_rebuild_the_product() {
    let m = model(CellFamily::Rnn, IntegrationMode::MiSimple, 73);
    let inputs = sequence(4, 5, 74);
    let rec = unroll_forward(&m, &inputs, &m.cell.initial_state()).unwrap();
    let (_, mut trace) = backward_through_time(&m, &rec, &sequence(4, 5, 75), LossScope::FinalStep).unwrap();
    trace.store_factors(&m.cell, &rec).unwrap();
    assert_eq!(trace.factors.len(), 4);
    let p = trace.factors[1].matmul(&trace.factors[2]).unwrap().matmul(&trace.factors[3]).unwrap();
    let q = jacobian_product(&m.cell, &rec, 4, 1).unwrap();
    assert_eq!(p, q);
    let lstm = model(CellFamily::Lstm, IntegrationMode::MiSimple, 76);
    let rec = unroll_forward(&lstm, &inputs, &lstm.cell.initial_state()).unwrap();
    assert!(trace.store_factors(&lstm.cell, &rec).is_err());
}

#[test]
fn bpc_reference_values() {
    let coin = vec![Vector::zeros(2); 10];
    let targets = [0, 1, 1, 0, 1, 0, 0, 0, 1, 1];
    assert_eq!(loss_from_logits(&coin, &targets).unwrap().bpc, 1.0);

    let uniform = vec![Vector::zeros(27); 3];
    let report = loss_from_logits(&uniform, &[0, 13, 26]).unwrap();
    assert!((report.bpc - 27f64.log2()).abs() < 1e-12);

    let mut sure = Vector::zeros(4);
    sure[2] = 50.0;
    assert!(loss_from_logits(&[sure], &[2]).unwrap().bpc < 1e-12);
    assert!(loss_from_logits(&coin[..1], &[2]).is_err());
}

#[test]
fn trace_csv_layout() {
    let trace = GradientTrace::from_grads(vec![Vector::zeros(2), Vector::from_vec(vec![3.0, 4.0])]);
    let csv = trace.to_csv(7);
    assert_eq!(csv, format!("epoch,t,log_l2_norm\n7,0,{LOG_NORM_ZERO}\n7,1,{}\n", 5f64.ln()));
}
