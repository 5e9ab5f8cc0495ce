use super::*;
use crate::cells::CellFamily;
use crate::data::{SplitFractions, TextMode};
use crate::experiment::{DataConfig, ModelConfig, TrainConfig};
use crate::tensor::{Matrix, Rng};

fn base(mode: IntegrationMode, activation: Activation) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        name: "d".into(),
        output: "unused".into(),
        model: ModelConfig {
            family: CellFamily::Rnn,
            mode,
            hidden: 6,
            activation,
            mi_bias: Default::default(),
            r_w: 0.3,
            r_u: 0.3,
            r_v: 0.3,
        },
        train: TrainConfig {
            seq_len: 12,
            batch: 4,
            lr: 1e-2,
            epochs: 2,
            seed: 5,
            clip: None,
            windows_per_epoch: None,
        },
        data: DataConfig {
            corpus: "unused".into(),
            text_mode: TextMode::Utf8,
            split: SplitFractions {
                train: 0.8,
                valid: 0.1,
                test: 0.1,
            },
        },
        diagnostics: Default::default(),
    };
    cfg.diagnostics.probe_sequences = 16;
    cfg.diagnostics.seeds = vec![1, 2];
    cfg.diagnostics.r_w_values = vec![0.1, 0.5];
    cfg
}

fn corpus() -> Corpus {
    let text = "a stitch in time saves nine; many hands make light work. ".repeat(20);
    Corpus::from_text(&text, &base(IntegrationMode::Additive, Activation::Tanh).data).unwrap()
}

fn untrained(mode: IntegrationMode, activation: Activation, c: &Corpus) -> Model {
    Trainer::with_corpus(base(mode, activation), c.clone()).unwrap().model
}

#[test]
fn backward_pass_and_explicit_chains_agree() {
    let c = corpus();
    for mode in IntegrationMode::ALL {
        for act in [Activation::Identity, Activation::Tanh] {
            let m = untrained(mode, act, &c);
            let probes = [0, 1, 5, 10, 12];
            let a = probe_gradient_norms(&m, &c.train, 12, &probes, 16).unwrap();
            let b = probe_gradient_norms_by_chain(&m, &c.train, 12, &probes, 16).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-10, "{mode} {act:?}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn one_step_probe_matches_hand_evaluation() {
    // For a linear cell one step back from the end multiplies ∂C/∂h_T by
    // Uᵀ (additive) or Uᵀ diag(Wx_T) (simple MI).
    let c = corpus();
    for mode in [IntegrationMode::Additive, IntegrationMode::MiSimple] {
        let m = untrained(mode, Activation::Identity, &c);
        let windows = probe_windows(c.train.len(), 12, 4);
        let mut expected = 0.0;
        for &k in &windows {
            let (x, y) = window(&c.train, 12, k);
            let rec = unroll_forward(&m, x, &m.cell.initial_state()).unwrap();
            let (_, trace) = backward_through_time(&m, &rec, y, LossScope::FinalStep).unwrap();
            let g = &trace.hidden_grads[12];
            let block = m.cell.blocks()[0];
            let gated: Vec<f64> = match mode {
                IntegrationMode::Additive => g.to_vec(),
                _ => g.iter().zip(block.w.column(x[11]).iter()).map(|(a, b)| a * b).collect(),
            };
            expected += log_norm(&block.u.matvec_transposed(&gated).unwrap());
        }
        expected /= windows.len() as f64;
        let got = probe_gradient_norms(&m, &c.train, 12, &[11], 4).unwrap()[0];
        assert!((got - expected).abs() < 1e-12, "{mode}");
    }
}

#[test]
fn identity_recurrence_preserves_the_norm() {
    let c = corpus();
    let mut m = untrained(IntegrationMode::Additive, Activation::Identity, &c);
    let d = m.hidden();
    if let crate::cells::Cell::Rnn(r) = &mut m.cell {
        r.block.u = Matrix::identity(d);
    }
    let norms = probe_gradient_norms(&m, &c.train, 12, &[0, 1, 5, 10, 12], 16).unwrap();
    for n in &norms {
        assert!((n - norms[4]).abs() < 1e-12);
    }
}

#[test]
fn probe_beyond_sequence_is_rejected() {
    let c = corpus();
    let m = untrained(IntegrationMode::Additive, Activation::Tanh, &c);
    assert!(probe_gradient_norms(&m, &c.train, 12, &[13], 4).is_err());
}

#[test]
fn histogram_edge_cases() {
    let h = ActivationHistogram::from_values("z", vec![0.0; 50], 20, 0.9);
    assert_eq!(h.counts.iter().filter(|c| **c > 0).count(), 1);
    assert_eq!(h.counts[10], 50);
    assert!(h.edges[10] <= 0.0 && 0.0 < h.edges[11]);
    assert_eq!(h.saturation_fraction(), 0.0);

    let h = ActivationHistogram::from_values("s", [1.0, -1.0, 1.0, -1.0], 20, 0.9);
    assert_eq!(h.saturation_fraction(), 1.0);
    assert_eq!((h.counts[0], h.counts[19]), (2, 2));
    assert_eq!(h.edges.len(), 21);
    assert_eq!((h.edges[0], h.edges[20]), (-1.0, 1.0));
}

#[test]
fn histogram_counts_everything_and_ignores_window_order() {
    let c = corpus();
    let m = untrained(IntegrationMode::MiSimple, Activation::Tanh, &c);
    let t = 12;
    let h = activation_histogram("m", &m, &c.valid, t, 20, 0.9).unwrap();
    let n = window_count(c.valid.len(), t);
    assert_eq!(h.total, (n * t * m.hidden()) as u64);
    assert_eq!(h.counts.iter().sum::<u64>(), h.total);

    // rebuild the stream with the input blocks permuted
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(4).shuffle(&mut order);
    let mut shuffled: Vec<usize> = order.iter().flat_map(|k| c.valid[k * t..k * t + t].to_vec()).collect();
    shuffled.push(0);
    let g = activation_histogram("m", &m, &shuffled, t, 20, 0.9).unwrap();
    assert_eq!(g, h);
}

#[test]
fn sweep_statistics() {
    let row = |model: &str, r_w: f64, seed: u64, bpc: Option<f64>| SweepRow {
        model: model.into(),
        r_w,
        seed,
        test_bpc: bpc,
        diverged: bpc.is_none(),
    };
    let mut warnings = Vec::new();
    let single = sweep_spreads(&[row("a", 0.1, 1, Some(2.0)), row("a", 0.1, 2, Some(2.2))], &mut warnings);
    assert_eq!(single[0].std, 0.0);
    assert_eq!(single[0].spread, 0.0);

    let rows = vec![
        row("rnn", 0.02, 1, Some(2.0)),
        row("rnn", 0.02, 2, Some(2.2)),
        row("rnn", 0.6, 1, Some(1.5)),
        row("rnn", 0.6, 2, None),
        row("mi", 0.02, 1, Some(1.9)),
        row("mi", 0.6, 1, Some(1.95)),
    ];
    let spreads = sweep_spreads(&rows, &mut warnings);
    assert_eq!(warnings.len(), 1);
    assert!(warnings[0].contains("rnn r_w=0.6 seed=2"));
    assert_eq!(spreads[0].means, vec![(0.02, 2.1), (0.6, 1.5)]);
    assert!((spreads[0].spread - 0.6).abs() < 1e-12);
    assert!((spreads[1].spread - 0.05).abs() < 1e-12);

    // naive one-pass formula as the reference
    let mut rng = Rng::new(8);
    let values: Vec<f64> = (0..7).map(|_| rng.uniform(1.0, 3.0)).collect();
    let n = values.len() as f64;
    let s1: f64 = values.iter().sum();
    let s2: f64 = values.iter().map(|v| v * v).sum();
    let reference = (s2 / n - (s1 / n) * (s1 / n)).sqrt();
    assert!((population_std(&values) - reference).abs() <= 1e-12);
}

#[test]
fn margin_rule() {
    let pass = margin_check(&[2.0, 2.1, 2.05], &[1.5, 1.55, 1.6]).unwrap();
    assert_eq!(pass.verdict, Verdict::Pass);
    assert!((pass.pooled_se - (0.0025f64 / 3.0 + 0.0025 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(margin_check(&[1.5, 1.6], &[2.0, 2.1]).unwrap().verdict, Verdict::Fail);
    assert_eq!(margin_check(&[2.0, 2.4], &[1.9, 2.3]).unwrap().verdict, Verdict::Inconclusive);
    assert!(margin_check(&[2.0], &[1.0, 1.1]).is_err());
}

fn small_report() -> Report {
    let c = corpus();
    let b = base(IntegrationMode::Additive, Activation::Identity);
    let mut b = b;
    b.train.epochs = 1;
    let variants = [
        variant(&b, "lin-rnn", IntegrationMode::Additive, Activation::Identity),
        variant(&b, "lin-mi-rnn", IntegrationMode::MiSimple, Activation::Identity),
    ];
    let norms = gradient_norm_experiment(&variants, &c).unwrap();
    let curves = curve_experiment(&variants, &c).unwrap();
    let comparisons = vec![("lin".to_string(), compare_curves(&curves, "lin-rnn", "lin-mi-rnn").unwrap())];
    Report {
        metadata: None,
        norms,
        curves,
        comparisons,
        ..Default::default()
    }
}

#[test]
fn experiments_emit_both_models_and_reproduce_bytes() {
    let a = small_report();
    // epochs 0 and 1, three probes, two models
    assert_eq!(a.norms.len(), 2 * 2 * 3);
    let csv = curves_csv(&a.curves);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("model,seed,epoch,valid_bpc"));
    let tags: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert!(tags.contains(&"lin-rnn") && tags.contains(&"lin-mi-rnn"));

    let b = small_report();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_report(&a, da.path()).unwrap();
    emit_report(&b, db.path()).unwrap();
    for f in ["norms.csv", "hist.csv", "sweep.csv", "curves.csv", "summary.json"] {
        let x = std::fs::read(da.path().join(f)).unwrap();
        let y = std::fs::read(db.path().join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn empty_report_has_headers_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let empty = Report::default();
    emit_report(&empty, dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("norms.csv")).unwrap(), "epoch,t,model,log_norm\n");
    assert_eq!(std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap(), "model,r_w,seed,test_bpc,diverged\n");
    assert_eq!(Report::from_json(&empty.to_json()).unwrap(), empty);

    let mut full = Report::default();
    full.histograms.push(ActivationHistogram::from_values("x", [0.3, -0.95, 1.0 / 3.0], 7, 0.9));
    full.sweep.push(SweepRow {
        model: "x".into(),
        r_w: 0.1,
        seed: 3,
        test_bpc: Some(0.1 + 0.2),
        diverged: false,
    });
    full.norms.push(NormPoint {
        epoch: 1,
        t: 5,
        model: "x".into(),
        log_norm: crate::bptt::LOG_NORM_ZERO,
    });
    full.warnings.push("w".into());
    assert_eq!(Report::from_json(&full.to_json()).unwrap(), full);
}

#[test]
fn sweep_runs_every_cell() {
    let c = corpus();
    let mut b = base(IntegrationMode::Additive, Activation::Tanh);
    b.train.epochs = 1;
    b.diagnostics.seeds = vec![1];
    let variants = [variant(&b, "rnn", IntegrationMode::Additive, Activation::Tanh)];
    let rows = scaling_sweep(&variants, &c).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| !r.diverged && r.test_bpc.unwrap() > 0.0));
    assert_eq!(sweep_csv(&rows).lines().count(), 3);
}
