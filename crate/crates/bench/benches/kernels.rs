use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mirnn::bptt::{backward_through_time, unroll_forward, LossScope};
use mirnn::cells::{block_forward, CellSpec};
use mirnn::tensor::SamplingScheme;
use mirnn::{Activation, Cell, CellFamily, Input, IntegrationMode, MiBiasInit, Model, Rng};

const VOCAB: usize = 78;

fn spec(family: CellFamily, mode: IntegrationMode, hidden: usize) -> CellSpec {
    CellSpec {
        family,
        mode,
        activation: Activation::Tanh,
        hidden,
        input: VOCAB,
        bias_init: MiBiasInit::TEXT8_LSTM,
        w_scheme: SamplingScheme::symmetric(0.1),
        u_scheme: SamplingScheme::symmetric(0.1),
    }
}

fn block(c: &mut Criterion) {
    let mut group = c.benchmark_group("block_forward");
    for mode in IntegrationMode::ALL {
        let cell = Cell::sample(&spec(CellFamily::Rnn, mode, 128), &mut Rng::new(1)).unwrap();
        let p = cell.blocks()[0].clone();
        let z = vec![0.1; 128];
        group.bench_with_input(BenchmarkId::from_parameter(mode), &p, |b, p| {
            b.iter(|| block_forward(p, Activation::Tanh, Input::OneHot(black_box(7)), black_box(&z)).unwrap())
        });
    }
    group.finish();
}

fn cell_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("cell_step");
    for family in CellFamily::ALL {
        let cell = Cell::sample(&spec(family, IntegrationMode::MiGeneral, 128), &mut Rng::new(2)).unwrap();
        let s = cell.initial_state();
        group.bench_with_input(BenchmarkId::from_parameter(family), &cell, |b, cell| {
            b.iter(|| cell.step(Input::OneHot(black_box(3)), black_box(&s)).unwrap())
        });
    }
    group.finish();
}

fn bptt(c: &mut Criterion) {
    let mut group = c.benchmark_group("bptt_t50");
    group.sample_size(20);
    let mut rng = Rng::new(3);
    let inputs: Vec<usize> = (0..50).map(|_| rng.below(VOCAB)).collect();
    let targets: Vec<usize> = (0..50).map(|_| rng.below(VOCAB)).collect();
    for mode in IntegrationMode::ALL {
        let m = Model::sample(&spec(CellFamily::Rnn, mode, 128), SamplingScheme::symmetric(0.02), &mut rng).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(mode), &m, |b, m| {
            b.iter(|| {
                let rec = unroll_forward(m, black_box(&inputs), &m.cell.initial_state()).unwrap();
                backward_through_time(m, &rec, &targets, LossScope::FullSequence).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, block, cell_step, bptt);
criterion_main!(benches);
