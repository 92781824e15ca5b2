//! Parallel full-recompute vs one recurrent step across sequence lengths.
//!
//! The quadratic growth of the softmax baseline against the flat per-step
//! cost of the dual-form kinds is the motivating contrast; run with
//! `cargo bench -p dualform-bench`.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use dualform_bench::setup;
use dualform_core::mixers::{mix_parallel, mix_step, state_init, MixerKind};

fn parallel_recompute(c: &mut Criterion) {
    let mut group = c.benchmark_group("parallel_recompute");
    for kind in [MixerKind::TransformerCausal, MixerKind::Linear, MixerKind::Retention] {
        for t in [16usize, 64, 256] {
            let s = setup(kind, t);
            group.bench_with_input(
                BenchmarkId::new(kind.name(), t),
                &t,
                |b, _| {
                    b.iter(|| {
                        black_box(
                            mix_parallel(&s.cfg, &s.weights, &s.store, black_box(&s.seq)).unwrap(),
                        )
                    })
                },
            );
        }
    }
    group.finish();
}

fn recurrent_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("recurrent_step");
    for kind in [MixerKind::Linear, MixerKind::Cosformer, MixerKind::Retention] {
        for t in [16usize, 64, 256] {
            let s = setup(kind, t);
            // state after t tokens; the step under test is token t+1
            let mut state = state_init(&s.cfg).unwrap();
            for i in 0..t {
                let x = &s.seq.tokens[i * s.cfg.d_model..(i + 1) * s.cfg.d_model];
                mix_step(&s.cfg, &s.weights, &s.store, &mut state, x, s.seq.positions[i]).unwrap();
            }
            let x: Vec<f64> = (0..s.cfg.d_model).map(|i| (i as f64 * 0.37).sin()).collect();
            let next_pos = s.seq.positions[t - 1] + 5.0;
            group.bench_with_input(BenchmarkId::new(kind.name(), t), &t, |b, _| {
                b.iter(|| {
                    let mut st = state.clone();
                    black_box(
                        mix_step(&s.cfg, &s.weights, &s.store, &mut st, black_box(&x), next_pos)
                            .unwrap(),
                    )
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, parallel_recompute, recurrent_step);
criterion_main!(benches);
