//! Finite-difference checks of the mixer backward pass, every kind.

use dualform_core::mixers::{mix_parallel_batch, mixer_backward, MixerConfig, MixerKind, MixerWeights};
use dualform_core::params::{GradBuf, ParamStore};
use dualform_core::rng::Rng;

fn loss(cfg: &MixerConfig, w: &MixerWeights, store: &ParamStore, x: &[f64], b: usize, pos: &[f64]) -> f64 {
    let (out, _) = mix_parallel_batch(cfg, w, store, x, b, pos).unwrap();
    out.iter().map(|v| 0.5 * v * v).sum()
}

#[test]
fn mixer_backward_matches_finite_differences() {
    for (idx, kind) in MixerKind::ALL.iter().enumerate() {
        let mut rng = Rng::new(4000 + idx as u64);
        let d_model = 8;
        let t = 4;
        let b = 2;
        let cfg = MixerConfig::new(*kind, d_model, d_model, d_model, 2).unwrap();
        let mut store = ParamStore::new();
        let weights = MixerWeights::init(&cfg, &mut store, &mut rng, "m");
        let x: Vec<f64> = (0..b * t * d_model).map(|_| rng.uniform(1.0)).collect();
        let positions: Vec<f64> = vec![3.0, 9.0, 10.0, 21.0];

        let (out, cache) = mix_parallel_batch(&cfg, &weights, &store, &x, b, &positions).unwrap();
        let g_out: Vec<f64> = out.clone();
        let mut grads = GradBuf::zeros_like(&store);
        let mut g_x = vec![0.0; x.len()];
        mixer_backward(&cfg, &weights, &store, &cache, &g_out, &mut grads, &mut g_x);

        let h = 1e-6;
        for i in (0..store.len()).step_by(3) {
            let mut s2 = store.clone();
            s2.data_mut()[i] += h;
            let fp = loss(&cfg, &weights, &s2, &x, b, &positions);
            s2.data_mut()[i] -= 2.0 * h;
            let fm = loss(&cfg, &weights, &s2, &x, b, &positions);
            let fd = (fp - fm) / (2.0 * h);
            let an = grads.data()[i];
            let denom = fd.abs().max(an.abs()).max(1e-3);
            assert!(
                ((fd - an) / denom).abs() < 1e-5,
                "{kind} param {i}: fd {fd} vs analytic {an}"
            );
        }
        for i in (0..x.len()).step_by(3) {
            let mut x2 = x.clone();
            x2[i] += h;
            let fp = loss(&cfg, &weights, &store, &x2, b, &positions);
            x2[i] -= 2.0 * h;
            let fm = loss(&cfg, &weights, &store, &x2, b, &positions);
            let fd = (fp - fm) / (2.0 * h);
            let an = g_x[i];
            let denom = fd.abs().max(an.abs()).max(1e-3);
            assert!(
                ((fd - an) / denom).abs() < 1e-5,
                "{kind} input {i}: fd {fd} vs analytic {an}"
            );
        }
    }
}
