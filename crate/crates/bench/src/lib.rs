//! Shared setup for the criterion benches.

use dualform_core::mixers::{MixerConfig, MixerKind, MixerWeights, TokenSequence};
use dualform_core::params::ParamStore;
use dualform_core::rng::Rng;

pub struct BenchSetup {
    pub cfg: MixerConfig,
    pub weights: MixerWeights,
    pub store: ParamStore,
    pub seq: TokenSequence,
}

/// Mixer instance over a random sequence of length `t` at the reference
/// width (d_model = 32, 4 heads).
pub fn setup(kind: MixerKind, t: usize) -> BenchSetup {
    let d_model = 32;
    let mut rng = Rng::new(0xbe7c);
    let mut cfg = MixerConfig::new(kind, d_model, d_model, d_model, 4).unwrap();
    cfg.reweight = dualform_core::featmaps::ReweightParams::new((t as f64 * 8.0).max(700.0)).unwrap();
    let mut store = ParamStore::new();
    let weights = MixerWeights::init(&cfg, &mut store, &mut rng, "bench");
    let tokens: Vec<f64> = (0..t * d_model).map(|_| rng.uniform(1.0)).collect();
    let mut positions = Vec::with_capacity(t);
    let mut pos = 0.0;
    for _ in 0..t {
        positions.push(pos);
        pos += 1.0 + rng.below(10) as f64;
    }
    let seq = TokenSequence::new(tokens, positions, vec![0; t], d_model).unwrap();
    BenchSetup {
        cfg,
        weights,
        store,
        seq,
    }
}
