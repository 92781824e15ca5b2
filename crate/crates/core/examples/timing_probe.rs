use dualform_core::model::{build_input, LossParams, Model, ModelConfig, Task};
use dualform_core::params::GradBuf;
use dualform_core::synthdata::{generate_sample, SyntheticSpec};
use std::time::Instant;

fn main() {
    let spec = SyntheticSpec::default();
    let sample = generate_sample(&spec, 0).unwrap();
    let cfg = ModelConfig {
        task: Task::Forecast,
        kind: dualform_core::mixers::MixerKind::Linear,
        d_model: 16, d_k: 16, n_heads: 4, n_layers: 2, sse_base: 4, seed: 1,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg).unwrap();
    let input = build_input(&sample, false, 8, Some((0, 0, 16))).unwrap();
    let params = LossParams::default();
    let n = 40;

    let t0 = Instant::now();
    for _ in 0..n { std::hint::black_box(model.backbone_forward(&input).unwrap()); }
    println!("backbone_forward: {:.2} ms", t0.elapsed().as_secs_f64() / n as f64 * 1e3);

    let t0 = Instant::now();
    for _ in 0..n { std::hint::black_box(model.forward_loss(&input, &params).unwrap()); }
    let fwd = t0.elapsed().as_secs_f64() / n as f64 * 1e3;
    println!("forward_loss: {:.2} ms", fwd);

    let (_, cache) = model.forward_loss(&input, &params).unwrap();
    let mut grads = GradBuf::zeros_like(&model.store);
    let t0 = Instant::now();
    for _ in 0..n {
        grads.reset();
        model.backward_loss(&input, &params, &cache, 1.0, &mut grads);
    }
    println!("backward_loss: {:.2} ms", t0.elapsed().as_secs_f64() / n as f64 * 1e3);
}
