use dualform_core::model::{build_input, Model, ModelConfig, Task};
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
    let n = 100;

    // single S2 sse encode
    let acq = &input.s2[0];
    let t0 = Instant::now();
    for _ in 0..n {
        std::hint::black_box(model.backbone.sse_s2.forward(&model.store, &acq.image, 16, 16).unwrap());
    }
    println!("sse_s2 single image: {:.3} ms (x{} images)", t0.elapsed().as_secs_f64() / n as f64 * 1e3, input.merged.len());

    // fusion on assembled tokens
    let mut feats = Vec::new();
    for step in &input.merged {
        let a = input.acq(step);
        let sse = if step.modality == 1 { model.backbone.sse_s1.as_ref().unwrap() } else { &model.backbone.sse_s2 };
        feats.push(sse.forward(&model.store, &a.image, 16, 16).unwrap().0);
    }
    let (assembled, _) = model.backbone.assembler.forward(&model.store, &feats, &input.merged, 64);
    let t0 = Instant::now();
    for _ in 0..n {
        std::hint::black_box(model.backbone.fusion.forward(&model.store, &assembled.x, 64, &assembled.positions).unwrap());
    }
    println!("fusion fwd: {:.3} ms", t0.elapsed().as_secs_f64() / n as f64 * 1e3);

    let t0 = Instant::now();
    for _ in 0..n {
        std::hint::black_box(model.backbone.assembler.forward(&model.store, &feats, &input.merged, 64));
    }
    println!("assembler fwd: {:.3} ms", t0.elapsed().as_secs_f64() / n as f64 * 1e3);
}
