//! Scratch harness for sizing the desk-scale training protocol.

use dualform_core::mixers::MixerKind;
use dualform_core::model::{LossParams, Task};
use dualform_core::synthdata::{generate_sample, SyntheticSpec};
use dualform_core::training::{
    copy_last_baseline, evaluate_samples, train_with_samples, EvalReport, TrainConfig,
};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let task = args.get(1).map(|s| s.as_str()).unwrap_or("forecast");
    let kind: MixerKind = args
        .get(2)
        .map(|s| s.parse().unwrap())
        .unwrap_or(MixerKind::Linear);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(40);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let crop: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(16);
    let seq: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(8);
    let d_model: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(16);
    let base: usize = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(4);

    let spec = SyntheticSpec::default();
    let t0 = Instant::now();
    let train_samples: Vec<_> = (0..8).map(|i| generate_sample(&spec, i).unwrap()).collect();
    let val_samples: Vec<_> = (8..10).map(|i| generate_sample(&spec, i).unwrap()).collect();
    let test_samples: Vec<_> = (10..12).map(|i| generate_sample(&spec, i).unwrap()).collect();
    println!("datagen: {:.1}s", t0.elapsed().as_secs_f64());

    let cfg = TrainConfig {
        task: if task == "forecast" {
            Task::Forecast
        } else {
            Task::Segmentation
        },
        kind,
        epochs,
        batch_size: 4,
        learning_rate: lr,
        seed: 1,
        max_seq_len: seq,
        d_model,
        d_k: d_model,
        n_heads: 4,
        n_layers: 2,
        sse_base: base,
        crop: Some(crop),
        val_every: 1000,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train_with_samples(&cfg, &train_samples, &[]).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    println!(
        "train[{task} {kind} e={epochs} lr={lr} crop={crop} seq={seq} dm={d_model} base={base}]: {:.1}s  first_loss={:.5} last_loss={:.5}",
        train_secs,
        out.metrics.first().unwrap().train_loss,
        out.metrics.last().unwrap().train_loss
    );
    let _ = &val_samples;

    let params = LossParams::default();
    let t0 = Instant::now();
    match evaluate_samples(&out.model, &test_samples, &params, seq).unwrap() {
        EvalReport::Forecast(m) => {
            let baseline = copy_last_baseline(&test_samples, false, seq, &params).unwrap();
            println!(
                "eval: {:.1}s  model combined={:.5} (s1={:.5} s2={:.5} s2_late={:.5}) baseline combined={:.5} (s1={:.5} s2={:.5} s2_late={:.5}) ratio={:.3}",
                t0.elapsed().as_secs_f64(),
                m.combined,
                m.mse_s1,
                m.mse_s2,
                m.mse_s2_late,
                baseline.combined,
                baseline.mse_s1,
                baseline.mse_s2,
                baseline.mse_s2_late,
                m.combined / baseline.combined
            );
        }
        EvalReport::Segmentation(m) => {
            println!(
                "eval: {:.1}s  acc={:.4} f1={:.4} iou={:.4} labeled={}",
                t0.elapsed().as_secs_f64(),
                m.accuracy,
                m.f1_solar,
                m.iou_solar,
                m.labeled_pixels
            );
        }
    }
}
