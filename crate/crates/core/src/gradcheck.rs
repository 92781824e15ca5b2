//! Finite-difference gradient verification.
//!
//! Compares analytic reverse-mode gradients with central differences on
//! sampled parameter coordinates and reports the worst relative error per
//! tensor. Failures are report entries, not panics.

use crate::error::Result;
use crate::linalg::dot;
use crate::mixers::{mix_parallel_batch, mixer_backward, MixerConfig, MixerKind, MixerWeights};
use crate::model::{build_input, LossParams, Model, ModelConfig, Task};
use crate::params::{GradBuf, ParamStore};
use crate::rng::Rng;
use crate::synthdata::{generate_sample, SyntheticSpec};

/// What to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    /// The segmentation linear layer alone (gradients are exact).
    LinearHead,
    /// One mixer in isolation.
    Mixer(MixerKind),
    /// Full forecast model at toy size.
    ForecastModel(MixerKind),
    /// Full segmentation model at toy size.
    SegmentationModel(MixerKind),
}

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub tensor: String,
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub component: String,
    pub checks: Vec<CoordCheck>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }

    /// Worst relative error per parameter tensor.
    pub fn per_tensor(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for check in &self.checks {
            match out.iter_mut().find(|(name, _)| *name == check.tensor) {
                Some((_, worst)) => *worst = worst.max(check.rel_err),
                None => out.push((check.tensor.clone(), check.rel_err)),
            }
        }
        out
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn tensor_name(store: &ParamStore, flat: usize) -> String {
    store
        .entries()
        .find(|(_, slot)| flat >= slot.offset && flat < slot.offset + slot.len)
        .map(|(name, _)| name.to_string())
        .unwrap_or_else(|| "?".into())
}

/// Generic flat-store check: `loss_of` evaluates the loss for a store,
/// `analytic` holds dloss/dparam.
fn check_store(
    component: &str,
    store: &ParamStore,
    analytic: &GradBuf,
    loss_of: impl Fn(&ParamStore) -> f64,
    n_coords: usize,
    step: f64,
    seed: u64,
) -> GradCheckReport {
    let mut rng = Rng::new(seed);
    let mut checks = Vec::with_capacity(n_coords);
    let mut max_rel: f64 = 0.0;
    for _ in 0..n_coords {
        let i = rng.below(store.len() as u64) as usize;
        let mut s2 = store.clone();
        s2.data_mut()[i] += step;
        let fp = loss_of(&s2);
        s2.data_mut()[i] = store.data()[i] - step;
        let fm = loss_of(&s2);
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let e = rel_err(a, numeric);
        max_rel = max_rel.max(e);
        checks.push(CoordCheck {
            tensor: tensor_name(store, i),
            flat_index: i,
            analytic: a,
            numeric,
            rel_err: e,
        });
    }
    GradCheckReport {
        component: component.into(),
        checks,
        max_rel_err: max_rel,
    }
}

fn toy_model_report(task: Task, kind: MixerKind, n_coords: usize, step: f64) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        task,
        kind,
        d_model: 8,
        d_k: 8,
        n_heads: 2,
        n_layers: 1,
        sse_base: 2,
        seed: 11,
        ..ModelConfig::default()
    };
    let spec = SyntheticSpec {
        h: 16,
        w: 16,
        duration_days: 90.0,
        label_fraction: 0.9,
        ..SyntheticSpec::default()
    };
    let sample = generate_sample(&spec, 1)?;
    let input = build_input(&sample, false, 2, None)?;
    let params = LossParams {
        n_after: 1,
        ..LossParams::default()
    };
    let model = Model::new(cfg.clone())?;
    let (_, cache) = model.forward_loss(&input, &params)?;
    let mut grads = GradBuf::zeros_like(&model.store);
    model.backward_loss(&input, &params, &cache, 1.0, &mut grads);
    let loss_of = |store: &ParamStore| -> f64 {
        let mut m2 = Model::new(cfg.clone()).unwrap();
        m2.store = store.clone();
        m2.forward_loss(&input, &params).unwrap().0.loss
    };
    let name = match task {
        Task::Forecast => format!("forecast_model[{kind}]"),
        Task::Segmentation => format!("segmentation_model[{kind}]"),
    };
    Ok(check_store(
        &name,
        &model.store,
        &grads,
        loss_of,
        n_coords,
        step,
        77,
    ))
}

fn mixer_report(kind: MixerKind, n_coords: usize, step: f64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(55);
    let cfg = MixerConfig::new(kind, 8, 8, 8, 2)?;
    let mut store = ParamStore::new();
    let weights = MixerWeights::init(&cfg, &mut store, &mut rng, "mixer");
    let b = 2;
    let positions = vec![2.0, 5.0, 11.0, 12.0];
    let x: Vec<f64> = (0..b * positions.len() * 8).map(|_| rng.uniform(1.0)).collect();
    let loss_of = |s: &ParamStore| -> f64 {
        let (out, _) = mix_parallel_batch(&cfg, &weights, s, &x, b, &positions).unwrap();
        0.5 * dot(&out, &out)
    };
    let (out, cache) = mix_parallel_batch(&cfg, &weights, &store, &x, b, &positions)?;
    let mut grads = GradBuf::zeros_like(&store);
    let mut g_x = vec![0.0; x.len()];
    mixer_backward(&cfg, &weights, &store, &cache, &out, &mut grads, &mut g_x);
    Ok(check_store(
        &format!("mixer[{kind}]"),
        &store,
        &grads,
        loss_of,
        n_coords,
        step,
        88,
    ))
}

fn linear_head_report(n_coords: usize, step: f64) -> GradCheckReport {
    use crate::heads::SegmentationHead;
    let mut store = ParamStore::new();
    let mut rng = Rng::new(66);
    let head = SegmentationHead::init(&mut store, &mut rng, "head", 8);
    let pixels = 6;
    let y: Vec<f64> = (0..pixels * 8).map(|_| rng.uniform(1.0)).collect();
    let loss_of = |s: &ParamStore| -> f64 {
        let out = head.forward(s, &y, pixels);
        0.5 * dot(&out, &out)
    };
    let out = head.forward(&store, &y, pixels);
    let mut grads = GradBuf::zeros_like(&store);
    let mut g_y = vec![0.0; y.len()];
    head.backward(&store, &y, &out, pixels, &mut grads, &mut g_y);
    check_store("linear_head", &store, &grads, loss_of, n_coords, step, 99)
}

/// Run a finite-difference check for one component. `step` is the central
/// difference half-width (1e-3 for full models per the toy-size contract).
pub fn grad_check(component: Component, n_coords: usize, step: f64) -> Result<GradCheckReport> {
    match component {
        Component::LinearHead => Ok(linear_head_report(n_coords, step)),
        Component::Mixer(kind) => mixer_report(kind, n_coords, step),
        Component::ForecastModel(kind) => toy_model_report(Task::Forecast, kind, n_coords, step),
        Component::SegmentationModel(kind) => {
            toy_model_report(Task::Segmentation, kind, n_coords, step)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_head_gradients_are_exact() {
        let report = grad_check(Component::LinearHead, 60, 1e-6).unwrap();
        assert!(report.passes(1e-6), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn mixer_gradients_within_tolerance() {
        for kind in [MixerKind::Linear, MixerKind::TimeRetention] {
            let report = grad_check(Component::Mixer(kind), 40, 1e-5).unwrap();
            assert!(
                report.passes(1e-4),
                "{kind}: max rel err {}",
                report.max_rel_err
            );
        }
    }
}
