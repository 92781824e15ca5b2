//! Full task models: the backbone (spatial encoders, token assembly, fusion,
//! pixel shuffle) plus a task head, with whole-graph forward, loss, and
//! reverse-mode backward.

use crate::encoder::{
    merge_steps, AssembleCache, FusionCache, FusionStack, MergedStep, PixelShuffleCache,
    PixelShuffleUp, SseCache, SseConfig, SseEncoder, TokenAssembler,
};
use crate::error::{Error, Result};
use crate::featmaps::ReweightParams;
use crate::heads::{
    focal_grad, focal_loss, masked_mse_grad, masked_mse_loss, FocalBreakdown, ForecastAux,
    ForecastCache, Forecaster, ForecastTarget, MseBreakdown, SegTarget, SegmentationHead,
};
use crate::mixers::{MixerConfig, MixerKind};
use crate::params::{GradBuf, ParamStore};
use crate::rng::Rng;
use crate::synthdata::MultiModalSample;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Forecast,
    Segmentation,
}

/// Architecture hyper-parameters; everything a checkpoint needs to rebuild
/// the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub task: Task,
    pub kind: MixerKind,
    pub d_model: usize,
    pub d_k: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub sse_base: usize,
    pub c_s1: usize,
    pub c_s2: usize,
    /// Drop the S1 branch entirely (mono-modal optical configuration).
    pub mono_s2: bool,
    /// Override of the reweighting span M (indices or days by kind).
    pub max_span: Option<f64>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            task: Task::Forecast,
            kind: MixerKind::Linear,
            d_model: 32,
            d_k: 32,
            n_heads: 4,
            n_layers: 2,
            sse_base: 8,
            c_s1: 2,
            c_s2: 10,
            mono_s2: false,
            max_span: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn mixer_config(&self) -> Result<MixerConfig> {
        let mut cfg = MixerConfig::new(
            self.kind,
            self.d_model,
            self.d_k,
            self.d_model,
            self.n_heads,
        )?;
        if let Some(span) = self.max_span {
            cfg.reweight = ReweightParams::new(span)?;
        }
        Ok(cfg)
    }
}

pub struct Backbone {
    pub sse_s1: Option<SseEncoder>,
    pub sse_s2: SseEncoder,
    pub assembler: TokenAssembler,
    pub fusion: FusionStack,
    pub shuffle: PixelShuffleUp,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub forecaster: Option<Forecaster>,
    pub seg_head: Option<SegmentationHead>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model> {
        let mixer_cfg = cfg.mixer_config()?;
        let mut store = ParamStore::new();
        let rng = Rng::new(cfg.seed);
        let sse_s1 = (!cfg.mono_s2).then(|| {
            SseEncoder::init(
                &mut store,
                &mut rng.fork(1),
                "backbone.sse_s1",
                SseConfig {
                    in_channels: cfg.c_s1,
                    base_width: cfg.sse_base,
                    d_model: cfg.d_model,
                },
            )
        });
        let sse_s2 = SseEncoder::init(
            &mut store,
            &mut rng.fork(2),
            "backbone.sse_s2",
            SseConfig {
                in_channels: cfg.c_s2,
                base_width: cfg.sse_base,
                d_model: cfg.d_model,
            },
        );
        let assembler =
            TokenAssembler::init(&mut store, &mut rng.fork(3), "backbone.assembly", cfg.d_model);
        let fusion = FusionStack::init(
            &mut store,
            &mut rng.fork(4),
            "backbone.fusion",
            mixer_cfg,
            cfg.n_layers,
        );
        let shuffle = PixelShuffleUp::init(&mut store, &mut rng.fork(5), "backbone.upsample", cfg.d_model);
        let forecaster = (cfg.task == Task::Forecast)
            .then(|| {
                Forecaster::init(
                    &mut store,
                    &mut rng.fork(6),
                    "head.forecast",
                    cfg.d_model,
                    cfg.c_s1,
                    cfg.c_s2,
                )
            })
            .transpose()?;
        let seg_head = (cfg.task == Task::Segmentation).then(|| {
            SegmentationHead::init(&mut store, &mut rng.fork(7), "head.segmentation", cfg.d_model)
        });
        Ok(Model {
            cfg,
            store,
            backbone: Backbone {
                sse_s1,
                sse_s2,
                assembler,
                fusion,
                shuffle,
            },
            forecaster,
            seg_head,
        })
    }
}

// ---------------------------------------------------------------------------
// Prepared inputs
// ---------------------------------------------------------------------------

/// One acquisition, prepared (possibly cropped) for the model.
#[derive(Debug, Clone)]
pub struct InputAcq {
    pub date: f64,
    /// C x h x w channel-major.
    pub image: Vec<f64>,
    pub valid: Vec<bool>,
    /// S2 only.
    pub cloud: Option<Vec<bool>>,
    pub weather: Vec<f64>,
    /// S1 only: (azimuth, incidence).
    pub angles: Option<(f64, f64)>,
}

/// Model-ready view of a sample: truncated, optionally cropped, merged.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub h: usize,
    pub w: usize,
    pub s1: Vec<InputAcq>,
    pub s2: Vec<InputAcq>,
    pub merged: Vec<MergedStep>,
    /// (merged index, label map) for labeled S2 steps.
    pub labels: Vec<(usize, Vec<u8>)>,
}

impl ModelInput {
    pub fn acq(&self, step: &MergedStep) -> &InputAcq {
        match step.modality {
            1 => &self.s1[step.source_index],
            _ => &self.s2[step.source_index],
        }
    }
}

fn crop_plane<T: Copy>(src: &[T], w: usize, y0: usize, x0: usize, size: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let row = (y0 + y) * w + x0;
        out.extend_from_slice(&src[row..row + size]);
    }
    out
}

fn crop_image(src: &[f64], c: usize, h: usize, w: usize, y0: usize, x0: usize, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        out.extend(crop_plane(&src[ch * h * w..(ch + 1) * h * w], w, y0, x0, size));
    }
    out
}

/// Build a model input from a sample: keep the first `max_per_modality`
/// acquisitions per modality, optionally crop a square window.
pub fn build_input(
    sample: &MultiModalSample,
    mono_s2: bool,
    max_per_modality: usize,
    crop: Option<(usize, usize, usize)>,
) -> Result<ModelInput> {
    let (y0, x0, size) = crop.unwrap_or((0, 0, sample.h.min(sample.w)));
    if y0 + size > sample.h || x0 + size > sample.w {
        return Err(Error::Dimension(format!(
            "crop {size} at ({y0},{x0}) exceeds {}x{}",
            sample.h, sample.w
        )));
    }
    let full = crop.is_none() && sample.h == sample.w;
    let take = |n: usize| n.min(max_per_modality);
    let mut s1 = Vec::new();
    if !mono_s2 {
        for acq in sample.s1.iter().take(take(sample.s1.len())) {
            s1.push(InputAcq {
                date: acq.date,
                image: if full {
                    acq.image.clone()
                } else {
                    crop_image(&acq.image, sample.c_s1, sample.h, sample.w, y0, x0, size)
                },
                valid: if full {
                    acq.valid.clone()
                } else {
                    crop_plane(&acq.valid, sample.w, y0, x0, size)
                },
                cloud: None,
                weather: acq.weather.clone(),
                angles: Some((acq.azimuth, acq.incidence)),
            });
        }
    }
    let mut s2 = Vec::new();
    for acq in sample.s2.iter().take(take(sample.s2.len())) {
        s2.push(InputAcq {
            date: acq.date,
            image: if full {
                acq.image.clone()
            } else {
                crop_image(&acq.image, sample.c_s2, sample.h, sample.w, y0, x0, size)
            },
            valid: if full {
                acq.valid.clone()
            } else {
                crop_plane(&acq.valid, sample.w, y0, x0, size)
            },
            cloud: Some(if full {
                acq.cloud.clone()
            } else {
                crop_plane(&acq.cloud, sample.w, y0, x0, size)
            }),
            weather: acq.weather.clone(),
            angles: None,
        });
    }
    let merged = merge_steps(
        &s1.iter().map(|a| a.date).collect::<Vec<_>>(),
        &s2.iter().map(|a| a.date).collect::<Vec<_>>(),
    )?;
    let mut labels = Vec::new();
    for label in &sample.labels {
        if let Some(idx) = merged
            .iter()
            .position(|m| m.modality == 2 && m.date == label.date)
        {
            let map = if full {
                label.classes.clone()
            } else {
                crop_plane(&label.classes, sample.w, y0, x0, size)
            };
            labels.push((idx, map));
        }
    }
    Ok(ModelInput {
        h: size,
        w: size,
        s1,
        s2,
        merged,
        labels,
    })
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

pub struct BackboneOutput {
    /// Per merged step: pixel-major rows (H*W) x d_model at full resolution.
    pub y_rows: Vec<Vec<f64>>,
    pub positions: Vec<f64>,
}

pub struct BackboneCache {
    sse: Vec<SseCache>,
    assemble: AssembleCache,
    fusion: FusionCache,
    shuffle: Vec<PixelShuffleCache>,
    t: usize,
    pixels_half: usize,
    h: usize,
    w: usize,
}

/// Transpose channel-major planes (C x P) into pixel-major rows (P x C).
fn planes_to_rows(planes: &[f64], c: usize, pixels: usize) -> Vec<f64> {
    let mut rows = vec![0.0; planes.len()];
    for ch in 0..c {
        for p in 0..pixels {
            rows[p * c + ch] = planes[ch * pixels + p];
        }
    }
    rows
}

fn rows_to_planes(rows: &[f64], c: usize, pixels: usize) -> Vec<f64> {
    let mut planes = vec![0.0; rows.len()];
    for p in 0..pixels {
        for ch in 0..c {
            planes[ch * pixels + p] = rows[p * c + ch];
        }
    }
    planes
}

impl Model {
    pub fn backbone_forward(&self, input: &ModelInput) -> Result<(BackboneOutput, BackboneCache)> {
        let dm = self.cfg.d_model;
        let (h, w) = (input.h, input.w);
        let (h2, w2) = (h / 2, w / 2);
        let pixels_half = h2 * w2;
        let t = input.merged.len();
        if t == 0 {
            return Err(Error::Dimension("empty merged sequence".into()));
        }
        let mut feats = Vec::with_capacity(t);
        let mut sse_caches = Vec::with_capacity(t);
        for step in &input.merged {
            let acq = input.acq(step);
            let sse = match step.modality {
                1 => self
                    .backbone
                    .sse_s1
                    .as_ref()
                    .ok_or_else(|| Error::Config("model has no S1 branch".into()))?,
                _ => &self.backbone.sse_s2,
            };
            let (feat, cache) = sse.forward(&self.store, &acq.image, h, w)?;
            feats.push(feat);
            sse_caches.push(cache);
        }
        let (assembled, assemble_cache) =
            self.backbone
                .assembler
                .forward(&self.store, &feats, &input.merged, pixels_half);
        // span guard for time kinds happens inside the mixer via positions
        let (tokens, fusion_cache) = self.backbone.fusion.forward(
            &self.store,
            &assembled.x,
            pixels_half,
            &assembled.positions,
        )?;
        let mut y_rows = Vec::with_capacity(t);
        let mut shuffle_caches = Vec::with_capacity(t);
        for ti in 0..t {
            // gather step ti into channel-major planes
            let mut planes = vec![0.0; dm * pixels_half];
            for px in 0..pixels_half {
                let row = &tokens[(px * t + ti) * dm..(px * t + ti + 1) * dm];
                for c in 0..dm {
                    planes[c * pixels_half + px] = row[c];
                }
            }
            let (full, cache) = self.backbone.shuffle.forward(&self.store, &planes, h2, w2);
            shuffle_caches.push(cache);
            y_rows.push(planes_to_rows(&full, dm, h * w));
        }
        Ok((
            BackboneOutput {
                y_rows,
                positions: assembled.positions,
            },
            BackboneCache {
                sse: sse_caches,
                assemble: assemble_cache,
                fusion: fusion_cache,
                shuffle: shuffle_caches,
                t,
                pixels_half,
                h,
                w,
            },
        ))
    }

    /// Backward from per-step gradients on the full-resolution pixel rows.
    pub fn backbone_backward(
        &self,
        input: &ModelInput,
        cache: &BackboneCache,
        g_y_rows: &[Vec<f64>],
        grads: &mut GradBuf,
    ) {
        let dm = self.cfg.d_model;
        let t = cache.t;
        let pixels_half = cache.pixels_half;
        let hw = cache.h * cache.w;
        let mut g_tokens = vec![0.0; pixels_half * t * dm];
        for ti in 0..t {
            if g_y_rows[ti].is_empty() {
                continue;
            }
            let g_planes = rows_to_planes(&g_y_rows[ti], dm, hw);
            let g_half =
                self.backbone
                    .shuffle
                    .backward(&self.store, &cache.shuffle[ti], &g_planes, grads);
            for px in 0..pixels_half {
                for c in 0..dm {
                    g_tokens[(px * t + ti) * dm + c] += g_half[c * pixels_half + px];
                }
            }
        }
        let g_assembled = self
            .backbone
            .fusion
            .backward(&self.store, &cache.fusion, &g_tokens, grads);
        let g_feats =
            self.backbone
                .assembler
                .backward(&self.store, &cache.assemble, &g_assembled, grads);
        for (ti, step) in input.merged.iter().enumerate() {
            let sse = match step.modality {
                1 => self.backbone.sse_s1.as_ref().unwrap(),
                _ => &self.backbone.sse_s2,
            };
            sse.backward(&self.store, &cache.sse[ti], &g_feats[ti], grads);
        }
    }
}

// ---------------------------------------------------------------------------
// Task losses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct LossParams {
    pub n_after: usize,
    pub w_s2: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            n_after: 6,
            w_s2: 0.1,
            focal_alpha: 0.58,
            focal_gamma: 2.0,
        }
    }
}

pub struct LossOutput {
    pub loss: f64,
    pub mse: Option<MseBreakdown>,
    pub focal: Option<FocalBreakdown>,
}

pub struct ModelCache {
    backbone: BackboneCache,
    /// Forecast: (target merged index, prediction planes, cache).
    forecast: Vec<(usize, Vec<f64>, ForecastCache)>,
    /// Segmentation: (merged index, logits rows).
    seg_logits: Vec<(usize, Vec<f64>)>,
    y_rows: Vec<Vec<f64>>,
}

impl ModelCache {
    /// (target merged index, prediction planes, forecaster cache) per target.
    pub fn forecast_items(&self) -> &[(usize, Vec<f64>, ForecastCache)] {
        &self.forecast
    }

    /// (merged index, pixel-major logits) per labeled step.
    pub fn seg_items(&self) -> &[(usize, Vec<f64>)] {
        &self.seg_logits
    }

    /// Backbone output rows per merged step, (H*W) x d_model.
    pub fn backbone_rows(&self) -> &[Vec<f64>] {
        &self.y_rows
    }
}

impl Model {
    /// Forward pass and loss for one prepared input.
    pub fn forward_loss(
        &self,
        input: &ModelInput,
        params: &LossParams,
    ) -> Result<(LossOutput, ModelCache)> {
        let (out, backbone_cache) = self.backbone_forward(input)?;
        let hw = input.h * input.w;
        match self.cfg.task {
            Task::Forecast => {
                let forecaster = self.forecaster.as_ref().expect("forecast model has a head");
                let mut preds = Vec::new();
                for k in 1..input.merged.len() {
                    if k < params.n_after {
                        continue;
                    }
                    let target_step = &input.merged[k];
                    let source_step = &input.merged[k - 1];
                    let delta = target_step.date - source_step.date;
                    if delta <= 0.0 {
                        // same-date pair carries no forecasting signal
                        continue;
                    }
                    let acq = input.acq(target_step);
                    let aux = ForecastAux {
                        modality: target_step.modality,
                        delta,
                        weather: acq.weather.clone(),
                        angles: acq.angles,
                    };
                    let (pred_rows, cache) =
                        forecaster.forward(&self.store, &out.y_rows[k - 1], hw, &aux)?;
                    let channels = if target_step.modality == 1 {
                        self.cfg.c_s1
                    } else {
                        self.cfg.c_s2
                    };
                    let pred_planes = rows_to_planes(&pred_rows, channels, hw);
                    preds.push((k, pred_planes, cache));
                }
                let items: Vec<ForecastTarget> = preds
                    .iter()
                    .map(|(k, planes, _)| {
                        let step = &input.merged[*k];
                        let acq = input.acq(step);
                        ForecastTarget {
                            merged_index: *k,
                            modality: step.modality,
                            channels: if step.modality == 1 {
                                self.cfg.c_s1
                            } else {
                                self.cfg.c_s2
                            },
                            pred: planes,
                            target: &acq.image,
                            valid: &acq.valid,
                            cloud: acq.cloud.as_deref(),
                        }
                    })
                    .collect();
                let mse = masked_mse_loss(&items, params.n_after, params.w_s2);
                Ok((
                    LossOutput {
                        loss: mse.loss,
                        mse: Some(mse),
                        focal: None,
                    },
                    ModelCache {
                        backbone: backbone_cache,
                        forecast: preds,
                        seg_logits: Vec::new(),
                        y_rows: out.y_rows,
                    },
                ))
            }
            Task::Segmentation => {
                let head = self.seg_head.as_ref().expect("segmentation model has a head");
                let mut seg_logits = Vec::new();
                for (idx, _) in &input.labels {
                    let logits = head.forward(&self.store, &out.y_rows[*idx], hw);
                    seg_logits.push((*idx, logits));
                }
                let items: Vec<SegTarget> = seg_logits
                    .iter()
                    .zip(input.labels.iter())
                    .map(|((_, logits), (_, labels))| SegTarget {
                        logits,
                        labels,
                    })
                    .collect();
                let focal = focal_loss(&items, params.focal_alpha, params.focal_gamma);
                Ok((
                    LossOutput {
                        loss: focal.loss,
                        mse: None,
                        focal: Some(focal),
                    },
                    ModelCache {
                        backbone: backbone_cache,
                        forecast: Vec::new(),
                        seg_logits,
                        y_rows: out.y_rows,
                    },
                ))
            }
        }
    }

    /// Accumulate gradients of the loss into `grads`; `scale` multiplies the
    /// loss (e.g. 1/batch for batch averaging).
    pub fn backward_loss(
        &self,
        input: &ModelInput,
        params: &LossParams,
        cache: &ModelCache,
        scale: f64,
        grads: &mut GradBuf,
    ) {
        let hw = input.h * input.w;
        let t = input.merged.len();
        let mut g_y_rows: Vec<Vec<f64>> = vec![Vec::new(); t];
        match self.cfg.task {
            Task::Forecast => {
                let forecaster = self.forecaster.as_ref().unwrap();
                let items: Vec<ForecastTarget> = cache
                    .forecast
                    .iter()
                    .map(|(k, planes, _)| {
                        let step = &input.merged[*k];
                        let acq = input.acq(step);
                        ForecastTarget {
                            merged_index: *k,
                            modality: step.modality,
                            channels: if step.modality == 1 {
                                self.cfg.c_s1
                            } else {
                                self.cfg.c_s2
                            },
                            pred: planes,
                            target: &acq.image,
                            valid: &acq.valid,
                            cloud: acq.cloud.as_deref(),
                        }
                    })
                    .collect();
                let g_preds = masked_mse_grad(&items, params.n_after, params.w_s2);
                for ((k, _, fc_cache), g_planes) in cache.forecast.iter().zip(g_preds.iter()) {
                    let step = &input.merged[*k];
                    let channels = if step.modality == 1 {
                        self.cfg.c_s1
                    } else {
                        self.cfg.c_s2
                    };
                    let mut g_rows = planes_to_rows(g_planes, channels, hw);
                    for v in g_rows.iter_mut() {
                        *v *= scale;
                    }
                    let g_y = forecaster.backward(&self.store, fc_cache, &g_rows, grads);
                    let dst = &mut g_y_rows[*k - 1];
                    if dst.is_empty() {
                        *dst = g_y;
                    } else {
                        for (d, s) in dst.iter_mut().zip(g_y.iter()) {
                            *d += s;
                        }
                    }
                }
            }
            Task::Segmentation => {
                let head = self.seg_head.as_ref().unwrap();
                let items: Vec<SegTarget> = cache
                    .seg_logits
                    .iter()
                    .zip(input.labels.iter())
                    .map(|((_, logits), (_, labels))| SegTarget {
                        logits,
                        labels,
                    })
                    .collect();
                let g_logits = focal_grad(&items, params.focal_alpha, params.focal_gamma);
                for (((idx, _), g_l), (_, _labels)) in cache
                    .seg_logits
                    .iter()
                    .zip(g_logits.iter())
                    .zip(input.labels.iter())
                {
                    let mut g = g_l.clone();
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                    let mut g_y = vec![0.0; hw * self.cfg.d_model];
                    head.backward(
                        &self.store,
                        &cache.y_rows[*idx],
                        &g,
                        hw,
                        grads,
                        &mut g_y,
                    );
                    let dst = &mut g_y_rows[*idx];
                    if dst.is_empty() {
                        *dst = g_y;
                    } else {
                        for (d, s) in dst.iter_mut().zip(g_y.iter()) {
                            *d += s;
                        }
                    }
                }
            }
        }
        self.backbone_backward(input, &cache.backbone, &g_y_rows, grads);
    }
}
