//! The multi-modal backbone: per-modality spatial encoders, date/modality
//! token assembly, temporal fusion layers wrapping a mixer, and pixel-shuffle
//! upsampling back to full resolution.
//!
//! Spatial mixing happens only in the spatial encoder and the pixel shuffle;
//! the fusion stack processes each of the (H/2)x(W/2) pixel sequences
//! independently.

use crate::error::{Error, Result};
use crate::mixers::{
    mix_parallel_batch, mix_step, mixer_backward, MixerCache, MixerConfig, MixerWeights,
    RecurrentState,
};
use crate::nn::{
    gelu_backward, gelu_forward, maxpool2, maxpool2_backward, upsample2, upsample2_backward,
    Conv1x1, Conv3x3, LayerNorm, LayerNormCache, Linear,
};
use crate::params::{GradBuf, ParamStore};
use crate::rng::Rng;

/// Width of the absolute date encoding concatenated into each token.
pub const DATE_PE_DIM: usize = 32;
/// Width of the learnable modality embedding concatenated into each token.
pub const MODALITY_DIM: usize = 16;

/// Sinusoidal encoding of an absolute date (days since epoch): interleaved
/// [sin(tau f_k), cos(tau f_k)] with f_k = 10000^(-2k / (dim/2)), spanning
/// rates from 1 down to 1/10000.
pub fn date_pe(tau: f64, dim: usize) -> Vec<f64> {
    debug_assert!(dim % 2 == 0, "date encoding width must be even");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let exponent = if half > 1 { -2.0 * k as f64 / half as f64 } else { 0.0 };
        let freq = 10000f64.powf(exponent);
        let (s, c) = (tau * freq).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
    out
}

// ---------------------------------------------------------------------------
// Spatial encoder: U-Net with four down blocks and three up blocks, so the
// output sits at half the input resolution.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SseConfig {
    pub in_channels: usize,
    /// Block widths are base_width * (1, 2, 3, 4) at depths 1-4.
    pub base_width: usize,
    pub d_model: usize,
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv1: Conv3x3,
    conv2: Conv3x3,
}

impl ConvBlock {
    fn init(store: &mut ParamStore, rng: &mut Rng, prefix: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            conv1: Conv3x3::init(store, rng, &format!("{prefix}.conv1"), c_in, c_out),
            conv2: Conv3x3::init(store, rng, &format!("{prefix}.conv2"), c_out, c_out),
        }
    }

    fn forward(&self, store: &ParamStore, x: &[f64], h: usize, w: usize) -> (Vec<f64>, ConvBlockCache) {
        let mut a = self.conv1.forward(store, x, h, w);
        let pre1 = gelu_forward(&mut a);
        let mid = a.clone();
        let mut b = self.conv2.forward(store, &a, h, w);
        let pre2 = gelu_forward(&mut b);
        (
            b,
            ConvBlockCache {
                input: x.to_vec(),
                pre1,
                mid,
                pre2,
                h,
                w,
            },
        )
    }

    fn backward(
        &self,
        store: &ParamStore,
        cache: &ConvBlockCache,
        g_y: &[f64],
        grads: &mut GradBuf,
    ) -> Vec<f64> {
        let (h, w) = (cache.h, cache.w);
        let mut g_pre2 = vec![0.0; cache.pre2.len()];
        gelu_backward(&cache.pre2, g_y, &mut g_pre2);
        let mut g_mid = vec![0.0; cache.mid.len()];
        self.conv2
            .backward(store, &cache.mid, &g_pre2, h, w, grads, &mut g_mid);
        let mut g_pre1 = vec![0.0; cache.pre1.len()];
        gelu_backward(&cache.pre1, &g_mid, &mut g_pre1);
        let mut g_x = vec![0.0; cache.input.len()];
        self.conv1
            .backward(store, &cache.input, &g_pre1, h, w, grads, &mut g_x);
        g_x
    }
}

struct ConvBlockCache {
    input: Vec<f64>,
    pre1: Vec<f64>,
    mid: Vec<f64>,
    pre2: Vec<f64>,
    h: usize,
    w: usize,
}

/// Modality-specific spectral-spatial encoder.
#[derive(Debug, Clone)]
pub struct SseEncoder {
    pub cfg: SseConfig,
    down: Vec<ConvBlock>,
    up: Vec<ConvBlock>,
    final_proj: Conv1x1,
}

pub struct SseCache {
    down: Vec<ConvBlockCache>,
    pool_args: Vec<Vec<u32>>,
    up: Vec<ConvBlockCache>,
    final_input: Vec<f64>,
    h: usize,
    w: usize,
}

impl SseEncoder {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, prefix: &str, cfg: SseConfig) -> Self {
        let w = |d: usize| cfg.base_width * (d + 1);
        let mut down = Vec::new();
        let mut c_in = cfg.in_channels;
        for d in 0..4 {
            down.push(ConvBlock::init(
                store,
                rng,
                &format!("{prefix}.down{d}"),
                c_in,
                w(d),
            ));
            c_in = w(d);
        }
        // up block u consumes upsampled features plus the skip from depth 3-u
        let mut up = Vec::new();
        let mut c_prev = w(3);
        for u in 0..3 {
            let skip = w(3 - u);
            let c_out = w(2 - u);
            up.push(ConvBlock::init(
                store,
                rng,
                &format!("{prefix}.up{u}"),
                c_prev + skip,
                c_out,
            ));
            c_prev = c_out;
        }
        let final_proj = Conv1x1::init(store, rng, &format!("{prefix}.out"), w(0), cfg.d_model);
        Self {
            cfg,
            down,
            up,
            final_proj,
        }
    }

    /// C x H x W image -> d_model x H/2 x W/2 features.
    pub fn forward(&self, store: &ParamStore, image: &[f64], h: usize, w: usize) -> Result<(Vec<f64>, SseCache)> {
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Dimension(format!(
                "spatial dims must be divisible by 16, got {h}x{w}"
            )));
        }
        if image.len() != self.cfg.in_channels * h * w {
            return Err(Error::Dimension(format!(
                "image has {} values, expected {}x{h}x{w}",
                image.len(),
                self.cfg.in_channels
            )));
        }
        let width = |d: usize| self.cfg.base_width * (d + 1);
        let mut down_caches = Vec::new();
        let mut pool_args = Vec::new();
        let mut skips: Vec<Vec<f64>> = Vec::new();
        let mut cur = image.to_vec();
        let (mut ch, mut cw) = (h, w);
        for (d, block) in self.down.iter().enumerate() {
            let (feat, cache) = block.forward(store, &cur, ch, cw);
            down_caches.push(cache);
            skips.push(feat.clone());
            let (pooled, arg) = maxpool2(&feat, width(d), ch, cw);
            pool_args.push(arg);
            cur = pooled;
            ch /= 2;
            cw /= 2;
        }
        let mut up_caches = Vec::new();
        let mut c_prev = width(3);
        for (u, block) in self.up.iter().enumerate() {
            let upsampled = upsample2(&cur, c_prev, ch, cw);
            ch *= 2;
            cw *= 2;
            let skip = &skips[3 - u];
            let mut cat = Vec::with_capacity((c_prev + width(3 - u)) * ch * cw);
            cat.extend_from_slice(&upsampled);
            cat.extend_from_slice(skip);
            let (feat, cache) = block.forward(store, &cat, ch, cw);
            up_caches.push(cache);
            cur = feat;
            c_prev = width(2 - u);
        }
        let final_input = cur.clone();
        let out = self.final_proj.forward(store, &cur, ch * cw);
        Ok((
            out,
            SseCache {
                down: down_caches,
                pool_args,
                up: up_caches,
                final_input,
                h,
                w,
            },
        ))
    }

    /// Backward from feature gradients; image gradients are discarded
    /// (images are data, not parameters).
    pub fn backward(&self, store: &ParamStore, cache: &SseCache, g_y: &[f64], grads: &mut GradBuf) {
        let width = |d: usize| self.cfg.base_width * (d + 1);
        let (h2, w2) = (cache.h / 2, cache.w / 2);
        let mut g_cur = vec![0.0; cache.final_input.len()];
        self.final_proj
            .backward(store, &cache.final_input, g_y, h2 * w2, grads, &mut g_cur);
        // up blocks in reverse; skip gradients are deferred to the down pass
        let mut g_skips: Vec<Vec<f64>> = (0..4)
            .map(|d| {
                let rh = cache.h >> d;
                let rw = cache.w >> d;
                vec![0.0; width(d) * rh * rw]
            })
            .collect();
        for u in (0..3).rev() {
            let g_cat = self.up[u].backward(store, &cache.up[u], &g_cur, grads);
            let c_prev = if u == 0 { width(3) } else { width(3 - u) };
            let up_h = cache.up[u].h;
            let up_w = cache.up[u].w;
            let n_up = c_prev * up_h * up_w;
            let (g_up, g_skip) = g_cat.split_at(n_up);
            for (dst, src) in g_skips[3 - u].iter_mut().zip(g_skip.iter()) {
                *dst += src;
            }
            let mut g_small = vec![0.0; c_prev * (up_h / 2) * (up_w / 2)];
            upsample2_backward(g_up, c_prev, up_h / 2, up_w / 2, &mut g_small);
            g_cur = g_small;
        }
        // down blocks in reverse: g_cur holds the pooled-output gradient
        for d in (0..4).rev() {
            let rh = cache.h >> d;
            let rw = cache.w >> d;
            let mut g_feat = vec![0.0; width(d) * rh * rw];
            maxpool2_backward(&g_cur, &cache.pool_args[d], width(d), rh, rw, &mut g_feat);
            for (dst, src) in g_feat.iter_mut().zip(g_skips[d].iter()) {
                *dst += src;
            }
            g_cur = self.down[d].backward(store, &cache.down[d], &g_feat, grads);
        }
    }
}

// ---------------------------------------------------------------------------
// Token assembly
// ---------------------------------------------------------------------------

/// One merged acquisition in chronological order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergedStep {
    /// 1 = S1, 2 = S2.
    pub modality: u8,
    /// Index within the modality's own acquisition list.
    pub source_index: usize,
    pub date: f64,
}

/// Merge two date-sorted modality lists chronologically; S2 wins ties.
pub fn merge_steps(s1_dates: &[f64], s2_dates: &[f64]) -> Result<Vec<MergedStep>> {
    for dates in [s1_dates, s2_dates] {
        if dates.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Causality(
                "acquisition dates must be strictly increasing per modality".into(),
            ));
        }
    }
    let mut merged = Vec::with_capacity(s1_dates.len() + s2_dates.len());
    let (mut i1, mut i2) = (0, 0);
    while i1 < s1_dates.len() || i2 < s2_dates.len() {
        let take_s2 = match (s1_dates.get(i1), s2_dates.get(i2)) {
            (Some(&d1), Some(&d2)) => d2 <= d1,
            (None, Some(_)) => true,
            (Some(_), None) => false,
            (None, None) => unreachable!(),
        };
        if take_s2 {
            merged.push(MergedStep {
                modality: 2,
                source_index: i2,
                date: s2_dates[i2],
            });
            i2 += 1;
        } else {
            merged.push(MergedStep {
                modality: 1,
                source_index: i1,
                date: s1_dates[i1],
            });
            i1 += 1;
        }
    }
    Ok(merged)
}

/// Projects [feature; date encoding; modality embedding] back to d_model.
#[derive(Debug, Clone)]
pub struct TokenAssembler {
    pub proj: Linear,
    pub mod_embed: crate::params::Slot,
    pub d_model: usize,
}

pub struct AssembledTokens {
    /// (pixels * T) x d_model, pixel-major.
    pub x: Vec<f64>,
    /// Days since the earliest merged acquisition.
    pub positions: Vec<f64>,
    pub steps: Vec<MergedStep>,
    pub pixels: usize,
}

pub struct AssembleCache {
    /// Concatenated projection inputs, (pixels * T) x (d_model + PE + MOD).
    concat: Vec<f64>,
    steps: Vec<MergedStep>,
    t: usize,
    pixels: usize,
}

impl TokenAssembler {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, prefix: &str, d_model: usize) -> Self {
        let d_in = d_model + DATE_PE_DIM + MODALITY_DIM;
        let proj = Linear::init(store, rng, &format!("{prefix}.proj"), d_in, d_model, true);
        let bound = 1.0 / (MODALITY_DIM as f64).sqrt();
        let mod_embed =
            store.alloc_uniform(&format!("{prefix}.modality"), 2 * MODALITY_DIM, bound, rng);
        Self {
            proj,
            mod_embed,
            d_model,
        }
    }

    /// `feats` holds one d_model x pixels feature map per merged step
    /// (channel-major). Dates in `steps` are absolute days; the date encoding
    /// is anchored to the first merged acquisition so that token features do
    /// not depend on the series' absolute start.
    pub fn forward(
        &self,
        store: &ParamStore,
        feats: &[Vec<f64>],
        steps: &[MergedStep],
        pixels: usize,
    ) -> (AssembledTokens, AssembleCache) {
        let t = steps.len();
        let dm = self.d_model;
        let d_in = dm + DATE_PE_DIM + MODALITY_DIM;
        let mod_embed = store.get(self.mod_embed);
        let first = steps.first().map(|s| s.date).unwrap_or(0.0);
        let mut concat = vec![0.0; pixels * t * d_in];
        for (ti, step) in steps.iter().enumerate() {
            let pe = date_pe(step.date - first, DATE_PE_DIM);
            let emb = match step.modality {
                1 => &mod_embed[..MODALITY_DIM],
                _ => &mod_embed[MODALITY_DIM..],
            };
            for px in 0..pixels {
                let row = &mut concat[(px * t + ti) * d_in..(px * t + ti + 1) * d_in];
                for c in 0..dm {
                    row[c] = feats[ti][c * pixels + px];
                }
                row[dm..dm + DATE_PE_DIM].copy_from_slice(&pe);
                row[dm + DATE_PE_DIM..].copy_from_slice(emb);
            }
        }
        let x = self.proj.forward(store, &concat, pixels * t);
        (
            AssembledTokens {
                x,
                positions: steps.iter().map(|s| s.date - first).collect(),
                steps: steps.to_vec(),
                pixels,
            },
            AssembleCache {
                concat,
                steps: steps.to_vec(),
                t,
                pixels,
            },
        )
    }

    /// Single-step assembly for streaming: one feature map at `date_rel`
    /// days since the stream's first acquisition (the batch path anchors its
    /// encodings the same way).
    pub fn forward_single(
        &self,
        store: &ParamStore,
        feat: &[f64],
        modality: u8,
        date_rel: f64,
        pixels: usize,
    ) -> Vec<f64> {
        let dm = self.d_model;
        let d_in = dm + DATE_PE_DIM + MODALITY_DIM;
        let mod_embed = store.get(self.mod_embed);
        let pe = date_pe(date_rel, DATE_PE_DIM);
        let emb = match modality {
            1 => &mod_embed[..MODALITY_DIM],
            _ => &mod_embed[MODALITY_DIM..],
        };
        let mut concat = vec![0.0; pixels * d_in];
        for px in 0..pixels {
            let row = &mut concat[px * d_in..(px + 1) * d_in];
            for c in 0..dm {
                row[c] = feat[c * pixels + px];
            }
            row[dm..dm + DATE_PE_DIM].copy_from_slice(&pe);
            row[dm + DATE_PE_DIM..].copy_from_slice(emb);
        }
        self.proj.forward(store, &concat, pixels)
    }

    /// Returns per-step gradients on the input feature maps
    /// (d_model x pixels each); embedding and projection gradients are
    /// accumulated into `grads`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &AssembleCache,
        g_x: &[f64],
        grads: &mut GradBuf,
    ) -> Vec<Vec<f64>> {
        let dm = self.d_model;
        let d_in = dm + DATE_PE_DIM + MODALITY_DIM;
        let rows = cache.pixels * cache.t;
        let mut g_concat = vec![0.0; rows * d_in];
        self.proj
            .backward(store, &cache.concat, g_x, rows, grads, &mut g_concat);
        let mut g_feats = vec![vec![0.0; dm * cache.pixels]; cache.t];
        for px in 0..cache.pixels {
            for (ti, step) in cache.steps.iter().enumerate() {
                let row = &g_concat[(px * cache.t + ti) * d_in..(px * cache.t + ti + 1) * d_in];
                for c in 0..dm {
                    g_feats[ti][c * cache.pixels + px] += row[c];
                }
                let base = if step.modality == 1 { 0 } else { MODALITY_DIM };
                for c in 0..MODALITY_DIM {
                    grads.get_mut(self.mod_embed)[base + c] += row[dm + DATE_PE_DIM + c];
                }
            }
        }
        g_feats
    }
}

// ---------------------------------------------------------------------------
// Fusion stack
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub ln1: LayerNorm,
    pub mixer: MixerWeights,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone)]
pub struct FusionStack {
    pub mixer_cfg: MixerConfig,
    pub layers: Vec<FusionLayer>,
}

pub struct FusionLayerCache {
    ln1: LayerNormCache,
    mixer: MixerCache,
    ln2: LayerNormCache,
    ln2_out: Vec<f64>,
    ff_pre: Vec<f64>,
    ff_hidden: Vec<f64>,
}

pub struct FusionCache {
    layers: Vec<FusionLayerCache>,
    rows: usize,
}

impl FusionStack {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        mixer_cfg: MixerConfig,
        n_layers: usize,
    ) -> Self {
        let dm = mixer_cfg.d_model;
        let hidden = 4 * dm;
        let layers = (0..n_layers)
            .map(|l| FusionLayer {
                ln1: LayerNorm::init(store, &format!("{prefix}.layer{l}.ln1"), dm),
                mixer: MixerWeights::init(
                    &mixer_cfg,
                    store,
                    rng,
                    &format!("{prefix}.layer{l}.mixer"),
                ),
                ln2: LayerNorm::init(store, &format!("{prefix}.layer{l}.ln2"), dm),
                ff1: Linear::init(store, rng, &format!("{prefix}.layer{l}.ff1"), dm, hidden, true),
                ff2: Linear::init(store, rng, &format!("{prefix}.layer{l}.ff2"), hidden, dm, true),
            })
            .collect();
        Self { mixer_cfg, layers }
    }

    /// Pre-norm residual blocks over (pixels * T) x d_model token rows.
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &[f64],
        pixels: usize,
        positions: &[f64],
    ) -> Result<(Vec<f64>, FusionCache)> {
        let rows = pixels * positions.len();
        let mut cur = x.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (a, ln1_cache) = layer.ln1.forward(store, &cur, rows);
            let (m, mixer_cache) =
                mix_parallel_batch(&self.mixer_cfg, &layer.mixer, store, &a, pixels, positions)?;
            for i in 0..cur.len() {
                cur[i] += m[i];
            }
            let (bn, ln2_cache) = layer.ln2.forward(store, &cur, rows);
            let mut hidden = layer.ff1.forward(store, &bn, rows);
            let ff_pre = gelu_forward(&mut hidden);
            let f = layer.ff2.forward(store, &hidden, rows);
            for i in 0..cur.len() {
                cur[i] += f[i];
            }
            caches.push(FusionLayerCache {
                ln1: ln1_cache,
                mixer: mixer_cache,
                ln2: ln2_cache,
                ln2_out: bn,
                ff_pre,
                ff_hidden: hidden,
            });
        }
        Ok((
            cur,
            FusionCache {
                layers: caches,
                rows,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &FusionCache,
        g_y: &[f64],
        grads: &mut GradBuf,
    ) -> Vec<f64> {
        let rows = cache.rows;
        let dm = self.mixer_cfg.d_model;
        let mut g_cur = g_y.to_vec();
        for (layer, lc) in self.layers.iter().zip(cache.layers.iter()).rev() {
            // feed-forward sublayer
            let mut g_hidden = vec![0.0; lc.ff_hidden.len()];
            layer
                .ff2
                .backward(store, &lc.ff_hidden, &g_cur, rows, grads, &mut g_hidden);
            let mut g_ff_pre = vec![0.0; lc.ff_pre.len()];
            gelu_backward(&lc.ff_pre, &g_hidden, &mut g_ff_pre);
            let mut g_bn = vec![0.0; rows * dm];
            layer
                .ff1
                .backward(store, &lc.ln2_out, &g_ff_pre, rows, grads, &mut g_bn);
            let mut g_mid = vec![0.0; rows * dm];
            layer
                .ln2
                .backward(store, &lc.ln2, &g_bn, rows, grads, &mut g_mid);
            for i in 0..g_mid.len() {
                g_mid[i] += g_cur[i]; // residual
            }
            // mixer sublayer
            let mut g_a = vec![0.0; rows * dm];
            mixer_backward(
                &self.mixer_cfg,
                &layer.mixer,
                store,
                &lc.mixer,
                &g_mid,
                grads,
                &mut g_a,
            );
            let mut g_input = vec![0.0; rows * dm];
            layer
                .ln1
                .backward(store, &lc.ln1, &g_a, rows, grads, &mut g_input);
            for i in 0..g_input.len() {
                g_input[i] += g_mid[i]; // residual
            }
            g_cur = g_input;
        }
        g_cur
    }

    /// One streaming timestep over all pixels; `states[layer][pixel]`.
    pub fn step(
        &self,
        store: &ParamStore,
        x: &[f64],
        pixels: usize,
        position: f64,
        states: &mut [Vec<RecurrentState>],
    ) -> Result<Vec<f64>> {
        let dm = self.mixer_cfg.d_model;
        let mut cur = x.to_vec();
        for (layer, layer_states) in self.layers.iter().zip(states.iter_mut()) {
            let (a, _) = layer.ln1.forward(store, &cur, pixels);
            for px in 0..pixels {
                let o = mix_step(
                    &self.mixer_cfg,
                    &layer.mixer,
                    store,
                    &mut layer_states[px],
                    &a[px * dm..(px + 1) * dm],
                    position,
                )?;
                for c in 0..dm {
                    cur[px * dm + c] += o[c];
                }
            }
            let (bn, _) = layer.ln2.forward(store, &cur, pixels);
            let mut hidden = layer.ff1.forward(store, &bn, pixels);
            gelu_forward(&mut hidden);
            let f = layer.ff2.forward(store, &hidden, pixels);
            for i in 0..cur.len() {
                cur[i] += f[i];
            }
        }
        Ok(cur)
    }
}

// ---------------------------------------------------------------------------
// Pixel shuffle upsampling
// ---------------------------------------------------------------------------

/// 1x1 convolution to 4 d_model channels, then depth-to-space with factor 2:
/// conv channel c = d*4 + 2*dy + dx lands on output channel d at subpixel
/// (dy, dx).
#[derive(Debug, Clone)]
pub struct PixelShuffleUp {
    pub proj: Conv1x1,
    pub d_model: usize,
}

pub struct PixelShuffleCache {
    input: Vec<f64>,
    h2: usize,
    w2: usize,
}

impl PixelShuffleUp {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, prefix: &str, d_model: usize) -> Self {
        let proj = Conv1x1::init(store, rng, &format!("{prefix}.proj"), d_model, 4 * d_model);
        Self { proj, d_model }
    }

    /// d_model x H/2 x W/2 -> d_model x H x W.
    pub fn forward(
        &self,
        store: &ParamStore,
        y: &[f64],
        h2: usize,
        w2: usize,
    ) -> (Vec<f64>, PixelShuffleCache) {
        let expanded = self.proj.forward(store, y, h2 * w2);
        let (h, w) = (h2 * 2, w2 * 2);
        let mut out = vec![0.0; self.d_model * h * w];
        for d in 0..self.d_model {
            for dy in 0..2 {
                for dx in 0..2 {
                    let c = d * 4 + 2 * dy + dx;
                    let src = &expanded[c * h2 * w2..(c + 1) * h2 * w2];
                    for yy in 0..h2 {
                        for xx in 0..w2 {
                            out[d * h * w + (2 * yy + dy) * w + 2 * xx + dx] = src[yy * w2 + xx];
                        }
                    }
                }
            }
        }
        (
            out,
            PixelShuffleCache {
                input: y.to_vec(),
                h2,
                w2,
            },
        )
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &PixelShuffleCache,
        g_out: &[f64],
        grads: &mut GradBuf,
    ) -> Vec<f64> {
        let (h2, w2) = (cache.h2, cache.w2);
        let (h, w) = (h2 * 2, w2 * 2);
        let mut g_expanded = vec![0.0; self.d_model * 4 * h2 * w2];
        for d in 0..self.d_model {
            for dy in 0..2 {
                for dx in 0..2 {
                    let c = d * 4 + 2 * dy + dx;
                    let dst = &mut g_expanded[c * h2 * w2..(c + 1) * h2 * w2];
                    for yy in 0..h2 {
                        for xx in 0..w2 {
                            dst[yy * w2 + xx] = g_out[d * h * w + (2 * yy + dy) * w + 2 * xx + dx];
                        }
                    }
                }
            }
        }
        let mut g_y = vec![0.0; cache.input.len()];
        self.proj
            .backward(store, &cache.input, &g_expanded, h2 * w2, grads, &mut g_y);
        g_y
    }
}
