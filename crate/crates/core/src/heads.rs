//! Task heads and losses: the per-pixel forecaster with rotary distance
//! conditioning and auxiliary encoders, the segmentation classifier, masked
//! MSE and focal losses.

use crate::error::{Error, Result};
use crate::featmaps::RotaryBasis;
use crate::linalg::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc};
use crate::nn::{gelu_backward, gelu_forward, softmax_rows, Linear};
use crate::params::{GradBuf, ParamStore, Slot};
use crate::rng::Rng;

/// Weather window length in days (n_w).
pub const N_WEATHER_DAYS: usize = 10;
/// Number of weather variables (d_w).
pub const N_WEATHER_VARS: usize = 8;
/// Learnable weather queries (n_q); flattened code length is n_q * d_w.
pub const N_WEATHER_QUERIES: usize = 4;
/// Weather key width (d_Kw).
pub const WEATHER_KEY_DIM: usize = 8;
/// Angle code width (d_a); the S2 placeholder matches it.
pub const ANGLE_DIM: usize = 16;
/// Forecaster modality embedding width.
pub const FORECAST_MOD_DIM: usize = 16;

pub const WEATHER_CODE_DIM: usize = N_WEATHER_QUERIES * N_WEATHER_VARS;
pub const AUX_DIM: usize = FORECAST_MOD_DIM + WEATHER_CODE_DIM + ANGLE_DIM;

// ---------------------------------------------------------------------------
// Auxiliary encoders
// ---------------------------------------------------------------------------

/// Cross-attention over the weather window with learnable queries:
/// softmax(Q (W W_K)^T / d_Kw) W W_V, flattened row-major.
#[derive(Debug, Clone)]
pub struct WeatherEncoder {
    pub queries: Slot,
    pub w_k: Slot,
    pub w_v: Slot,
}

pub struct WeatherCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    attn: Vec<f64>,
    input: Vec<f64>,
}

impl WeatherEncoder {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, prefix: &str) -> Self {
        let qb = 1.0 / (WEATHER_KEY_DIM as f64).sqrt();
        let kb = 1.0 / (N_WEATHER_VARS as f64).sqrt();
        Self {
            queries: store.alloc_uniform(
                &format!("{prefix}.queries"),
                N_WEATHER_QUERIES * WEATHER_KEY_DIM,
                qb,
                rng,
            ),
            w_k: store.alloc_uniform(
                &format!("{prefix}.w_k"),
                N_WEATHER_VARS * WEATHER_KEY_DIM,
                kb,
                rng,
            ),
            w_v: store.alloc_uniform(
                &format!("{prefix}.w_v"),
                N_WEATHER_VARS * N_WEATHER_VARS,
                kb,
                rng,
            ),
        }
    }

    /// `weather` is n_w x d_w row-major.
    pub fn forward(&self, store: &ParamStore, weather: &[f64]) -> Result<(Vec<f64>, WeatherCache)> {
        if weather.len() != N_WEATHER_DAYS * N_WEATHER_VARS {
            return Err(Error::Dimension(format!(
                "weather window has {} values, expected {}x{}",
                weather.len(),
                N_WEATHER_DAYS,
                N_WEATHER_VARS
            )));
        }
        if !weather.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("weather values must be finite".into()));
        }
        let mut keys = vec![0.0; N_WEATHER_DAYS * WEATHER_KEY_DIM];
        gemm_acc(
            &mut keys,
            weather,
            store.get(self.w_k),
            N_WEATHER_DAYS,
            N_WEATHER_VARS,
            WEATHER_KEY_DIM,
        );
        let mut values = vec![0.0; N_WEATHER_DAYS * N_WEATHER_VARS];
        gemm_acc(
            &mut values,
            weather,
            store.get(self.w_v),
            N_WEATHER_DAYS,
            N_WEATHER_VARS,
            N_WEATHER_VARS,
        );
        // logits scaled by 1/d_Kw
        let mut attn = vec![0.0; N_WEATHER_QUERIES * N_WEATHER_DAYS];
        gemm_a_bt_acc(
            &mut attn,
            store.get(self.queries),
            &keys,
            N_WEATHER_QUERIES,
            WEATHER_KEY_DIM,
            N_WEATHER_DAYS,
        );
        for v in attn.iter_mut() {
            *v /= WEATHER_KEY_DIM as f64;
        }
        softmax_rows(&mut attn, N_WEATHER_DAYS);
        let mut out = vec![0.0; N_WEATHER_QUERIES * N_WEATHER_VARS];
        gemm_acc(
            &mut out,
            &attn,
            &values,
            N_WEATHER_QUERIES,
            N_WEATHER_DAYS,
            N_WEATHER_VARS,
        );
        Ok((
            out,
            WeatherCache {
                keys,
                values,
                attn,
                input: weather.to_vec(),
            },
        ))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &WeatherCache,
        g_out: &[f64],
        grads: &mut GradBuf,
    ) {
        // out = A V
        let mut g_attn = vec![0.0; N_WEATHER_QUERIES * N_WEATHER_DAYS];
        gemm_a_bt_acc(
            &mut g_attn,
            g_out,
            &cache.values,
            N_WEATHER_QUERIES,
            N_WEATHER_VARS,
            N_WEATHER_DAYS,
        );
        let mut g_values = vec![0.0; N_WEATHER_DAYS * N_WEATHER_VARS];
        gemm_at_b_acc(
            &mut g_values,
            &cache.attn,
            g_out,
            N_WEATHER_QUERIES,
            N_WEATHER_DAYS,
            N_WEATHER_VARS,
        );
        // softmax backward per query row
        let mut g_logits = vec![0.0; g_attn.len()];
        for qi in 0..N_WEATHER_QUERIES {
            let a = &cache.attn[qi * N_WEATHER_DAYS..(qi + 1) * N_WEATHER_DAYS];
            let ga = &g_attn[qi * N_WEATHER_DAYS..(qi + 1) * N_WEATHER_DAYS];
            let dot: f64 = a.iter().zip(ga.iter()).map(|(x, y)| x * y).sum();
            for j in 0..N_WEATHER_DAYS {
                g_logits[qi * N_WEATHER_DAYS + j] =
                    a[j] * (ga[j] - dot) / WEATHER_KEY_DIM as f64;
            }
        }
        // logits = Q K^T
        gemm_acc(
            grads.get_mut(self.queries),
            &g_logits,
            &cache.keys,
            N_WEATHER_QUERIES,
            N_WEATHER_DAYS,
            WEATHER_KEY_DIM,
        );
        let mut g_keys = vec![0.0; N_WEATHER_DAYS * WEATHER_KEY_DIM];
        gemm_at_b_acc(
            &mut g_keys,
            &g_logits,
            store.get(self.queries),
            N_WEATHER_QUERIES,
            N_WEATHER_DAYS,
            WEATHER_KEY_DIM,
        );
        gemm_at_b_acc(
            grads.get_mut(self.w_k),
            &cache.input,
            &g_keys,
            N_WEATHER_DAYS,
            N_WEATHER_VARS,
            WEATHER_KEY_DIM,
        );
        gemm_at_b_acc(
            grads.get_mut(self.w_v),
            &cache.input,
            &g_values,
            N_WEATHER_DAYS,
            N_WEATHER_VARS,
            N_WEATHER_VARS,
        );
    }
}

/// Linear encoding of S1 azimuth/incidence angles: [cos phi, sin phi,
/// cos theta * sin theta] -> d_a, bias-free.
#[derive(Debug, Clone)]
pub struct AngleEncoder {
    pub lin: Linear,
}

impl AngleEncoder {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, prefix: &str) -> Self {
        Self {
            lin: Linear::init(store, rng, prefix, 3, ANGLE_DIM, false),
        }
    }

    pub fn features(phi: f64, theta: f64) -> [f64; 3] {
        [phi.cos(), phi.sin(), theta.cos() * theta.sin()]
    }

    pub fn forward(&self, store: &ParamStore, phi: f64, theta: f64) -> Result<Vec<f64>> {
        if !phi.is_finite() || !theta.is_finite() {
            return Err(Error::InvalidInput("angles must be finite".into()));
        }
        Ok(self.lin.forward(store, &Self::features(phi, theta), 1))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        phi: f64,
        theta: f64,
        g_out: &[f64],
        grads: &mut GradBuf,
    ) {
        let mut g_in = [0.0; 3];
        self.lin
            .backward(store, &Self::features(phi, theta), g_out, 1, grads, &mut g_in);
    }
}

// ---------------------------------------------------------------------------
// Forecaster
// ---------------------------------------------------------------------------

/// Auxiliary conditioning for one forecast target.
#[derive(Debug, Clone)]
pub struct ForecastAux {
    /// 1 = S1, 2 = S2 (the modality being predicted).
    pub modality: u8,
    /// Days between the source acquisition and the target.
    pub delta: f64,
    /// n_w x d_w weather window preceding the target date.
    pub weather: Vec<f64>,
    /// (azimuth, incidence) in radians; S1 targets only.
    pub angles: Option<(f64, f64)>,
}

/// Per-pixel forecaster: rotary-rotated backbone features concatenated with
/// the shared auxiliary code, a 2-hidden-layer MLP, then a modality head.
#[derive(Debug, Clone)]
pub struct Forecaster {
    pub d_model: usize,
    pub c_s1: usize,
    pub c_s2: usize,
    pub rotary: RotaryBasis,
    pub mod_embed: Slot,
    pub s2_angle_placeholder: Slot,
    pub weather: WeatherEncoder,
    pub angles: AngleEncoder,
    /// First MLP layer split into the per-pixel feature part and the shared
    /// auxiliary part; their sum equals one linear layer over the concat.
    pub mlp1_y: Linear,
    pub mlp1_aux: Linear,
    pub mlp2: Linear,
    pub head_s1: Linear,
    pub head_s2: Linear,
}

pub struct ForecastCache {
    rope_y: Vec<f64>,
    aux_vec: Vec<f64>,
    weather_cache: WeatherCache,
    pre1: Vec<f64>,
    h1: Vec<f64>,
    pre2: Vec<f64>,
    h2: Vec<f64>,
    delta: f64,
    modality: u8,
    angles: Option<(f64, f64)>,
    pixels: usize,
}

impl Forecaster {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        d_model: usize,
        c_s1: usize,
        c_s2: usize,
    ) -> Result<Self> {
        let hidden = 2 * d_model;
        let bound = 1.0 / (FORECAST_MOD_DIM as f64).sqrt();
        Ok(Self {
            d_model,
            c_s1,
            c_s2,
            rotary: RotaryBasis::new(d_model)?,
            mod_embed: store.alloc_uniform(
                &format!("{prefix}.modality"),
                2 * FORECAST_MOD_DIM,
                bound,
                rng,
            ),
            s2_angle_placeholder: store.alloc_uniform(
                &format!("{prefix}.s2_angles"),
                ANGLE_DIM,
                bound,
                rng,
            ),
            weather: WeatherEncoder::init(store, rng, &format!("{prefix}.weather")),
            angles: AngleEncoder::init(store, rng, &format!("{prefix}.angle")),
            mlp1_y: Linear::init(store, rng, &format!("{prefix}.mlp1_y"), d_model, hidden, true),
            mlp1_aux: Linear::init(store, rng, &format!("{prefix}.mlp1_aux"), AUX_DIM, hidden, false),
            mlp2: Linear::init(store, rng, &format!("{prefix}.mlp2"), hidden, hidden, true),
            head_s1: Linear::init(store, rng, &format!("{prefix}.head_s1"), hidden, c_s1, true),
            head_s2: Linear::init(store, rng, &format!("{prefix}.head_s2"), hidden, c_s2, true),
        })
    }

    /// Rotate feature pairs of `y` by delta * theta_k.
    pub fn rope_rows(&self, y: &[f64], pixels: usize, delta: f64) -> Vec<f64> {
        let dm = self.d_model;
        let mut out = vec![0.0; y.len()];
        let trig: Vec<(f64, f64)> = self
            .rotary
            .thetas()
            .iter()
            .map(|&th| (delta * th).sin_cos())
            .collect();
        for px in 0..pixels {
            let src = &y[px * dm..(px + 1) * dm];
            let dst = &mut out[px * dm..(px + 1) * dm];
            for (k, &(s, c)) in trig.iter().enumerate() {
                let a = src[2 * k];
                let b = src[2 * k + 1];
                dst[2 * k] = a * c - b * s;
                dst[2 * k + 1] = a * s + b * c;
            }
        }
        out
    }

    fn rope_rows_backward(&self, g: &[f64], pixels: usize, delta: f64) -> Vec<f64> {
        self.rope_rows(g, pixels, -delta)
    }

    /// Forecast one target from `y` (pixels x d_model rows, the backbone
    /// output at the source acquisition). Returns pixels x C_mod predictions.
    pub fn forward(
        &self,
        store: &ParamStore,
        y: &[f64],
        pixels: usize,
        aux: &ForecastAux,
    ) -> Result<(Vec<f64>, ForecastCache)> {
        if aux.delta <= 0.0 {
            return Err(Error::InvalidDelta(aux.delta));
        }
        if y.len() != pixels * self.d_model {
            return Err(Error::Dimension(format!(
                "forecaster input has {} values, expected {}x{}",
                y.len(),
                pixels,
                self.d_model
            )));
        }
        let rope_y = self.rope_rows(y, pixels, aux.delta);
        // shared auxiliary code: [modality embedding; weather code; angle code]
        let (wcode, weather_cache) = self.weather.forward(store, &aux.weather)?;
        let mut aux_vec = vec![0.0; AUX_DIM];
        let emb = store.get(self.mod_embed);
        let emb = match aux.modality {
            1 => &emb[..FORECAST_MOD_DIM],
            _ => &emb[FORECAST_MOD_DIM..],
        };
        aux_vec[..FORECAST_MOD_DIM].copy_from_slice(emb);
        aux_vec[FORECAST_MOD_DIM..FORECAST_MOD_DIM + WEATHER_CODE_DIM].copy_from_slice(&wcode);
        let angle_code = match (aux.modality, aux.angles) {
            (1, Some((phi, theta))) => self.angles.forward(store, phi, theta)?,
            (1, None) => {
                return Err(Error::InvalidInput(
                    "S1 forecast targets need azimuth/incidence angles".into(),
                ))
            }
            _ => store.get(self.s2_angle_placeholder).to_vec(),
        };
        aux_vec[FORECAST_MOD_DIM + WEATHER_CODE_DIM..].copy_from_slice(&angle_code);

        let hidden = 2 * self.d_model;
        let mut h1 = self.mlp1_y.forward(store, &rope_y, pixels);
        let aux_term = self.mlp1_aux.forward(store, &aux_vec, 1);
        for px in 0..pixels {
            for c in 0..hidden {
                h1[px * hidden + c] += aux_term[c];
            }
        }
        let pre1 = gelu_forward(&mut h1);
        let mut h2 = self.mlp2.forward(store, &h1, pixels);
        let pre2 = gelu_forward(&mut h2);
        let head = if aux.modality == 1 {
            &self.head_s1
        } else {
            &self.head_s2
        };
        let out = head.forward(store, &h2, pixels);
        Ok((
            out,
            ForecastCache {
                rope_y,
                aux_vec,
                weather_cache,
                pre1,
                h1,
                pre2,
                h2,
                delta: aux.delta,
                modality: aux.modality,
                angles: aux.angles,
                pixels,
            },
        ))
    }

    /// Returns the gradient on the source features `y` (pixels x d_model).
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ForecastCache,
        g_out: &[f64],
        grads: &mut GradBuf,
    ) -> Vec<f64> {
        let pixels = cache.pixels;
        let hidden = 2 * self.d_model;
        let head = if cache.modality == 1 {
            &self.head_s1
        } else {
            &self.head_s2
        };
        let mut g_h2 = vec![0.0; pixels * hidden];
        head.backward(store, &cache.h2, g_out, pixels, grads, &mut g_h2);
        let mut g_pre2 = vec![0.0; pixels * hidden];
        gelu_backward(&cache.pre2, &g_h2, &mut g_pre2);
        let mut g_h1 = vec![0.0; pixels * hidden];
        self.mlp2
            .backward(store, &cache.h1, &g_pre2, pixels, grads, &mut g_h1);
        let mut g_pre1 = vec![0.0; pixels * hidden];
        gelu_backward(&cache.pre1, &g_h1, &mut g_pre1);
        // split: per-pixel feature part and shared aux part
        let mut g_rope = vec![0.0; pixels * self.d_model];
        self.mlp1_y
            .backward(store, &cache.rope_y, &g_pre1, pixels, grads, &mut g_rope);
        let mut g_aux_sum = vec![0.0; hidden];
        for px in 0..pixels {
            for c in 0..hidden {
                g_aux_sum[c] += g_pre1[px * hidden + c];
            }
        }
        let mut g_aux = vec![0.0; AUX_DIM];
        self.mlp1_aux
            .backward(store, &cache.aux_vec, &g_aux_sum, 1, grads, &mut g_aux);
        // modality embedding
        let base = if cache.modality == 1 { 0 } else { FORECAST_MOD_DIM };
        for c in 0..FORECAST_MOD_DIM {
            grads.get_mut(self.mod_embed)[base + c] += g_aux[c];
        }
        // weather code
        self.weather.backward(
            store,
            &cache.weather_cache,
            &g_aux[FORECAST_MOD_DIM..FORECAST_MOD_DIM + WEATHER_CODE_DIM],
            grads,
        );
        // angle code
        let g_angle = &g_aux[FORECAST_MOD_DIM + WEATHER_CODE_DIM..];
        match (cache.modality, cache.angles) {
            (1, Some((phi, theta))) => self.angles.backward(store, phi, theta, g_angle, grads),
            (1, None) => unreachable!("validated in forward"),
            _ => {
                for c in 0..ANGLE_DIM {
                    grads.get_mut(self.s2_angle_placeholder)[c] += g_angle[c];
                }
            }
        }
        self.rope_rows_backward(&g_rope, pixels, cache.delta)
    }
}

/// Single-pixel forecast, the spec-level operation.
pub fn forecast_step(
    forecaster: &Forecaster,
    store: &ParamStore,
    y_t: &[f64],
    aux: &ForecastAux,
) -> Result<Vec<f64>> {
    let (out, _) = forecaster.forward(store, y_t, 1, aux)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Segmentation head
// ---------------------------------------------------------------------------

pub const N_CLASSES: usize = 3;
/// Label value marking unlabeled pixels.
pub const UNLABELED: u8 = 255;

/// Linear per-pixel classifier on top of the backbone features.
#[derive(Debug, Clone)]
pub struct SegmentationHead {
    pub lin: Linear,
}

impl SegmentationHead {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, prefix: &str, d_model: usize) -> Self {
        Self {
            lin: Linear::init(store, rng, prefix, d_model, N_CLASSES, true),
        }
    }

    /// pixels x d_model rows -> pixels x 3 logits.
    pub fn forward(&self, store: &ParamStore, y: &[f64], pixels: usize) -> Vec<f64> {
        self.lin.forward(store, y, pixels)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        y: &[f64],
        g_logits: &[f64],
        pixels: usize,
        grads: &mut GradBuf,
        g_y: &mut [f64],
    ) {
        self.lin.backward(store, y, g_logits, pixels, grads, g_y);
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// One forecast target with its masks; `pred`/`target` are C x pixels.
pub struct ForecastTarget<'a> {
    pub merged_index: usize,
    /// 1 = S1, 2 = S2.
    pub modality: u8,
    pub channels: usize,
    pub pred: &'a [f64],
    pub target: &'a [f64],
    /// true = usable pixel (in swath).
    pub valid: &'a [bool],
    /// true = cloudy pixel (excluded); S2 only.
    pub cloud: Option<&'a [bool]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseBreakdown {
    /// mse_s1 + w_s2 * mse_s2.
    pub loss: f64,
    pub mse_s1: f64,
    pub mse_s2: f64,
    pub count_s1: usize,
    pub count_s2: usize,
    /// Set when every pixel of every step was masked out.
    pub all_masked: bool,
}

fn pixel_usable(item: &ForecastTarget, px: usize) -> bool {
    item.valid[px] && item.cloud.map_or(true, |c| !c[px])
}

/// Masked squared error averaged per modality over every usable
/// (step, pixel, channel) entry with merged index >= n_after, combined as
/// MSE_S1 + w_s2 * MSE_S2. A modality with no usable entries contributes 0.
pub fn masked_mse_loss(items: &[ForecastTarget], n_after: usize, w_s2: f64) -> MseBreakdown {
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for item in items {
        if item.merged_index < n_after {
            continue;
        }
        let pixels = item.valid.len();
        let m = (item.modality - 1) as usize;
        for px in 0..pixels {
            if !pixel_usable(item, px) {
                continue;
            }
            for c in 0..item.channels {
                let d = item.pred[c * pixels + px] - item.target[c * pixels + px];
                sums[m] += d * d;
            }
            counts[m] += item.channels;
        }
    }
    let mse_s1 = if counts[0] > 0 { sums[0] / counts[0] as f64 } else { 0.0 };
    let mse_s2 = if counts[1] > 0 { sums[1] / counts[1] as f64 } else { 0.0 };
    MseBreakdown {
        loss: mse_s1 + w_s2 * mse_s2,
        mse_s1,
        mse_s2,
        count_s1: counts[0],
        count_s2: counts[1],
        all_masked: counts[0] == 0 && counts[1] == 0,
    }
}

/// Loss gradients on each item's predictions (same layout as `pred`).
pub fn masked_mse_grad(items: &[ForecastTarget], n_after: usize, w_s2: f64) -> Vec<Vec<f64>> {
    let breakdown = masked_mse_loss(items, n_after, w_s2);
    let counts = [breakdown.count_s1, breakdown.count_s2];
    let weights = [1.0, w_s2];
    items
        .iter()
        .map(|item| {
            let mut g = vec![0.0; item.pred.len()];
            if item.merged_index < n_after {
                return g;
            }
            let m = (item.modality - 1) as usize;
            if counts[m] == 0 {
                return g;
            }
            let scale = 2.0 * weights[m] / counts[m] as f64;
            let pixels = item.valid.len();
            for px in 0..pixels {
                if !pixel_usable(item, px) {
                    continue;
                }
                for c in 0..item.channels {
                    g[c * pixels + px] =
                        scale * (item.pred[c * pixels + px] - item.target[c * pixels + px]);
                }
            }
            g
        })
        .collect()
}

/// One labeled segmentation step: logits are pixels x 3, labels per pixel
/// with [`UNLABELED`] marking missing ground truth.
pub struct SegTarget<'a> {
    pub logits: &'a [f64],
    pub labels: &'a [u8],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalBreakdown {
    pub loss: f64,
    pub count: usize,
    pub all_masked: bool,
}

fn focal_alpha(alpha: f64) -> [f64; 3] {
    [1.0 - alpha, alpha, 1.0 - alpha]
}

/// Multi-class focal loss -alpha_c (1 - p_c)^gamma log p_c averaged over
/// labeled pixels; the positive (solar) class 1 is weighted by `alpha`.
pub fn focal_loss(items: &[SegTarget], alpha: f64, gamma: f64) -> FocalBreakdown {
    let alphas = focal_alpha(alpha);
    let mut sum = 0.0;
    let mut count = 0usize;
    for item in items {
        let pixels = item.labels.len();
        for px in 0..pixels {
            let label = item.labels[px];
            if label == UNLABELED {
                continue;
            }
            let logits = &item.logits[px * N_CLASSES..(px + 1) * N_CLASSES];
            let p = softmax3(logits)[label as usize].max(1e-12);
            sum += -alphas[label as usize] * (1.0 - p).powf(gamma) * p.ln();
            count += 1;
        }
    }
    FocalBreakdown {
        loss: if count > 0 { sum / count as f64 } else { 0.0 },
        count,
        all_masked: count == 0,
    }
}

/// Gradients on each item's logits.
pub fn focal_grad(items: &[SegTarget], alpha: f64, gamma: f64) -> Vec<Vec<f64>> {
    let alphas = focal_alpha(alpha);
    let total: usize = items
        .iter()
        .map(|it| it.labels.iter().filter(|&&l| l != UNLABELED).count())
        .sum();
    items
        .iter()
        .map(|item| {
            let mut g = vec![0.0; item.logits.len()];
            if total == 0 {
                return g;
            }
            let pixels = item.labels.len();
            for px in 0..pixels {
                let label = item.labels[px];
                if label == UNLABELED {
                    continue;
                }
                let logits = &item.logits[px * N_CLASSES..(px + 1) * N_CLASSES];
                let probs = softmax3(logits);
                let c = label as usize;
                let p = probs[c].max(1e-12);
                // dL/dp for L = -a (1-p)^g ln p
                let dl_dp = alphas[c]
                    * (gamma * (1.0 - p).powf(gamma - 1.0) * p.ln() - (1.0 - p).powf(gamma) / p);
                for j in 0..N_CLASSES {
                    let dp_dz = probs[c] * (if j == c { 1.0 } else { 0.0 } - probs[j]);
                    g[px * N_CLASSES + j] = dl_dp * dp_dz / total as f64;
                }
            }
            g
        })
        .collect()
}

fn softmax3(logits: &[f64]) -> [f64; 3] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = [
        (logits[0] - max).exp(),
        (logits[1] - max).exp(),
        (logits[2] - max).exp(),
    ];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ParamStore, Rng) {
        (ParamStore::new(), Rng::new(42))
    }

    #[test]
    fn weather_constant_rows_give_uniform_attention() {
        let (mut store, mut rng) = setup();
        let enc = WeatherEncoder::init(&mut store, &mut rng, "w");
        let row: Vec<f64> = (0..N_WEATHER_VARS).map(|i| 0.3 * i as f64 - 1.0).collect();
        let mut weather = Vec::new();
        for _ in 0..N_WEATHER_DAYS {
            weather.extend_from_slice(&row);
        }
        let (out, cache) = enc.forward(&store, &weather).unwrap();
        // every attention row is uniform, so each query returns row . W_V
        let mut expect = vec![0.0; N_WEATHER_VARS];
        gemm_acc(&mut expect, &row, store.get(enc.w_v), 1, N_WEATHER_VARS, N_WEATHER_VARS);
        for q in 0..N_WEATHER_QUERIES {
            for c in 0..N_WEATHER_VARS {
                assert!((out[q * N_WEATHER_VARS + c] - expect[c]).abs() < 1e-12);
            }
        }
        for a in &cache.attn {
            assert!((a - 1.0 / N_WEATHER_DAYS as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn weather_one_hot_limit_selects_argmax_day() {
        let (mut store, mut rng) = setup();
        let enc = WeatherEncoder::init(&mut store, &mut rng, "w");
        let weather: Vec<f64> = (0..N_WEATHER_DAYS * N_WEATHER_VARS)
            .map(|_| rng.uniform(1.0))
            .collect();
        // find each query's argmax day at the normal scale
        let (_, cache) = enc.forward(&store, &weather).unwrap();
        let argmax: Vec<usize> = (0..N_WEATHER_QUERIES)
            .map(|q| {
                (0..N_WEATHER_DAYS)
                    .max_by(|&a, &b| {
                        cache.attn[q * N_WEATHER_DAYS + a]
                            .partial_cmp(&cache.attn[q * N_WEATHER_DAYS + b])
                            .unwrap()
                    })
                    .unwrap()
            })
            .collect();
        // large logit scale: softmax saturates onto the argmax day
        let mut store2 = store.clone();
        for v in store2.get_mut(enc.queries) {
            *v *= 1e5;
        }
        let (out, _) = enc.forward(&store2, &weather).unwrap();
        for q in 0..N_WEATHER_QUERIES {
            let day = argmax[q];
            let mut expect = vec![0.0; N_WEATHER_VARS];
            gemm_acc(
                &mut expect,
                &weather[day * N_WEATHER_VARS..(day + 1) * N_WEATHER_VARS],
                store.get(enc.w_v),
                1,
                N_WEATHER_VARS,
                N_WEATHER_VARS,
            );
            for c in 0..N_WEATHER_VARS {
                assert!(
                    (out[q * N_WEATHER_VARS + c] - expect[c]).abs() < 1e-6,
                    "query {q} channel {c}"
                );
            }
        }
    }

    #[test]
    fn weather_matches_scalar_softmax_oracle() {
        let (mut store, mut rng) = setup();
        let enc = WeatherEncoder::init(&mut store, &mut rng, "w");
        let weather: Vec<f64> = (0..N_WEATHER_DAYS * N_WEATHER_VARS)
            .map(|_| rng.uniform(2.0))
            .collect();
        let (out, _) = enc.forward(&store, &weather).unwrap();
        // scalar double-loop reimplementation
        let q = store.get(enc.queries);
        let wk = store.get(enc.w_k);
        let wv = store.get(enc.w_v);
        for qi in 0..N_WEATHER_QUERIES {
            let mut logits = vec![0.0; N_WEATHER_DAYS];
            for d in 0..N_WEATHER_DAYS {
                let mut acc = 0.0;
                for kk in 0..WEATHER_KEY_DIM {
                    let mut key = 0.0;
                    for v in 0..N_WEATHER_VARS {
                        key += weather[d * N_WEATHER_VARS + v] * wk[v * WEATHER_KEY_DIM + kk];
                    }
                    acc += q[qi * WEATHER_KEY_DIM + kk] * key;
                }
                logits[d] = acc / WEATHER_KEY_DIM as f64;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..N_WEATHER_VARS {
                let mut acc = 0.0;
                for d in 0..N_WEATHER_DAYS {
                    let mut val = 0.0;
                    for v in 0..N_WEATHER_VARS {
                        val += weather[d * N_WEATHER_VARS + v] * wv[v * N_WEATHER_VARS + c];
                    }
                    acc += exps[d] / z * val;
                }
                let got = out[qi * N_WEATHER_VARS + c];
                assert!((got - acc).abs() < 1e-10, "{got} vs {acc}");
            }
        }
    }

    #[test]
    fn weather_rejects_nan() {
        let (mut store, mut rng) = setup();
        let enc = WeatherEncoder::init(&mut store, &mut rng, "w");
        let mut weather = vec![0.0; N_WEATHER_DAYS * N_WEATHER_VARS];
        weather[5] = f64::NAN;
        assert!(enc.forward(&store, &weather).is_err());
    }

    #[test]
    fn angle_encoder_basics() {
        let (mut store, mut rng) = setup();
        let enc = AngleEncoder::init(&mut store, &mut rng, "a");
        let a = enc.forward(&store, 0.0, 0.0).unwrap();
        // [1, 0, 0] picks the first row of the weight matrix
        let w = store.get(enc.lin.w);
        for c in 0..ANGLE_DIM {
            assert!((a[c] - w[c]).abs() < 1e-15);
        }
        // periodicity
        let b1 = enc.forward(&store, 1.3, 0.5).unwrap();
        let b2 = enc
            .forward(&store, 1.3 + 2.0 * std::f64::consts::PI, 0.5)
            .unwrap();
        for (x, y) in b1.iter().zip(b2.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // zero weights give the zero vector
        store.get_mut(enc.lin.w).fill(0.0);
        let z = enc.forward(&store, 0.7, 0.3).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    fn test_forecaster(c_s1: usize, c_s2: usize) -> (Forecaster, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(9);
        let f = Forecaster::init(&mut store, &mut rng, "f", 8, c_s1, c_s2).unwrap();
        (f, store)
    }

    fn test_aux(modality: u8, delta: f64) -> ForecastAux {
        let weather: Vec<f64> = (0..N_WEATHER_DAYS * N_WEATHER_VARS)
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        ForecastAux {
            modality,
            delta,
            weather,
            angles: if modality == 1 { Some((0.8, 0.5)) } else { None },
        }
    }

    #[test]
    fn rope_at_zero_delta_is_identity_and_delta_is_validated() {
        let (f, store) = test_forecaster(2, 10);
        let y: Vec<f64> = (0..8).map(|i| i as f64 * 0.2 - 0.5).collect();
        assert_eq!(f.rope_rows(&y, 1, 0.0), y);
        assert!(matches!(
            forecast_step(&f, &store, &y, &test_aux(2, 0.0)),
            Err(Error::InvalidDelta(_))
        ));
        assert!(matches!(
            forecast_step(&f, &store, &y, &test_aux(2, -3.0)),
            Err(Error::InvalidDelta(_))
        ));
    }

    #[test]
    fn different_deltas_give_different_predictions() {
        let (f, store) = test_forecaster(2, 10);
        let y: Vec<f64> = (0..8).map(|i| (i as f64 * 0.71).cos()).collect();
        let p3 = forecast_step(&f, &store, &y, &test_aux(2, 3.0)).unwrap();
        let p17 = forecast_step(&f, &store, &y, &test_aux(2, 17.0)).unwrap();
        let diff: f64 = p3.iter().zip(p17.iter()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-8, "delta had no effect: {diff}");
    }

    #[test]
    fn full_period_alias_of_coarsest_frequency_still_differs() {
        // d_model = 16: the rate ratios theta_k / theta_min are irrational
        // powers of 10, so only the coarsest pair completes a full turn.
        let mut store = ParamStore::new();
        let mut rng = Rng::new(9);
        let f = Forecaster::init(&mut store, &mut rng, "f", 16, 2, 10).unwrap();
        let y: Vec<f64> = (0..16).map(|i| (i as f64 * 0.31).sin() + 0.2).collect();
        let theta_min = *f.rotary.thetas().last().unwrap();
        let delta = 5.0;
        let alias = delta + 2.0 * std::f64::consts::PI / theta_min;
        let a = forecast_step(&f, &store, &y, &test_aux(2, delta)).unwrap();
        let b = forecast_step(&f, &store, &y, &test_aux(2, alias)).unwrap();
        let diff: f64 = a.iter().zip(b.iter()).map(|(x, v)| (x - v).abs()).sum();
        assert!(diff > 1e-10, "finer frequencies aliased simultaneously");
    }

    #[test]
    fn s1_and_s2_share_the_mlp() {
        // same channel counts; align modality embedding, angle code, and head:
        // predictions must then coincide, because only those differ by design
        let (f, mut store) = test_forecaster(4, 4);
        let emb = store.get(f.mod_embed).to_vec();
        store.get_mut(f.mod_embed)[..FORECAST_MOD_DIM]
            .copy_from_slice(&emb[FORECAST_MOD_DIM..]);
        let w2 = store.get(f.head_s2.w).to_vec();
        let b2 = store.get(f.head_s2.b.unwrap()).to_vec();
        store.get_mut(f.head_s1.w).copy_from_slice(&w2);
        store.get_mut(f.head_s1.b.unwrap()).copy_from_slice(&b2);
        let placeholder = store.get(f.s2_angle_placeholder).to_vec();
        let y: Vec<f64> = (0..8).map(|i| (i as f64 * 0.13).cos()).collect();
        let mut aux1 = test_aux(1, 4.0);
        // force the S1 angle code to equal the S2 placeholder
        store.get_mut(f.angles.lin.w).fill(0.0);
        aux1.angles = Some((0.0, 0.0));
        // angle code is zero now; zero the placeholder too
        store.get_mut(f.s2_angle_placeholder).fill(0.0);
        let _ = placeholder;
        let p1 = forecast_step(&f, &store, &y, &aux1).unwrap();
        let mut aux2 = test_aux(2, 4.0);
        aux2.weather = aux1.weather.clone();
        let p2 = forecast_step(&f, &store, &y, &aux2).unwrap();
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_mse_examples() {
        // perfect predictions
        let pred = vec![0.5; 8];
        let valid = vec![true; 4];
        let item = ForecastTarget {
            merged_index: 6,
            modality: 2,
            channels: 2,
            pred: &pred,
            target: &pred.clone(),
            valid: &valid,
            cloud: None,
        };
        let b = masked_mse_loss(&[item], 6, 0.1);
        assert_eq!(b.loss, 0.0);
        assert!(!b.all_masked);

        // fully cloud-masked S2 leaves only the S1 term
        let p1 = vec![1.0; 4];
        let t1 = vec![0.0; 4];
        let clouds = vec![true; 4];
        let p2 = vec![9.0; 4];
        let t2 = vec![0.0; 4];
        let items = [
            ForecastTarget {
                merged_index: 7,
                modality: 1,
                channels: 1,
                pred: &p1,
                target: &t1,
                valid: &valid,
                cloud: None,
            },
            ForecastTarget {
                merged_index: 8,
                modality: 2,
                channels: 1,
                pred: &p2,
                target: &t2,
                valid: &valid,
                cloud: Some(&clouds),
            },
        ];
        let b = masked_mse_loss(&items, 6, 0.1);
        assert_eq!(b.mse_s1, 1.0);
        assert_eq!(b.mse_s2, 0.0);
        assert_eq!(b.loss, 1.0);

        // steps below n_after are ignored entirely
        let b = masked_mse_loss(&items, 9, 0.1);
        assert!(b.all_masked);
        assert_eq!(b.loss, 0.0);
    }

    #[test]
    fn masked_mse_matches_hand_summed_toy() {
        // 2 steps, 2 pixels, 1 channel, half-masked
        let pred_a = vec![1.0, 2.0];
        let targ_a = vec![0.0, 0.0];
        let valid_a = vec![true, false];
        let pred_b = vec![3.0, -1.0];
        let targ_b = vec![1.0, 0.0];
        let valid_b = vec![true, true];
        let cloud_b = vec![false, true];
        let items = [
            ForecastTarget {
                merged_index: 6,
                modality: 2,
                channels: 1,
                pred: &pred_a,
                target: &targ_a,
                valid: &valid_a,
                cloud: None,
            },
            ForecastTarget {
                merged_index: 7,
                modality: 2,
                channels: 1,
                pred: &pred_b,
                target: &targ_b,
                valid: &valid_b,
                cloud: Some(&cloud_b),
            },
        ];
        // usable entries: (a, px0): (1-0)^2 = 1; (b, px0): (3-1)^2 = 4
        let b = masked_mse_loss(&items, 6, 0.1);
        assert_eq!(b.mse_s2, 2.5);
        assert_eq!(b.loss, 0.25);
        // gradients only at usable entries
        let g = masked_mse_grad(&items, 6, 0.1);
        assert_eq!(g[0][1], 0.0);
        assert_eq!(g[1][1], 0.0);
        assert!((g[0][0] - 2.0 * 0.1 * 1.0 / 2.0).abs() < 1e-15);

        // masked entries do not influence the loss value
        let mut pred_a2 = pred_a.clone();
        pred_a2[1] = 99.0;
        let items2 = [
            ForecastTarget {
                merged_index: 6,
                modality: 2,
                channels: 1,
                pred: &pred_a2,
                target: &targ_a,
                valid: &valid_a,
                cloud: None,
            },
        ];
        let items1 = [ForecastTarget {
            merged_index: 6,
            modality: 2,
            channels: 1,
            pred: &pred_a,
            target: &targ_a,
            valid: &valid_a,
            cloud: None,
        }];
        assert_eq!(
            masked_mse_loss(&items1, 6, 0.1),
            masked_mse_loss(&items2, 6, 0.1)
        );
    }

    #[test]
    fn focal_loss_examples() {
        // confident correct prediction: loss ~ 0
        let logits = vec![20.0, -10.0, -10.0];
        let labels = vec![0u8];
        let b = focal_loss(
            &[SegTarget {
                logits: &logits,
                labels: &labels,
            }],
            0.58,
            2.0,
        );
        assert!(b.loss < 1e-12, "{}", b.loss);

        // gamma = 0, alpha = 0.5: exactly half the masked cross-entropy
        let logits = vec![0.3, -0.2, 1.1, 0.0, 0.5, -0.5];
        let labels = vec![2u8, 1u8];
        let focal = focal_loss(
            &[SegTarget {
                logits: &logits,
                labels: &labels,
            }],
            0.5,
            0.0,
        );
        let mut ce = 0.0;
        for px in 0..2 {
            let p = softmax3(&logits[px * 3..(px + 1) * 3]);
            ce += -(p[labels[px] as usize]).ln();
        }
        ce /= 2.0;
        assert!((focal.loss - 0.5 * ce).abs() < 1e-12);

        // three-pixel toy against the closed form
        let logits = vec![1.0, 0.0, -1.0, 0.2, 0.4, 0.1, -0.3, 0.9, 0.0];
        let labels = vec![0u8, 1u8, UNLABELED];
        let b = focal_loss(
            &[SegTarget {
                logits: &logits,
                labels: &labels,
            }],
            0.58,
            2.0,
        );
        let mut expect = 0.0;
        let alphas = [0.42, 0.58, 0.42];
        for px in 0..2 {
            let p = softmax3(&logits[px * 3..(px + 1) * 3])[labels[px] as usize];
            expect += -alphas[labels[px] as usize] * (1.0 - p).powi(2) * p.ln();
        }
        expect /= 2.0;
        assert!((b.loss - expect).abs() < 1e-12);
        assert_eq!(b.count, 2);

        // unlabeled logits don't matter
        let mut logits2 = logits.clone();
        logits2[6] = 100.0;
        let b2 = focal_loss(
            &[SegTarget {
                logits: &logits2,
                labels: &labels,
            }],
            0.58,
            2.0,
        );
        assert_eq!(b.loss, b2.loss);

        // nothing labeled: zero loss with the warning flag set
        let b3 = focal_loss(
            &[SegTarget {
                logits: &logits,
                labels: &vec![UNLABELED; 3],
            }],
            0.58,
            2.0,
        );
        assert_eq!(b3.loss, 0.0);
        assert!(b3.all_masked);
    }

    #[test]
    fn focal_grad_matches_fd() {
        let logits = vec![0.6, -0.1, 0.4, -0.8, 1.2, 0.0];
        let labels = vec![1u8, 0u8];
        let g = focal_grad(
            &[SegTarget {
                logits: &logits,
                labels: &labels,
            }],
            0.58,
            2.0,
        );
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut lp = logits.clone();
            lp[i] += h;
            let fp = focal_loss(&[SegTarget { logits: &lp, labels: &labels }], 0.58, 2.0).loss;
            lp[i] -= 2.0 * h;
            let fm = focal_loss(&[SegTarget { logits: &lp, labels: &labels }], 0.58, 2.0).loss;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[0][i]).abs() < 1e-8, "logit {i}: {fd} vs {}", g[0][i]);
        }
    }

    #[test]
    fn segmentation_head_basics() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(11);
        let head = SegmentationHead::init(&mut store, &mut rng, "seg", 8);
        let y = vec![0.3; 8];
        // zero weights: uniform logits
        store.get_mut(head.lin.w).fill(0.0);
        store.get_mut(head.lin.b.unwrap()).fill(0.0);
        let logits = head.forward(&store, &y, 1);
        assert_eq!(logits, vec![0.0; 3]);
        // adding a constant to all logits leaves the argmax unchanged
        let l1 = [0.2, 1.4, -0.3];
        let l2: Vec<f64> = l1.iter().map(|v| v + 5.0).collect();
        let am = |l: &[f64]| {
            (0..3)
                .max_by(|&a, &b| l[a].partial_cmp(&l[b]).unwrap())
                .unwrap()
        };
        assert_eq!(am(&l1), am(&l2));
    }

    #[test]
    fn forecaster_backward_matches_fd() {
        let (f, store) = test_forecaster(2, 10);
        let pixels = 3;
        let mut rng = Rng::new(21);
        let y: Vec<f64> = (0..pixels * 8).map(|_| rng.uniform(1.0)).collect();
        let aux = test_aux(1, 6.0);
        let loss = |s: &ParamStore, yv: &[f64]| -> f64 {
            let (out, _) = f.forward(s, yv, pixels, &aux).unwrap();
            out.iter().map(|v| 0.5 * v * v).sum()
        };
        let (out, cache) = f.forward(&store, &y, pixels, &aux).unwrap();
        let mut grads = GradBuf::zeros_like(&store);
        let g_y = f.backward(&store, &cache, &out, &mut grads);
        let h = 1e-6;
        for i in (0..store.len()).step_by(11) {
            let mut s2 = store.clone();
            s2.data_mut()[i] += h;
            let fp = loss(&s2, &y);
            s2.data_mut()[i] -= 2.0 * h;
            let fm = loss(&s2, &y);
            let fd = (fp - fm) / (2.0 * h);
            let an = grads.data()[i];
            assert!(
                (fd - an).abs() < 1e-6 * fd.abs().max(an.abs()).max(1.0),
                "param {i}: {fd} vs {an}"
            );
        }
        for i in 0..y.len() {
            let mut y2 = y.clone();
            y2[i] += h;
            let fp = loss(&store, &y2);
            y2[i] -= 2.0 * h;
            let fm = loss(&store, &y2);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g_y[i]).abs() < 1e-7, "y {i}: {fd} vs {}", g_y[i]);
        }
    }
}
