//! Parallel (whole-sequence) mixer forms, plus reverse-mode gradients.
//!
//! The batched entry point processes B independent sequences that share one
//! position vector (the per-pixel sequences of one sample). Training runs
//! exclusively through this path; the recurrent form shares its weights.

use super::{check_span, pair_delta, phi_positions, MixerConfig, MixerKind, MixerWeights, TokenSequence};
use crate::error::{Error, Result};
use crate::featmaps::{cos_sin_phase, psi_grad_scalar, psi_scalar};
use crate::linalg::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc};
use crate::params::{GradBuf, ParamStore};

/// Attention denominators are stabilized as sign(d) * max(|d|, EPS); only
/// rotary kinds can produce near-zero denominators (psi keeps the others
/// strictly positive).
const DENOM_EPS: f64 = 1e-6;

/// Group-norm variance epsilon for the retention gate.
const GROUPNORM_EPS: f64 = 1e-5;

/// Which side of q/k a feature map row feeds.
#[derive(Clone, Copy, PartialEq)]
enum Side {
    Query,
    Key,
}

/// Per-sequence trigonometric context shared by every row of the batch.
struct PhiCtx {
    /// Feature-map positions: indices or days since first acquisition.
    phi_pos: Vec<f64>,
    /// (cos, sin) phase per token for cosformer kinds.
    phase: Vec<(f64, f64)>,
    /// (sin, cos) per token per rotary pair, t-major.
    rot: Vec<(f64, f64)>,
}

impl PhiCtx {
    fn build(cfg: &MixerConfig, positions: &[f64]) -> Result<Self> {
        let phi_pos = phi_positions(cfg, positions);
        let mut phase = Vec::new();
        if cfg.kind.uses_cos_phase() {
            phase.reserve(phi_pos.len());
            for &p in &phi_pos {
                phase.push(cos_sin_phase(p, &cfg.reweight)?);
            }
        }
        let mut rot = Vec::new();
        if cfg.kind.uses_rotary() {
            let thetas = cfg.rotary.thetas();
            rot.reserve(phi_pos.len() * thetas.len());
            for &p in &phi_pos {
                for &theta in thetas {
                    rot.push((p * theta).sin_cos());
                }
            }
        }
        Ok(Self {
            phi_pos,
            phase,
            rot,
        })
    }
}

/// Forward cache for one batched mixer application.
pub struct MixerCache {
    pub b: usize,
    pub t: usize,
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    phi_q: Vec<f64>,
    phi_k: Vec<f64>,
    /// B x heads x T x T similarity numerators (decay included).
    scores: Vec<f64>,
    /// Raw (pre-stabilization) row sums, B x heads x T; attention kinds only.
    denom: Vec<f64>,
    /// Head-concatenated weighted values before normalization/gating.
    numer: Vec<f64>,
    /// Retention decay factors per head, heads x T x T; shared across batch.
    decay: Vec<f64>,
    ctx: PhiCtx,
    gate: Option<GateCache>,
}

struct GateCache {
    /// x W_G, pre-swish.
    pre: Vec<f64>,
    /// swish(pre).
    gate_val: Vec<f64>,
    /// Group-normalized head outputs (before scale/offset).
    normed: Vec<f64>,
    /// Scaled + offset normalized outputs.
    y: Vec<f64>,
    /// 1/sqrt(var + eps) per row per group.
    inv_std: Vec<f64>,
}

fn project(
    x: &[f64],
    rows: usize,
    d_in: usize,
    w: &[f64],
    d_out: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * d_out];
    gemm_acc(&mut out, x, w, rows, d_in, d_out);
    out
}

/// Write the feature map of one projected row into `dst` (n_heads * phi_d).
fn feature_map_row(
    cfg: &MixerConfig,
    ctx: &PhiCtx,
    t_idx: usize,
    src: &[f64],
    dst: &mut [f64],
    side: Side,
) {
    let hd = cfg.head_dim();
    let pd = cfg.phi_dim();
    match cfg.kind {
        MixerKind::Linear => {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d = psi_scalar(*s);
            }
        }
        MixerKind::Cosformer | MixerKind::TimeCosformer => {
            let (c, s) = ctx.phase[t_idx];
            for h in 0..cfg.n_heads {
                let u = &src[h * hd..(h + 1) * hd];
                let out = &mut dst[h * pd..(h + 1) * pd];
                for i in 0..hd {
                    let p = psi_scalar(u[i]);
                    out[i] = c * p;
                    out[hd + i] = s * p;
                }
            }
        }
        _ => {
            // rotary kinds
            let half = hd / 2;
            let rot = &ctx.rot[t_idx * half..(t_idx + 1) * half];
            let scale = if side == Side::Query {
                1.0 / hd as f64
            } else {
                1.0
            };
            for h in 0..cfg.n_heads {
                let u = &src[h * hd..(h + 1) * hd];
                let out = &mut dst[h * pd..(h + 1) * pd];
                for p in 0..half {
                    let (sin, cos) = rot[p];
                    let a = psi_scalar(u[2 * p]);
                    let b = psi_scalar(u[2 * p + 1]);
                    out[2 * p] = (a * cos - b * sin) * scale;
                    out[2 * p + 1] = (a * sin + b * cos) * scale;
                }
            }
        }
    }
}

/// Backward of `feature_map_row`: maps d(loss)/d(phi) to d(loss)/d(projected
/// row), using the cached pre-psi projection values.
fn feature_map_row_backward(
    cfg: &MixerConfig,
    ctx: &PhiCtx,
    t_idx: usize,
    src: &[f64],
    g_phi: &[f64],
    g_src: &mut [f64],
    side: Side,
) {
    let hd = cfg.head_dim();
    let pd = cfg.phi_dim();
    match cfg.kind {
        MixerKind::Linear => {
            for i in 0..src.len() {
                g_src[i] += psi_grad_scalar(src[i]) * g_phi[i];
            }
        }
        MixerKind::Cosformer | MixerKind::TimeCosformer => {
            let (c, s) = ctx.phase[t_idx];
            for h in 0..cfg.n_heads {
                let u = &src[h * hd..(h + 1) * hd];
                let gp = &g_phi[h * pd..(h + 1) * pd];
                let gs = &mut g_src[h * hd..(h + 1) * hd];
                for i in 0..hd {
                    let g_psi = c * gp[i] + s * gp[hd + i];
                    gs[i] += psi_grad_scalar(u[i]) * g_psi;
                }
            }
        }
        _ => {
            let half = hd / 2;
            let rot = &ctx.rot[t_idx * half..(t_idx + 1) * half];
            let scale = if side == Side::Query {
                1.0 / hd as f64
            } else {
                1.0
            };
            for h in 0..cfg.n_heads {
                let u = &src[h * hd..(h + 1) * hd];
                let gp = &g_phi[h * pd..(h + 1) * pd];
                let gs = &mut g_src[h * hd..(h + 1) * hd];
                for p in 0..half {
                    let (sin, cos) = rot[p];
                    // inverse rotation of the pair gradient
                    let ga = (gp[2 * p] * cos + gp[2 * p + 1] * sin) * scale;
                    let gb = (-gp[2 * p] * sin + gp[2 * p + 1] * cos) * scale;
                    gs[2 * p] += psi_grad_scalar(u[2 * p]) * ga;
                    gs[2 * p + 1] += psi_grad_scalar(u[2 * p + 1]) * gb;
                }
            }
        }
    }
}

fn stabilize(d: f64) -> f64 {
    let s = if d < 0.0 { -1.0 } else { 1.0 };
    s * d.abs().max(DENOM_EPS)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Batched parallel mixing of B sequences sharing one position vector.
///
/// `x` is (B*T) x d_model with the rows of sequence b at b*T..(b+1)*T.
/// Returns the (B*T) x d_model outputs and the cache for `mixer_backward`.
pub fn mix_parallel_batch(
    cfg: &MixerConfig,
    weights: &MixerWeights,
    store: &ParamStore,
    x: &[f64],
    b: usize,
    positions: &[f64],
) -> Result<(Vec<f64>, MixerCache)> {
    let t = positions.len();
    if x.len() != b * t * cfg.d_model {
        return Err(Error::Dimension(format!(
            "mixer input has {} values, expected {}x{}x{}",
            x.len(),
            b,
            t,
            cfg.d_model
        )));
    }
    let rows = b * t;
    let ctx = PhiCtx::build(cfg, positions)?;
    let q = project(x, rows, cfg.d_model, store.get(weights.w_q), cfg.d_k);
    let k = project(x, rows, cfg.d_model, store.get(weights.w_k), cfg.d_k);
    let v = project(x, rows, cfg.d_model, store.get(weights.w_v), cfg.d_v);

    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let pd = cfg.phi_dim();
    let dv = cfg.dv_head();
    let noncausal = cfg.kind == MixerKind::TransformerNoncausal;

    let mut phi_q = Vec::new();
    let mut phi_k = Vec::new();
    if !cfg.kind.is_transformer() {
        phi_q = vec![0.0; rows * heads * pd];
        phi_k = vec![0.0; rows * heads * pd];
        for r in 0..rows {
            let ti = r % t;
            feature_map_row(
                cfg,
                &ctx,
                ti,
                &q[r * cfg.d_k..(r + 1) * cfg.d_k],
                &mut phi_q[r * heads * pd..(r + 1) * heads * pd],
                Side::Query,
            );
            feature_map_row(
                cfg,
                &ctx,
                ti,
                &k[r * cfg.d_k..(r + 1) * cfg.d_k],
                &mut phi_k[r * heads * pd..(r + 1) * heads * pd],
                Side::Key,
            );
        }
    }

    // Retention decay matrix per head; identical for every sequence in the
    // batch because positions are shared.
    let mut decay = Vec::new();
    if cfg.kind.is_retention() {
        decay = vec![0.0; heads * t * t];
        for h in 0..heads {
            let gamma = cfg.gammas[h];
            for i in 0..t {
                for j in 0..=i {
                    let delta = pair_delta(cfg, &ctx.phi_pos, i, j);
                    decay[(h * t + i) * t + j] = gamma.powf(delta);
                }
            }
        }
    }

    let inv_sqrt_hd = 1.0 / (hd as f64).sqrt();
    let mut scores = vec![0.0; b * heads * t * t];
    let mut numer = vec![0.0; rows * cfg.d_v];
    let mut denom = if cfg.kind.is_normalized() {
        vec![0.0; b * heads * t]
    } else {
        Vec::new()
    };

    for bi in 0..b {
        for h in 0..heads {
            let sc = &mut scores[((bi * heads + h) * t) * t..((bi * heads + h) * t + t) * t];
            for i in 0..t {
                let jmax = if noncausal { t } else { i + 1 };
                let row_i = bi * t + i;
                for j in 0..jmax {
                    let row_j = bi * t + j;
                    let s = if cfg.kind.is_transformer() {
                        let qi = &q[row_i * cfg.d_k + h * hd..row_i * cfg.d_k + (h + 1) * hd];
                        let kj = &k[row_j * cfg.d_k + h * hd..row_j * cfg.d_k + (h + 1) * hd];
                        (crate::linalg::dot(qi, kj) * inv_sqrt_hd).exp()
                    } else {
                        let fq =
                            &phi_q[row_i * heads * pd + h * pd..row_i * heads * pd + (h + 1) * pd];
                        let fk =
                            &phi_k[row_j * heads * pd + h * pd..row_j * heads * pd + (h + 1) * pd];
                        let mut sv = crate::linalg::dot(fq, fk);
                        if cfg.kind.is_retention() {
                            sv *= decay[(h * t + i) * t + j];
                        }
                        sv
                    };
                    sc[i * t + j] = s;
                }
            }
            // weighted values and row sums
            for i in 0..t {
                let jmax = if noncausal { t } else { i + 1 };
                let row_i = bi * t + i;
                let out = &mut numer[row_i * cfg.d_v + h * dv..row_i * cfg.d_v + (h + 1) * dv];
                let mut dsum = 0.0;
                for j in 0..jmax {
                    let s = sc[i * t + j];
                    dsum += s;
                    let row_j = bi * t + j;
                    let vj = &v[row_j * cfg.d_v + h * dv..row_j * cfg.d_v + (h + 1) * dv];
                    for c in 0..dv {
                        out[c] += s * vj[c];
                    }
                }
                if cfg.kind.is_normalized() {
                    denom[(bi * heads + h) * t + i] = dsum;
                }
            }
        }
    }

    let mut out = vec![0.0; rows * cfg.d_v];
    let mut gate_cache = None;
    if cfg.kind.is_normalized() {
        for bi in 0..b {
            for i in 0..t {
                let row = bi * t + i;
                for h in 0..heads {
                    let d = stabilize(denom[(bi * heads + h) * t + i]);
                    for c in 0..dv {
                        out[row * cfg.d_v + h * dv + c] = numer[row * cfg.d_v + h * dv + c] / d;
                    }
                }
            }
        }
    } else {
        let gw = weights.gate.as_ref().expect("retention weights carry a gate");
        let pre = project(x, rows, cfg.d_model, store.get(gw.w_g), cfg.d_model);
        let gate_val: Vec<f64> = pre.iter().map(|&p| p * sigmoid(p)).collect();
        let scale = store.get(gw.gn_scale);
        let offset = store.get(gw.gn_offset);
        let mut normed = vec![0.0; rows * cfg.d_v];
        let mut y = vec![0.0; rows * cfg.d_v];
        let mut inv_std = vec![0.0; rows * heads];
        for row in 0..rows {
            for h in 0..heads {
                let o = &numer[row * cfg.d_v + h * dv..row * cfg.d_v + (h + 1) * dv];
                let mean = o.iter().sum::<f64>() / dv as f64;
                let var = o.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / dv as f64;
                let istd = 1.0 / (var + GROUPNORM_EPS).sqrt();
                inv_std[row * heads + h] = istd;
                for c in 0..dv {
                    let n = (o[c] - mean) * istd;
                    normed[row * cfg.d_v + h * dv + c] = n;
                    y[row * cfg.d_v + h * dv + c] = scale[h] * n + offset[h];
                }
            }
        }
        let z: Vec<f64> = gate_val.iter().zip(y.iter()).map(|(g, yv)| g * yv).collect();
        gemm_acc(&mut out, &z, store.get(gw.w_o), rows, cfg.d_model, cfg.d_model);
        gate_cache = Some(GateCache {
            pre,
            gate_val,
            normed,
            y,
            inv_std,
        });
    }

    let cache = MixerCache {
        b,
        t,
        x: x.to_vec(),
        q,
        k,
        v,
        phi_q,
        phi_k,
        scores,
        denom,
        numer,
        decay,
        ctx,
        gate: gate_cache,
    };
    Ok((out, cache))
}

/// Parallel mixing of a single [`TokenSequence`], the spec-level operation.
pub fn mix_parallel(
    cfg: &MixerConfig,
    weights: &MixerWeights,
    store: &ParamStore,
    seq: &TokenSequence,
) -> Result<Vec<f64>> {
    if seq.d_model != cfg.d_model {
        return Err(Error::Dimension(format!(
            "sequence width {} != configured d_model {}",
            seq.d_model, cfg.d_model
        )));
    }
    check_span(cfg, seq)?;
    let (out, _) = mix_parallel_batch(cfg, weights, store, &seq.tokens, 1, &seq.positions)?;
    Ok(out)
}

/// Per-head similarity numerators a_{i,j} for one sequence: softmax-path
/// exponentials for transformer kinds (upper triangle zeroed when causal),
/// decay-weighted feature products otherwise.
pub fn scores_parallel(
    cfg: &MixerConfig,
    weights: &MixerWeights,
    store: &ParamStore,
    seq: &TokenSequence,
) -> Result<Vec<Vec<f64>>> {
    if seq.d_model != cfg.d_model {
        return Err(Error::Dimension(format!(
            "sequence width {} != configured d_model {}",
            seq.d_model, cfg.d_model
        )));
    }
    check_span(cfg, seq)?;
    let (_, cache) = mix_parallel_batch(cfg, weights, store, &seq.tokens, 1, &seq.positions)?;
    let t = seq.len();
    Ok((0..cfg.n_heads)
        .map(|h| cache.scores[(h * t) * t..(h * t + t) * t].to_vec())
        .collect())
}

/// Reverse-mode gradients for `mix_parallel_batch`.
///
/// Accumulates parameter gradients into `grads` and input gradients into
/// `g_x` (same layout as the forward input).
pub fn mixer_backward(
    cfg: &MixerConfig,
    weights: &MixerWeights,
    store: &ParamStore,
    cache: &MixerCache,
    g_out: &[f64],
    grads: &mut GradBuf,
    g_x: &mut [f64],
) {
    let b = cache.b;
    let t = cache.t;
    let rows = b * t;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let pd = cfg.phi_dim();
    let dv = cfg.dv_head();
    let noncausal = cfg.kind == MixerKind::TransformerNoncausal;
    assert_eq!(g_out.len(), rows * cfg.d_v);
    assert_eq!(g_x.len(), rows * cfg.d_model);

    // Gradient wrt the head-concatenated weighted values (numer), plus a
    // per-(row, head) scalar gradient on the raw denominator.
    let mut g_numer = vec![0.0; rows * cfg.d_v];
    let mut g_row_denom = vec![0.0; b * heads * t];
    if cfg.kind.is_normalized() {
        for bi in 0..b {
            for i in 0..t {
                let row = bi * t + i;
                for h in 0..heads {
                    let draw = cache.denom[(bi * heads + h) * t + i];
                    let d = stabilize(draw);
                    let base = row * cfg.d_v + h * dv;
                    let mut gd = 0.0;
                    for c in 0..dv {
                        g_numer[base + c] = g_out[base + c] / d;
                        gd -= g_out[base + c] * cache.numer[base + c] / (d * d);
                    }
                    // d(stabilized)/d(raw) is 1 outside the clamp, 0 inside.
                    if draw.abs() <= DENOM_EPS {
                        gd = 0.0;
                    }
                    g_row_denom[(bi * heads + h) * t + i] = gd;
                }
            }
        }
    } else {
        // retention gate backward
        let gw = weights.gate.as_ref().expect("retention weights carry a gate");
        let gate = cache.gate.as_ref().expect("retention cache carries gate state");
        // out = z W_O with z = gate_val .* y
        let z: Vec<f64> = gate
            .gate_val
            .iter()
            .zip(gate.y.iter())
            .map(|(g, yv)| g * yv)
            .collect();
        let mut g_z = vec![0.0; rows * cfg.d_model];
        gemm_a_bt_acc(
            &mut g_z,
            g_out,
            store.get(gw.w_o),
            rows,
            cfg.d_model,
            cfg.d_model,
        );
        gemm_at_b_acc(
            grads.get_mut(gw.w_o),
            &z,
            g_out,
            rows,
            cfg.d_model,
            cfg.d_model,
        );
        // swish gate path
        let mut g_pre = vec![0.0; rows * cfg.d_model];
        let mut g_y = vec![0.0; rows * cfg.d_model];
        for r in 0..rows * cfg.d_model {
            g_y[r] = g_z[r] * gate.gate_val[r];
            let p = gate.pre[r];
            let s = sigmoid(p);
            g_pre[r] = g_z[r] * gate.y[r] * s * (1.0 + p * (1.0 - s));
        }
        gemm_a_bt_acc(
            g_x,
            &g_pre,
            store.get(gw.w_g),
            rows,
            cfg.d_model,
            cfg.d_model,
        );
        gemm_at_b_acc(
            grads.get_mut(gw.w_g),
            &cache.x,
            &g_pre,
            rows,
            cfg.d_model,
            cfg.d_model,
        );
        // group-norm backward per row per head-group
        let scale = store.get(gw.gn_scale);
        for row in 0..rows {
            for h in 0..heads {
                let base = row * cfg.d_v + h * dv;
                let n = &gate.normed[base..base + dv];
                let gy = &g_y[base..base + dv];
                let istd = gate.inv_std[row * heads + h];
                let mut g_scale = 0.0;
                let mut g_offset = 0.0;
                let mut mean_gn = 0.0;
                let mut mean_gn_n = 0.0;
                for c in 0..dv {
                    g_scale += gy[c] * n[c];
                    g_offset += gy[c];
                    let gn = gy[c] * scale[h];
                    mean_gn += gn;
                    mean_gn_n += gn * n[c];
                }
                grads.get_mut(gw.gn_scale)[h] += g_scale;
                grads.get_mut(gw.gn_offset)[h] += g_offset;
                mean_gn /= dv as f64;
                mean_gn_n /= dv as f64;
                for c in 0..dv {
                    let gn = gy[c] * scale[h];
                    g_numer[base + c] = istd * (gn - mean_gn - n[c] * mean_gn_n);
                }
            }
        }
    }

    // Scores backward: g_s, g_v, and either g_phi or g_q/g_k directly.
    let inv_sqrt_hd = 1.0 / (hd as f64).sqrt();
    let mut g_q = vec![0.0; rows * cfg.d_k];
    let mut g_k = vec![0.0; rows * cfg.d_k];
    let mut g_v = vec![0.0; rows * cfg.d_v];
    let mut g_phi_q = if cfg.kind.is_transformer() {
        Vec::new()
    } else {
        vec![0.0; rows * heads * pd]
    };
    let mut g_phi_k = g_phi_q.clone();

    for bi in 0..b {
        for h in 0..heads {
            let sc = &cache.scores[((bi * heads + h) * t) * t..((bi * heads + h) * t + t) * t];
            for i in 0..t {
                let row_i = bi * t + i;
                let jmax = if noncausal { t } else { i + 1 };
                let gu = &g_numer[row_i * cfg.d_v + h * dv..row_i * cfg.d_v + (h + 1) * dv];
                let gd = if cfg.kind.is_normalized() {
                    g_row_denom[(bi * heads + h) * t + i]
                } else {
                    0.0
                };
                for j in 0..jmax {
                    let row_j = bi * t + j;
                    let vj = &cache.v[row_j * cfg.d_v + h * dv..row_j * cfg.d_v + (h + 1) * dv];
                    // g wrt score s_ij
                    let mut gs = gd;
                    for c in 0..dv {
                        gs += gu[c] * vj[c];
                    }
                    // g wrt v_j
                    let s = sc[i * t + j];
                    let gvj = &mut g_v[row_j * cfg.d_v + h * dv..row_j * cfg.d_v + (h + 1) * dv];
                    for c in 0..dv {
                        gvj[c] += s * gu[c];
                    }
                    if cfg.kind.is_transformer() {
                        // s = exp(z); z = q.k / sqrt(hd)
                        let gz = gs * s * inv_sqrt_hd;
                        let qi = &cache.q[row_i * cfg.d_k + h * hd..row_i * cfg.d_k + (h + 1) * hd];
                        let kj = &cache.k[row_j * cfg.d_k + h * hd..row_j * cfg.d_k + (h + 1) * hd];
                        let gqi = &mut g_q[row_i * cfg.d_k + h * hd..row_i * cfg.d_k + (h + 1) * hd];
                        for c in 0..hd {
                            gqi[c] += gz * kj[c];
                        }
                        let gkj = &mut g_k[row_j * cfg.d_k + h * hd..row_j * cfg.d_k + (h + 1) * hd];
                        for c in 0..hd {
                            gkj[c] += gz * qi[c];
                        }
                    } else {
                        let gc = if cfg.kind.is_retention() {
                            gs * cache.decay[(h * t + i) * t + j]
                        } else {
                            gs
                        };
                        let fq = &cache.phi_q
                            [row_i * heads * pd + h * pd..row_i * heads * pd + (h + 1) * pd];
                        let fk = &cache.phi_k
                            [row_j * heads * pd + h * pd..row_j * heads * pd + (h + 1) * pd];
                        let gfq = &mut g_phi_q
                            [row_i * heads * pd + h * pd..row_i * heads * pd + (h + 1) * pd];
                        for c in 0..pd {
                            gfq[c] += gc * fk[c];
                        }
                        let gfk = &mut g_phi_k
                            [row_j * heads * pd + h * pd..row_j * heads * pd + (h + 1) * pd];
                        for c in 0..pd {
                            gfk[c] += gc * fq[c];
                        }
                    }
                }
            }
        }
    }

    if !cfg.kind.is_transformer() {
        for r in 0..rows {
            let ti = r % t;
            feature_map_row_backward(
                cfg,
                &cache.ctx,
                ti,
                &cache.q[r * cfg.d_k..(r + 1) * cfg.d_k],
                &g_phi_q[r * heads * pd..(r + 1) * heads * pd],
                &mut g_q[r * cfg.d_k..(r + 1) * cfg.d_k],
                Side::Query,
            );
            feature_map_row_backward(
                cfg,
                &cache.ctx,
                ti,
                &cache.k[r * cfg.d_k..(r + 1) * cfg.d_k],
                &g_phi_k[r * heads * pd..(r + 1) * heads * pd],
                &mut g_k[r * cfg.d_k..(r + 1) * cfg.d_k],
                Side::Key,
            );
        }
    }

    // Project gradients back through W_Q/W_K/W_V.
    gemm_a_bt_acc(g_x, &g_q, store.get(weights.w_q), rows, cfg.d_k, cfg.d_model);
    gemm_a_bt_acc(g_x, &g_k, store.get(weights.w_k), rows, cfg.d_k, cfg.d_model);
    gemm_a_bt_acc(g_x, &g_v, store.get(weights.w_v), rows, cfg.d_v, cfg.d_model);
    gemm_at_b_acc(grads.get_mut(weights.w_q), &cache.x, &g_q, rows, cfg.d_model, cfg.d_k);
    gemm_at_b_acc(grads.get_mut(weights.w_k), &cache.x, &g_k, rows, cfg.d_model, cfg.d_k);
    gemm_at_b_acc(grads.get_mut(weights.w_v), &cache.x, &g_v, rows, cfg.d_model, cfg.d_v);
}
