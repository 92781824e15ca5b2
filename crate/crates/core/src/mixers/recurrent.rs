//! Recurrent (one-token-step) mixer forms with O(1) state.
//!
//! A state holds, per head, an accumulator matrix and (for attention kinds)
//! a normalizer vector. Streaming n tokens through `mix_step` produces the
//! same outputs as the parallel form on the n-token sequence.
//!
//! Positions passed to `mix_step` are measured from the first acquisition of
//! the stream (the first call passes 0 for time kinds); index kinds ignore
//! the value except for ordering checks.

use super::{MixerConfig, MixerKind, MixerWeights};
use crate::error::{Error, Result};
use crate::featmaps::{cos_sin_phase, psi_scalar};
use crate::params::ParamStore;

/// Serialized header: kind tag u8, n_heads u16, phi-dim u32, d_V/head u32,
/// step_count u64, last_position f64, all little-endian, then row-major
/// 64-bit accumulators (head-major) and normalizers.
const HEADER_LEN: usize = 1 + 2 + 4 + 4 + 8 + 8;

/// Constant-size streaming state for one sequence and one mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub kind: MixerKind,
    pub n_heads: usize,
    pub phi_dim: usize,
    pub dv_head: usize,
    /// n_heads x phi_dim x dv_head accumulators, head-major row-major.
    pub acc: Vec<f64>,
    /// n_heads x phi_dim normalizers; empty for retention kinds.
    pub norm: Vec<f64>,
    pub last_position: f64,
    pub step_count: u64,
}

impl RecurrentState {
    /// Serialized size in bytes; independent of how many steps were taken.
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + 8 * (self.acc.len() + self.norm.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.push(self.kind.tag());
        out.extend_from_slice(&(self.n_heads as u16).to_le_bytes());
        out.extend_from_slice(&(self.phi_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.dv_head as u32).to_le_bytes());
        out.extend_from_slice(&self.step_count.to_le_bytes());
        out.extend_from_slice(&self.last_position.to_le_bytes());
        for v in self.acc.iter().chain(self.norm.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |offset: usize, len: usize| -> Result<&[u8]> {
            bytes.get(offset..offset + len).ok_or(Error::Parse {
                offset: bytes.len() as u64,
                msg: format!("truncated state: need {} bytes at offset {offset}", len),
            })
        };
        let kind = MixerKind::from_tag(need(0, 1)?[0]).ok_or(Error::Parse {
            offset: 0,
            msg: format!("unknown mixer kind tag {}", bytes[0]),
        })?;
        if !kind.has_recurrent_form() {
            return Err(Error::Parse {
                offset: 0,
                msg: format!("kind `{kind}` cannot have a recurrent state"),
            });
        }
        let n_heads = u16::from_le_bytes(need(1, 2)?.try_into().unwrap()) as usize;
        let phi_dim = u32::from_le_bytes(need(3, 4)?.try_into().unwrap()) as usize;
        let dv_head = u32::from_le_bytes(need(7, 4)?.try_into().unwrap()) as usize;
        let step_count = u64::from_le_bytes(need(11, 8)?.try_into().unwrap());
        let last_position = f64::from_le_bytes(need(19, 8)?.try_into().unwrap());
        let acc_len = n_heads * phi_dim * dv_head;
        let norm_len = if kind.is_retention() {
            0
        } else {
            n_heads * phi_dim
        };
        let expected = HEADER_LEN + 8 * (acc_len + norm_len);
        if bytes.len() != expected {
            return Err(Error::Parse {
                offset: bytes.len().min(expected) as u64,
                msg: format!(
                    "state payload is {} bytes, expected {expected}",
                    bytes.len()
                ),
            });
        }
        let mut values = Vec::with_capacity(acc_len + norm_len);
        for idx in 0..acc_len + norm_len {
            let off = HEADER_LEN + idx * 8;
            values.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
        }
        let norm = values.split_off(acc_len);
        Ok(Self {
            kind,
            n_heads,
            phi_dim,
            dv_head,
            acc: values,
            norm,
            last_position,
            step_count,
        })
    }
}

/// Fresh zero state for a recurrent-capable kind.
pub fn state_init(cfg: &MixerConfig) -> Result<RecurrentState> {
    if !cfg.kind.has_recurrent_form() {
        return Err(Error::NoRecurrentForm(cfg.kind.name().into()));
    }
    let phi_dim = cfg.phi_dim();
    let dv_head = cfg.dv_head();
    let norm_len = if cfg.kind.is_retention() {
        0
    } else {
        cfg.n_heads * phi_dim
    };
    Ok(RecurrentState {
        kind: cfg.kind,
        n_heads: cfg.n_heads,
        phi_dim,
        dv_head,
        acc: vec![0.0; cfg.n_heads * phi_dim * dv_head],
        norm: vec![0.0; norm_len],
        last_position: f64::NEG_INFINITY,
        step_count: 0,
    })
}

fn stabilize(d: f64) -> f64 {
    let s = if d < 0.0 { -1.0 } else { 1.0 };
    s * d.abs().max(1e-6)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One recurrent step: consume token `x` at `position`, update the state,
/// and return the mixer output for this step.
pub fn mix_step(
    cfg: &MixerConfig,
    weights: &MixerWeights,
    store: &ParamStore,
    state: &mut RecurrentState,
    x: &[f64],
    position: f64,
) -> Result<Vec<f64>> {
    if !cfg.kind.has_recurrent_form() {
        return Err(Error::NoRecurrentForm(cfg.kind.name().into()));
    }
    if state.kind != cfg.kind
        || state.n_heads != cfg.n_heads
        || state.phi_dim != cfg.phi_dim()
        || state.dv_head != cfg.dv_head()
    {
        return Err(Error::Config(
            "recurrent state does not match mixer configuration".into(),
        ));
    }
    if x.len() != cfg.d_model {
        return Err(Error::Dimension(format!(
            "step input has {} features, expected {}",
            x.len(),
            cfg.d_model
        )));
    }
    if state.step_count > 0 && position < state.last_position {
        return Err(Error::OutOfOrder {
            got: position,
            last: state.last_position,
        });
    }
    // Feature-map position: stream index for index kinds, days since the
    // first acquisition for time kinds.
    let phi_pos = if cfg.kind.is_time() {
        if position < 0.0 {
            return Err(Error::Causality(format!(
                "stream positions are measured from the first acquisition; got {position}"
            )));
        }
        if position > cfg.reweight.max_span * (1.0 + 1e-9) {
            return Err(Error::SpanExceeded {
                delta: position,
                max: cfg.reweight.max_span,
            });
        }
        position
    } else {
        let idx = state.step_count as f64;
        if cfg.kind.uses_cos_phase() && idx > cfg.reweight.max_span {
            return Err(Error::SpanExceeded {
                delta: idx,
                max: cfg.reweight.max_span,
            });
        }
        idx
    };

    let heads = cfg.n_heads;
    let pd = cfg.phi_dim();
    let dv = cfg.dv_head();

    // Projections for a single token.
    let mut q = vec![0.0; cfg.d_k];
    let mut k = vec![0.0; cfg.d_k];
    let mut v = vec![0.0; cfg.d_v];
    single_project(x, store.get(weights.w_q), &mut q);
    single_project(x, store.get(weights.w_k), &mut k);
    single_project(x, store.get(weights.w_v), &mut v);

    // Feature maps.
    let mut phi_q = vec![0.0; heads * pd];
    let mut phi_k = vec![0.0; heads * pd];
    feature_map_single(cfg, phi_pos, &q, &mut phi_q, true)?;
    feature_map_single(cfg, phi_pos, &k, &mut phi_k, false)?;

    let mut head_out = vec![0.0; cfg.d_v];
    for h in 0..heads {
        let acc = &mut state.acc[h * pd * dv..(h + 1) * pd * dv];
        let fq = &phi_q[h * pd..(h + 1) * pd];
        let fk = &phi_k[h * pd..(h + 1) * pd];
        let vh = &v[h * dv..(h + 1) * dv];
        if cfg.kind.is_retention() {
            let delta = if state.step_count == 0 {
                0.0
            } else if cfg.kind.is_time() {
                position - state.last_position
            } else {
                1.0
            };
            let decay = cfg.gammas[h].powf(delta);
            for p in 0..pd {
                for c in 0..dv {
                    acc[p * dv + c] = decay * acc[p * dv + c] + fk[p] * vh[c];
                }
            }
            let out = &mut head_out[h * dv..(h + 1) * dv];
            for p in 0..pd {
                let w = fq[p];
                for c in 0..dv {
                    out[c] += w * acc[p * dv + c];
                }
            }
        } else {
            let z = &mut state.norm[h * pd..(h + 1) * pd];
            for p in 0..pd {
                z[p] += fk[p];
                for c in 0..dv {
                    acc[p * dv + c] += fk[p] * vh[c];
                }
            }
            let out = &mut head_out[h * dv..(h + 1) * dv];
            let mut den = 0.0;
            for p in 0..pd {
                let w = fq[p];
                den += w * z[p];
                for c in 0..dv {
                    out[c] += w * acc[p * dv + c];
                }
            }
            let den = stabilize(den);
            for c in 0..dv {
                out[c] /= den;
            }
        }
    }

    let out = if cfg.kind.is_retention() {
        retention_gate_forward(cfg, weights, store, &head_out, x)?
    } else {
        head_out
    };

    state.last_position = position;
    state.step_count += 1;
    Ok(out)
}

/// Group-normalize concatenated head outputs, gate by swish(x W_G), and
/// project by W_O. Retention kinds only.
pub fn retention_gate_forward(
    cfg: &MixerConfig,
    weights: &MixerWeights,
    store: &ParamStore,
    head_outputs: &[f64],
    x: &[f64],
) -> Result<Vec<f64>> {
    if !cfg.kind.is_retention() {
        return Err(Error::Config(
            "the output gate belongs to retention kinds".into(),
        ));
    }
    if head_outputs.len() != cfg.d_v || x.len() != cfg.d_model {
        return Err(Error::Dimension(format!(
            "gate inputs: got {} head outputs and {} token features, expected {} and {}",
            head_outputs.len(),
            x.len(),
            cfg.d_v,
            cfg.d_model
        )));
    }
    let gw = weights
        .gate
        .as_ref()
        .ok_or_else(|| Error::Config("retention weights are missing the gate".into()))?;
    let dv = cfg.dv_head();
    let scale = store.get(gw.gn_scale);
    let offset = store.get(gw.gn_offset);
    let mut z = vec![0.0; cfg.d_model];
    let mut pre = vec![0.0; cfg.d_model];
    single_project(x, store.get(gw.w_g), &mut pre);
    for h in 0..cfg.n_heads {
        let o = &head_outputs[h * dv..(h + 1) * dv];
        let mean = o.iter().sum::<f64>() / dv as f64;
        let var = o.iter().map(|&u| (u - mean) * (u - mean)).sum::<f64>() / dv as f64;
        let istd = 1.0 / (var + 1e-5).sqrt();
        for c in 0..dv {
            let n = (o[c] - mean) * istd;
            let y = scale[h] * n + offset[h];
            let g = pre[h * dv + c] * sigmoid(pre[h * dv + c]);
            z[h * dv + c] = g * y;
        }
    }
    let mut out = vec![0.0; cfg.d_model];
    crate::linalg::gemm_acc(&mut out, &z, store.get(gw.w_o), 1, cfg.d_model, cfg.d_model);
    Ok(out)
}

fn single_project(x: &[f64], w: &[f64], out: &mut [f64]) {
    let d_out = out.len();
    for (i, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let wrow = &w[i * d_out..(i + 1) * d_out];
        for j in 0..d_out {
            out[j] += xv * wrow[j];
        }
    }
}

fn feature_map_single(
    cfg: &MixerConfig,
    phi_pos: f64,
    src: &[f64],
    dst: &mut [f64],
    query_side: bool,
) -> Result<()> {
    let hd = cfg.head_dim();
    let pd = cfg.phi_dim();
    match cfg.kind {
        MixerKind::Linear => {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d = psi_scalar(*s);
            }
        }
        MixerKind::Cosformer | MixerKind::TimeCosformer => {
            let (c, s) = cos_sin_phase(phi_pos, &cfg.reweight)?;
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
            let thetas = cfg.rotary.thetas();
            let scale = if query_side { 1.0 / hd as f64 } else { 1.0 };
            for h in 0..cfg.n_heads {
                let u = &src[h * hd..(h + 1) * hd];
                let out = &mut dst[h * pd..(h + 1) * pd];
                for (p, &theta) in thetas.iter().enumerate() {
                    let (sin, cos) = (phi_pos * theta).sin_cos();
                    let a = psi_scalar(u[2 * p]);
                    let b = psi_scalar(u[2 * p + 1]);
                    out[2 * p] = (a * cos - b * sin) * scale;
                    out[2 * p + 1] = (a * sin + b * cos) * scale;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn weights_for(cfg: &MixerConfig) -> (MixerWeights, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(77);
        let w = MixerWeights::init(cfg, &mut store, &mut rng, "mixer");
        (w, store)
    }

    #[test]
    fn state_shapes_per_kind() {
        let cfg = MixerConfig::new(MixerKind::Linear, 64, 64, 64, 4).unwrap();
        let st = state_init(&cfg).unwrap();
        assert_eq!(st.phi_dim, 16);
        assert_eq!(st.dv_head, 16);
        assert_eq!(st.acc.len(), 4 * 16 * 16);
        assert_eq!(st.norm.len(), 4 * 16);

        let cfg = MixerConfig::new(MixerKind::Cosformer, 64, 64, 64, 4).unwrap();
        let st = state_init(&cfg).unwrap();
        assert_eq!(st.phi_dim, 32);
        assert_eq!(st.acc.len(), 4 * 32 * 16);

        let cfg = MixerConfig::new(MixerKind::Retention, 64, 64, 64, 4).unwrap();
        let st = state_init(&cfg).unwrap();
        assert!(st.norm.is_empty());
    }

    #[test]
    fn transformer_kinds_have_no_recurrent_form() {
        for kind in [MixerKind::TransformerCausal, MixerKind::TransformerNoncausal] {
            let cfg = MixerConfig::new(kind, 16, 16, 16, 2).unwrap();
            assert!(matches!(
                state_init(&cfg),
                Err(Error::NoRecurrentForm(_))
            ));
        }
    }

    #[test]
    fn out_of_order_positions_rejected() {
        let cfg = MixerConfig::new(MixerKind::TimeRetention, 8, 8, 8, 2).unwrap();
        let (w, store) = weights_for(&cfg);
        let mut st = state_init(&cfg).unwrap();
        let x = vec![0.1; 8];
        mix_step(&cfg, &w, &store, &mut st, &x, 5.0).unwrap();
        let err = mix_step(&cfg, &w, &store, &mut st, &x, 4.0);
        assert!(matches!(err, Err(Error::OutOfOrder { .. })));
        // equal positions are fine (same-date acquisitions)
        mix_step(&cfg, &w, &store, &mut st, &x, 5.0).unwrap();
    }

    #[test]
    fn time_kind_span_limit() {
        let mut cfg = MixerConfig::new(MixerKind::TimeCosformer, 8, 8, 8, 2).unwrap();
        cfg.reweight = crate::featmaps::ReweightParams::new(10.0).unwrap();
        let (w, store) = weights_for(&cfg);
        let mut st = state_init(&cfg).unwrap();
        let x = vec![0.1; 8];
        mix_step(&cfg, &w, &store, &mut st, &x, 0.0).unwrap();
        assert!(matches!(
            mix_step(&cfg, &w, &store, &mut st, &x, 11.0),
            Err(Error::SpanExceeded { .. })
        ));
    }

    #[test]
    fn state_round_trips_through_bytes() {
        let cfg = MixerConfig::new(MixerKind::TimeRetention, 8, 8, 8, 2).unwrap();
        let (w, store) = weights_for(&cfg);
        let mut st = state_init(&cfg).unwrap();
        let mut rng = Rng::new(3);
        let mut pos = 0.0;
        for _ in 0..5 {
            let x: Vec<f64> = (0..8).map(|_| rng.uniform(1.0)).collect();
            mix_step(&cfg, &w, &store, &mut st, &x, pos).unwrap();
            pos += 7.0;
        }
        let bytes = st.to_bytes();
        assert_eq!(bytes.len(), st.byte_len());
        let restored = RecurrentState::from_bytes(&bytes).unwrap();
        assert_eq!(restored, st);

        // truncation and corruption are parse errors
        assert!(matches!(
            RecurrentState::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Parse { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = 99;
        assert!(matches!(
            RecurrentState::from_bytes(&bad),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn restored_state_continues_identically() {
        let cfg = MixerConfig::new(MixerKind::Cosformer, 8, 8, 8, 2).unwrap();
        let (w, store) = weights_for(&cfg);
        let mut rng = Rng::new(4);
        let xs: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..8).map(|_| rng.uniform(1.0)).collect())
            .collect();
        let mut st = state_init(&cfg).unwrap();
        let mut outs_full = Vec::new();
        for (i, x) in xs.iter().enumerate() {
            outs_full.push(mix_step(&cfg, &w, &store, &mut st, x, i as f64).unwrap());
        }
        // re-run, serializing after 4 steps
        let mut st = state_init(&cfg).unwrap();
        for (i, x) in xs.iter().take(4).enumerate() {
            mix_step(&cfg, &w, &store, &mut st, x, i as f64).unwrap();
        }
        let mut st = RecurrentState::from_bytes(&st.to_bytes()).unwrap();
        for (i, x) in xs.iter().enumerate().skip(4) {
            let o = mix_step(&cfg, &w, &store, &mut st, x, i as f64).unwrap();
            assert_eq!(o, outs_full[i], "step {i} diverged after restore");
        }
    }
}
