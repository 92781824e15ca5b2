//! The nine sequence-mixing mechanisms in parallel (whole-sequence) and
//! recurrent (one-token-step) forms.
//!
//! Index kinds measure token distance as the difference of sequence indices;
//! Time kinds use the difference of acquisition dates in days. Transformer
//! kinds are softmax baselines without a recurrent form.

mod parallel;
mod recurrent;

pub use parallel::{mix_parallel, mix_parallel_batch, mixer_backward, scores_parallel, MixerCache};
pub use recurrent::{mix_step, state_init, RecurrentState};

use crate::error::{Error, Result};
use crate::featmaps::{phi_dim, ReweightParams, RotaryBasis};
use crate::params::{ParamStore, Slot};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// Mechanism selector. The `Time*` variants compute token distances from
/// acquisition dates instead of sequence indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    TransformerNoncausal,
    TransformerCausal,
    Linear,
    Cosformer,
    TimeCosformer,
    Linroformer,
    TimeLinroformer,
    Retention,
    TimeRetention,
}

impl MixerKind {
    pub const ALL: [MixerKind; 9] = [
        MixerKind::TransformerNoncausal,
        MixerKind::TransformerCausal,
        MixerKind::Linear,
        MixerKind::Cosformer,
        MixerKind::TimeCosformer,
        MixerKind::Linroformer,
        MixerKind::TimeLinroformer,
        MixerKind::Retention,
        MixerKind::TimeRetention,
    ];

    /// The seven kinds with both parallel and recurrent forms.
    pub const RECURRENT: [MixerKind; 7] = [
        MixerKind::Linear,
        MixerKind::Cosformer,
        MixerKind::TimeCosformer,
        MixerKind::Linroformer,
        MixerKind::TimeLinroformer,
        MixerKind::Retention,
        MixerKind::TimeRetention,
    ];

    pub fn is_transformer(self) -> bool {
        matches!(
            self,
            MixerKind::TransformerNoncausal | MixerKind::TransformerCausal
        )
    }

    pub fn is_retention(self) -> bool {
        matches!(self, MixerKind::Retention | MixerKind::TimeRetention)
    }

    /// Attention kinds normalize scores row-wise; retention kinds do not.
    pub fn is_normalized(self) -> bool {
        !self.is_retention()
    }

    pub fn is_time(self) -> bool {
        matches!(
            self,
            MixerKind::TimeCosformer | MixerKind::TimeLinroformer | MixerKind::TimeRetention
        )
    }

    pub fn uses_rotary(self) -> bool {
        matches!(
            self,
            MixerKind::Linroformer
                | MixerKind::TimeLinroformer
                | MixerKind::Retention
                | MixerKind::TimeRetention
        )
    }

    pub fn uses_cos_phase(self) -> bool {
        matches!(self, MixerKind::Cosformer | MixerKind::TimeCosformer)
    }

    pub fn is_causal(self) -> bool {
        self != MixerKind::TransformerNoncausal
    }

    pub fn has_recurrent_form(self) -> bool {
        !self.is_transformer()
    }

    /// Wire tag used in serialized recurrent states.
    pub fn tag(self) -> u8 {
        match self {
            MixerKind::TransformerNoncausal => 0,
            MixerKind::TransformerCausal => 1,
            MixerKind::Linear => 2,
            MixerKind::Cosformer => 3,
            MixerKind::TimeCosformer => 4,
            MixerKind::Linroformer => 5,
            MixerKind::TimeLinroformer => 6,
            MixerKind::Retention => 7,
            MixerKind::TimeRetention => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<MixerKind> {
        MixerKind::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::TransformerNoncausal => "transformer_noncausal",
            MixerKind::TransformerCausal => "transformer_causal",
            MixerKind::Linear => "linear",
            MixerKind::Cosformer => "cosformer",
            MixerKind::TimeCosformer => "time_cosformer",
            MixerKind::Linroformer => "linroformer",
            MixerKind::TimeLinroformer => "time_linroformer",
            MixerKind::Retention => "retention",
            MixerKind::TimeRetention => "time_retention",
        }
    }
}

impl std::fmt::Display for MixerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MixerKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mixer kind `{s}`")))
    }
}

/// Per-head decay schedule: gamma_h = 1 - 2^-(5+h). Time variants take the
/// 12th root so that one median revisit interval (12 days) decays like one
/// index step.
pub fn default_gammas(kind: MixerKind, n_heads: usize) -> Vec<f64> {
    if !kind.is_retention() {
        return Vec::new();
    }
    (0..n_heads)
        .map(|h| {
            let g = 1.0 - 2f64.powi(-(5 + h as i32));
            if kind.is_time() {
                g.powf(1.0 / 12.0)
            } else {
                g
            }
        })
        .collect()
}

/// Default reweighting span: 700 days for date-based kinds, 64 index steps
/// otherwise (twice the default maximum merged training length).
pub fn default_reweight(kind: MixerKind) -> ReweightParams {
    if kind.is_time() {
        ReweightParams::default()
    } else {
        ReweightParams { max_span: 64.0 }
    }
}

/// Mixer hyper-parameters; selects one of the nine mechanisms.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerConfig {
    pub kind: MixerKind,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_heads: usize,
    /// Per-head decay in [0, 1]; non-empty iff `kind` is a retention kind.
    pub gammas: Vec<f64>,
    pub reweight: ReweightParams,
    /// Rotary basis over one head's features (shared by all heads).
    pub rotary: RotaryBasis,
}

impl MixerConfig {
    pub fn new(
        kind: MixerKind,
        d_model: usize,
        d_k: usize,
        d_v: usize,
        n_heads: usize,
    ) -> Result<Self> {
        if n_heads == 0 || d_k % n_heads != 0 || d_v % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_k={d_k} and d_v={d_v} must be divisible by n_heads={n_heads}"
            )));
        }
        let head_dim = d_k / n_heads;
        if head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "per-head dim {head_dim} must be even"
            )));
        }
        let cfg = Self {
            kind,
            d_model,
            d_k,
            d_v,
            n_heads,
            gammas: default_gammas(kind, n_heads),
            reweight: default_reweight(kind),
            rotary: RotaryBasis::new(head_dim)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_k % self.n_heads != 0 || self.d_v % self.n_heads != 0 {
            return Err(Error::Config("head split does not divide d_k/d_v".into()));
        }
        if self.rotary.dim() != self.head_dim() {
            return Err(Error::Config(format!(
                "rotary basis dim {} != per-head dim {}",
                self.rotary.dim(),
                self.head_dim()
            )));
        }
        if self.kind.is_retention() {
            if self.gammas.len() != self.n_heads {
                return Err(Error::Config(
                    "retention kinds need one gamma per head".into(),
                ));
            }
            if self.gammas.iter().any(|g| !(0.0..=1.0).contains(g)) {
                return Err(Error::InvalidParameter(
                    "retention gammas must lie in [0, 1]".into(),
                ));
            }
            if self.d_v != self.d_model {
                return Err(Error::Config(
                    "retention gate requires d_v == d_model".into(),
                ));
            }
        } else if !self.gammas.is_empty() {
            return Err(Error::Config(
                "gammas are only valid for retention kinds".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_k / self.n_heads
    }

    pub fn dv_head(&self) -> usize {
        self.d_v / self.n_heads
    }

    /// Feature-map width per head (doubled for cosformer kinds).
    pub fn phi_dim(&self) -> usize {
        phi_dim(self.kind, self.head_dim())
    }
}

/// Projection weights (and, for retention kinds, gate weights) stored as
/// slots in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct MixerWeights {
    pub w_q: Slot,
    pub w_k: Slot,
    pub w_v: Slot,
    pub gate: Option<GateWeights>,
}

/// Retention output gate: swish(x W_G) elementwise on the group-normalized
/// head outputs, projected by W_O.
#[derive(Debug, Clone)]
pub struct GateWeights {
    pub w_g: Slot,
    pub w_o: Slot,
    /// One scale per head-group.
    pub gn_scale: Slot,
    /// One offset per head-group.
    pub gn_offset: Slot,
}

impl MixerWeights {
    /// Allocate and initialize under `prefix` (e.g. `fusion.layer0.mixer`).
    /// Projections are uniform in +-1/sqrt(fan_in); group-norm scale starts
    /// at 1, offset at 0.
    pub fn init(cfg: &MixerConfig, store: &mut ParamStore, rng: &mut Rng, prefix: &str) -> Self {
        let bound = 1.0 / (cfg.d_model as f64).sqrt();
        let w_q = store.alloc_uniform(&format!("{prefix}.w_q"), cfg.d_model * cfg.d_k, bound, rng);
        let w_k = store.alloc_uniform(&format!("{prefix}.w_k"), cfg.d_model * cfg.d_k, bound, rng);
        let w_v = store.alloc_uniform(&format!("{prefix}.w_v"), cfg.d_model * cfg.d_v, bound, rng);
        let gate = cfg.kind.is_retention().then(|| GateWeights {
            w_g: store.alloc_uniform(
                &format!("{prefix}.w_g"),
                cfg.d_model * cfg.d_model,
                bound,
                rng,
            ),
            w_o: store.alloc_uniform(
                &format!("{prefix}.w_o"),
                cfg.d_model * cfg.d_model,
                bound,
                rng,
            ),
            gn_scale: store.alloc_const(&format!("{prefix}.gn_scale"), cfg.n_heads, 1.0),
            gn_offset: store.alloc_const(&format!("{prefix}.gn_offset"), cfg.n_heads, 0.0),
        });
        Self {
            w_q,
            w_k,
            w_v,
            gate,
        }
    }
}

/// A chronologically merged token sequence: one row per acquisition.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// T x d_model, row-major.
    pub tokens: Vec<f64>,
    /// Non-decreasing positions: indices 0..T-1 or dates in days.
    pub positions: Vec<f64>,
    /// Sensor tag per token; diagnostics only, mixers are modality-blind.
    pub modality: Vec<u8>,
    pub d_model: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<f64>, positions: Vec<f64>, modality: Vec<u8>, d_model: usize) -> Result<Self> {
        let t = positions.len();
        if t == 0 {
            return Err(Error::Dimension("token sequence must have T >= 1".into()));
        }
        if tokens.len() != t * d_model || modality.len() != t {
            return Err(Error::Dimension(format!(
                "token sequence fields disagree: {} tokens x {}, {} positions, {} tags",
                tokens.len() / d_model.max(1),
                d_model,
                t,
                modality.len()
            )));
        }
        if positions.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Causality(
                "token positions must be non-decreasing".into(),
            ));
        }
        Ok(Self {
            tokens,
            positions,
            modality,
            d_model,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// max(positions) - min(positions).
    pub fn span(&self) -> f64 {
        self.positions[self.positions.len() - 1] - self.positions[0]
    }
}

/// Positions handed to the feature maps: sequence indices for index kinds,
/// days since the first acquisition for time kinds.
pub(crate) fn phi_positions(cfg: &MixerConfig, positions: &[f64]) -> Vec<f64> {
    if cfg.kind.is_time() {
        let first = positions[0];
        positions.iter().map(|p| p - first).collect()
    } else {
        (0..positions.len()).map(|i| i as f64).collect()
    }
}

/// Distance between two tokens as seen by decay/reweighting: index difference
/// or day difference depending on the kind.
pub(crate) fn pair_delta(cfg: &MixerConfig, phi_pos: &[f64], i: usize, j: usize) -> f64 {
    if cfg.kind.is_time() {
        phi_pos[i] - phi_pos[j]
    } else {
        (i - j) as f64
    }
}

pub(crate) fn check_span(cfg: &MixerConfig, seq: &TokenSequence) -> Result<()> {
    if cfg.kind.is_time() {
        let span = seq.span();
        if span > cfg.reweight.max_span * (1.0 + 1e-9) {
            return Err(Error::SpanExceeded {
                delta: span,
                max: cfg.reweight.max_span,
            });
        }
    }
    if cfg.kind.uses_cos_phase() && !cfg.kind.is_time() {
        let max_index = (seq.len() - 1) as f64;
        if max_index > cfg.reweight.max_span {
            return Err(Error::SpanExceeded {
                delta: max_index,
                max: cfg.reweight.max_span,
            });
        }
    }
    Ok(())
}
