//! Positive feature maps, rotary bases, and distance-reweighting
//! coefficients shared by all sequence mixers.
//!
//! Positions are token indices for index-based mixers and acquisition dates
//! (days since the first acquisition in the sequence) for time-based ones.

use crate::error::{Error, Result};
use crate::mixers::MixerKind;

/// Relative float slack tolerated on `delta <= M` before raising; distances
/// computed from float subtraction can overshoot the span by a few ulps.
const SPAN_SLACK: f64 = 1e-9;

/// Per-head rotary basis: `dim/2` rotation rates in radians per unit
/// distance, geometrically spaced from 1 down to ~1/10000.
#[derive(Debug, Clone, PartialEq)]
pub struct RotaryBasis {
    dim: usize,
    thetas: Vec<f64>,
}

impl RotaryBasis {
    /// Standard basis: thetas[i] = 1/10000^(2(i-1)/dim) for i in 1..=dim/2.
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Dimension(format!(
                "rotary basis dim must be even and positive, got {dim}"
            )));
        }
        let half = dim / 2;
        let thetas = (0..half)
            .map(|k| 10000f64.powf(-2.0 * k as f64 / dim as f64))
            .collect();
        Ok(Self { dim, thetas })
    }

    /// Basis with explicit rotation rates (used by tests and degenerate
    /// configurations; not validated against the standard schedule).
    pub fn from_thetas(thetas: Vec<f64>) -> Result<Self> {
        if thetas.is_empty() {
            return Err(Error::Dimension("rotary basis needs at least one angle".into()));
        }
        Ok(Self {
            dim: thetas.len() * 2,
            thetas,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }
}

/// Maximum token distance for cosine reweighting, in the same units as the
/// token positions (indices or days).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReweightParams {
    pub max_span: f64,
}

impl ReweightParams {
    /// Default span for date-based mixers: 700 days.
    pub const DEFAULT_TIME_SPAN_DAYS: f64 = 700.0;

    pub fn new(max_span: f64) -> Result<Self> {
        if !(max_span > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "max span must be positive, got {max_span}"
            )));
        }
        Ok(Self { max_span })
    }
}

impl Default for ReweightParams {
    fn default() -> Self {
        Self {
            max_span: Self::DEFAULT_TIME_SPAN_DAYS,
        }
    }
}

/// Elementwise elu(u) + 1, floored at the smallest positive normal so the
/// output stays strictly positive even when exp underflows.
pub fn psi(u: &[f64]) -> Result<Vec<f64>> {
    if !u.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("psi input must be finite".into()));
    }
    Ok(u.iter().map(|&v| psi_scalar(v)).collect())
}

pub(crate) fn psi_scalar(v: f64) -> f64 {
    let out = if v >= 0.0 { v + 1.0 } else { v.exp() };
    out.max(f64::MIN_POSITIVE)
}

/// Derivative of `psi` at `v`: 1 for v >= 0, e^v below.
pub(crate) fn psi_grad_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        v.exp()
    }
}

/// Rotate consecutive feature pairs (u[2k], u[2k+1]) by angle t * theta_k.
/// Norm-preserving; the relative angle between two rotated vectors depends
/// only on the difference of their positions.
pub fn rotary_apply(u: &[f64], t: f64, basis: &RotaryBasis) -> Result<Vec<f64>> {
    if u.len() != basis.dim {
        return Err(Error::Dimension(format!(
            "rotary input has {} features, basis expects {}",
            u.len(),
            basis.dim
        )));
    }
    let mut out = vec![0.0; u.len()];
    rotary_apply_into(u, t, basis, &mut out);
    Ok(out)
}

pub(crate) fn rotary_apply_into(u: &[f64], t: f64, basis: &RotaryBasis, out: &mut [f64]) {
    for (k, &theta) in basis.thetas.iter().enumerate() {
        let angle = t * theta;
        let (sin, cos) = angle.sin_cos();
        let a = u[2 * k];
        let b = u[2 * k + 1];
        out[2 * k] = a * cos - b * sin;
        out[2 * k + 1] = a * sin + b * cos;
    }
}

/// Cosine reweighting cos(pi * delta / (2M)), in [0, 1] and monotone
/// decreasing on [0, M].
pub fn cos_reweight(delta: f64, params: &ReweightParams) -> Result<f64> {
    let m = params.max_span;
    if delta < 0.0 {
        return Err(Error::Causality(format!(
            "reweight distance must be non-negative, got {delta}"
        )));
    }
    if delta > m * (1.0 + SPAN_SLACK) {
        return Err(Error::SpanExceeded { delta, max: m });
    }
    if delta >= m {
        // Marginal float overshoot clamps to the zero weight at delta = M.
        return Ok(0.0);
    }
    Ok((std::f64::consts::FRAC_PI_2 * delta / m).cos())
}

/// Exponential decay gamma^delta.
pub fn decay_weight(gamma: f64, delta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidParameter(format!(
            "decay gamma must lie in [0, 1], got {gamma}"
        )));
    }
    if delta < 0.0 {
        return Err(Error::Causality(format!(
            "decay distance must be non-negative, got {delta}"
        )));
    }
    if delta == 0.0 {
        return Ok(1.0);
    }
    Ok(gamma.powf(delta))
}

/// Which side of the separable product a feature map feeds. Rotary kinds
/// fold their 1/dim stabilization into the query side only; the product is
/// the same as splitting it, and the key-side accumulators stay well scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSide {
    Query,
    Key,
}

/// The mechanism's feature map on the query side (this is the map whose
/// product with the key-side map yields the similarity score numerator).
pub fn feature_map(
    kind: MixerKind,
    u: &[f64],
    position: f64,
    reweight: &ReweightParams,
    basis: &RotaryBasis,
) -> Result<Vec<f64>> {
    feature_map_side(kind, u, position, reweight, basis, MapSide::Query)
}

/// Feature map for either side of the product.
pub fn feature_map_side(
    kind: MixerKind,
    u: &[f64],
    position: f64,
    reweight: &ReweightParams,
    basis: &RotaryBasis,
    side: MapSide,
) -> Result<Vec<f64>> {
    let p = psi(u)?;
    match kind {
        MixerKind::Linear => Ok(p),
        MixerKind::Cosformer | MixerKind::TimeCosformer => {
            let (cos, sin) = cos_sin_phase(position, reweight)?;
            let mut out = Vec::with_capacity(2 * p.len());
            out.extend(p.iter().map(|&v| cos * v));
            out.extend(p.iter().map(|&v| sin * v));
            Ok(out)
        }
        MixerKind::Linroformer
        | MixerKind::TimeLinroformer
        | MixerKind::Retention
        | MixerKind::TimeRetention => {
            if u.len() != basis.dim() {
                return Err(Error::Dimension(format!(
                    "feature map input has {} features, rotary basis expects {}",
                    u.len(),
                    basis.dim()
                )));
            }
            let mut out = vec![0.0; p.len()];
            rotary_apply_into(&p, position, basis, &mut out);
            if side == MapSide::Query {
                let scale = 1.0 / basis.dim() as f64;
                for v in out.iter_mut() {
                    *v *= scale;
                }
            }
            Ok(out)
        }
        MixerKind::TransformerNoncausal | MixerKind::TransformerCausal => Err(Error::Config(
            "transformer kinds use softmax similarity, not a separable feature map".into(),
        )),
    }
}

/// cos/sin of the half-pi phase angle used by the cosformer map; the angle
/// saturates at pi/2 under the same span slack rule as `cos_reweight`.
pub(crate) fn cos_sin_phase(position: f64, reweight: &ReweightParams) -> Result<(f64, f64)> {
    let m = reweight.max_span;
    if position < 0.0 {
        return Err(Error::Causality(format!(
            "cosformer position must be non-negative, got {position}"
        )));
    }
    if position > m * (1.0 + SPAN_SLACK) {
        return Err(Error::SpanExceeded {
            delta: position,
            max: m,
        });
    }
    if position >= m {
        return Ok((0.0, 1.0));
    }
    let angle = std::f64::consts::FRAC_PI_2 * position / m;
    let (sin, cos) = angle.sin_cos();
    Ok((cos, sin))
}

/// Feature-map output length for a given per-head input width.
pub fn phi_dim(kind: MixerKind, head_dim: usize) -> usize {
    match kind {
        MixerKind::Cosformer | MixerKind::TimeCosformer => 2 * head_dim,
        _ => head_dim,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn psi_known_values() {
        assert_eq!(psi(&[0.0, 0.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(psi(&[1.0]).unwrap(), vec![2.0]);
        // elu(-20) + 1 = e^-20 = 2.0611536e-9, strictly inside (0, 1e-8).
        let v = psi(&[-20.0]).unwrap()[0];
        assert!(v > 0.0 && v < 1e-8, "{v}");
        assert_close(v, 2.061153622438558e-9, 1e-22);
    }

    #[test]
    fn psi_rejects_non_finite() {
        assert!(psi(&[f64::NAN]).is_err());
        assert!(psi(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn psi_positive_on_extreme_inputs() {
        for &v in &[-1e308, -1e4, -745.0, -1.0, 0.0, 1.0, 700.0, 1e308] {
            assert!(psi(&[v]).unwrap()[0] > 0.0, "psi({v}) not positive");
        }
    }

    #[test]
    fn rotary_zero_distance_is_identity() {
        let basis = RotaryBasis::new(6).unwrap();
        let u = [0.3, -1.2, 0.7, 2.0, -0.1, 0.4];
        assert_eq!(rotary_apply(&u, 0.0, &basis).unwrap(), u.to_vec());
    }

    #[test]
    fn rotary_quarter_turn() {
        let basis = RotaryBasis::from_thetas(vec![std::f64::consts::FRAC_PI_2]).unwrap();
        let out = rotary_apply(&[1.0, 0.0], 1.0, &basis).unwrap();
        assert_close(out[0], 0.0, 1e-15);
        assert_close(out[1], 1.0, 1e-15);
    }

    #[test]
    fn rotary_preserves_norm() {
        let basis = RotaryBasis::new(8).unwrap();
        let mut rng = Rng::new(11);
        let u: Vec<f64> = (0..8).map(|_| rng.uniform(2.0)).collect();
        let out = rotary_apply(&u, 3.7, &basis).unwrap();
        let n_in: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n_out: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_close(n_in, n_out, 1e-12);
    }

    #[test]
    fn rotary_rejects_odd_length() {
        let basis = RotaryBasis::new(4).unwrap();
        assert!(rotary_apply(&[1.0, 2.0, 3.0], 1.0, &basis).is_err());
    }

    #[test]
    fn rotary_basis_schedule() {
        let basis = RotaryBasis::new(8).unwrap();
        // thetas strictly decreasing from 1.
        assert_eq!(basis.thetas()[0], 1.0);
        for w in basis.thetas().windows(2) {
            assert!(w[1] < w[0]);
        }
        assert_close(basis.thetas()[1], 10000f64.powf(-2.0 / 8.0), 1e-15);
    }

    #[test]
    fn cos_reweight_endpoints_and_interior() {
        let params = ReweightParams::new(700.0).unwrap();
        assert_eq!(cos_reweight(0.0, &params).unwrap(), 1.0);
        assert_eq!(cos_reweight(700.0, &params).unwrap(), 0.0);
        // cos(pi/6) at delta = M/3
        assert_close(
            cos_reweight(700.0 / 3.0, &params).unwrap(),
            0.8660254037844387,
            1e-12,
        );
    }

    #[test]
    fn cos_reweight_errors() {
        let params = ReweightParams::new(100.0).unwrap();
        assert!(matches!(
            cos_reweight(-1.0, &params),
            Err(Error::Causality(_))
        ));
        assert!(matches!(
            cos_reweight(100.1, &params),
            Err(Error::SpanExceeded { .. })
        ));
        // marginal float overshoot clamps
        assert_eq!(cos_reweight(100.0 * (1.0 + 5e-10), &params).unwrap(), 0.0);
    }

    #[test]
    fn cos_reweight_monotone_on_grid() {
        let params = ReweightParams::new(700.0).unwrap();
        let mut prev = f64::INFINITY;
        for i in 0..=700 {
            let w = cos_reweight(i as f64, &params).unwrap();
            assert!(w <= prev);
            prev = w;
        }
    }

    #[test]
    fn decay_weight_known_values() {
        assert_eq!(decay_weight(1.0, 500.0).unwrap(), 1.0);
        assert_eq!(decay_weight(0.5, 3.0).unwrap(), 0.125);
        // 0.96875^12 = (31/32)^12, exact integer ratio as the oracle.
        let expected = 31f64.powi(12) / 32f64.powi(12);
        assert_close(decay_weight(0.96875, 12.0).unwrap(), expected, 1e-15);
        assert_close(expected, 0.6831886, 1e-7);
    }

    #[test]
    fn decay_weight_monotone_and_validated() {
        assert!(decay_weight(1.5, 1.0).is_err());
        assert!(decay_weight(-0.1, 1.0).is_err());
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let w = decay_weight(0.97, i as f64).unwrap();
            assert!(w <= prev);
            prev = w;
        }
    }

    #[test]
    fn feature_map_linear_and_cosformer() {
        let rw = ReweightParams::new(700.0).unwrap();
        let basis = RotaryBasis::new(2).unwrap();
        let out = feature_map(MixerKind::Linear, &[0.0, 0.0], 0.0, &rw, &basis).unwrap();
        assert_eq!(out, vec![1.0, 1.0]);

        // position 0: sin part vanishes.
        let out = feature_map(MixerKind::Cosformer, &[0.5, -0.5], 0.0, &rw, &basis).unwrap();
        let p = psi(&[0.5, -0.5]).unwrap();
        assert_eq!(&out[..2], &p[..]);
        assert_eq!(&out[2..], &[0.0, 0.0]);
    }

    #[test]
    fn feature_map_rotary_scaling_is_query_side_only() {
        let rw = ReweightParams::new(700.0).unwrap();
        let basis = RotaryBasis::new(2).unwrap();
        // psi([1,0]) = [2,1]; zero rotation; query side divides by dim=2.
        let q = feature_map(MixerKind::Linroformer, &[1.0, 0.0], 0.0, &rw, &basis).unwrap();
        assert_eq!(q, vec![1.0, 0.5]);
        let k = feature_map_side(
            MixerKind::Linroformer,
            &[1.0, 0.0],
            0.0,
            &rw,
            &basis,
            MapSide::Key,
        )
        .unwrap();
        assert_eq!(k, vec![2.0, 1.0]);
    }

    #[test]
    fn cosformer_separability_identity() {
        // phi(q, i) . phi(k, j) = cos(pi (i-j) / 2M) psi(q).psi(k)
        let rw = ReweightParams::new(700.0).unwrap();
        let basis = RotaryBasis::new(4).unwrap();
        let mut rng = Rng::new(5);
        for trial in 0..50 {
            let q: Vec<f64> = (0..4).map(|_| rng.uniform(2.0)).collect();
            let k: Vec<f64> = (0..4).map(|_| rng.uniform(2.0)).collect();
            let j = rng.next_f64() * 600.0;
            let i = j + rng.next_f64() * (700.0 - j);
            let fq = feature_map(MixerKind::Cosformer, &q, i, &rw, &basis).unwrap();
            let fk = feature_map_side(MixerKind::Cosformer, &k, j, &rw, &basis, MapSide::Key)
                .unwrap();
            let lhs = crate::linalg::dot(&fq, &fk);
            let rhs = cos_reweight(i - j, &rw).unwrap()
                * crate::linalg::dot(&psi(&q).unwrap(), &psi(&k).unwrap());
            let denom = rhs.abs().max(1e-30);
            assert!(
                ((lhs - rhs) / denom).abs() < 1e-10,
                "trial {trial}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn rotary_relative_identity() {
        // R(i)a . R(j)b = a . R(j-i)b = R(i-j)a . b
        let basis = RotaryBasis::new(8).unwrap();
        let mut rng = Rng::new(9);
        for _ in 0..200 {
            let a: Vec<f64> = (0..8).map(|_| rng.uniform(1.5)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.uniform(1.5)).collect();
            let i = rng.uniform(1000.0);
            let j = rng.uniform(1000.0);
            let lhs = crate::linalg::dot(
                &rotary_apply(&a, i, &basis).unwrap(),
                &rotary_apply(&b, j, &basis).unwrap(),
            );
            let mid = crate::linalg::dot(&a, &rotary_apply(&b, j - i, &basis).unwrap());
            let rhs = crate::linalg::dot(&rotary_apply(&a, i - j, &basis).unwrap(), &b);
            let scale = lhs.abs().max(1e-12);
            assert!(((lhs - mid) / scale).abs() < 1e-9);
            assert!(((lhs - rhs) / scale).abs() < 1e-9);
        }
    }

    #[test]
    fn unknown_kind_feature_map_is_config_error() {
        let rw = ReweightParams::default();
        let basis = RotaryBasis::new(4).unwrap();
        assert!(matches!(
            feature_map(MixerKind::TransformerCausal, &[0.0; 4], 0.0, &rw, &basis),
            Err(Error::Config(_))
        ));
    }
}
