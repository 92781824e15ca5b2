//! Deterministic generator of synthetic multi-modal, irregularly sampled,
//! unaligned image time series with masks, weather, and segmentation labels,
//! plus the MMTS single-file sample format and dataset manifests.
//!
//! All randomness is counter-based hashing of (seed, site, date, channel,
//! y, x), so regeneration of any part of a sample is consistent and
//! bit-identical across platforms.

use crate::error::{Error, Result};
use crate::heads::{N_WEATHER_DAYS, N_WEATHER_VARS};
use crate::rng::{hash_key, hash_normal, hash_unit};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const MMTS_MAGIC: &[u8; 4] = b"MMTS";
pub const MMTS_VERSION: u16 = 1;

/// Sensor identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    S1,
    S2,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::S1 => 1,
            Modality::S2 => 2,
        }
    }
}

/// Generator parameters; the defaults mimic 15 months of paired radar and
/// optical series over a small tile.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub h: usize,
    pub w: usize,
    pub c_s1: usize,
    pub c_s2: usize,
    pub duration_days: f64,
    pub revisit_s1: f64,
    pub revisit_s2: f64,
    /// Acquisition gaps are revisit +- jitter days.
    pub jitter_days: f64,
    pub cloud_prob: f64,
    pub swath_gap_prob: f64,
    pub seasonal_period: f64,
    /// Fraction of S2 dates carrying a label map.
    pub label_fraction: f64,
    pub noise_s2: f64,
    pub speckle_s1: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            h: 32,
            w: 32,
            c_s1: 2,
            c_s2: 10,
            duration_days: 450.0,
            revisit_s1: 12.0,
            revisit_s2: 10.0,
            jitter_days: 4.0,
            cloud_prob: 0.25,
            swath_gap_prob: 0.1,
            seasonal_period: 365.0,
            label_fraction: 0.4,
            noise_s2: 0.05,
            speckle_s1: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("cloud_prob", self.cloud_prob),
            ("swath_gap_prob", self.swath_gap_prob),
            ("label_fraction", self.label_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        if self.duration_days > crate::featmaps::ReweightParams::DEFAULT_TIME_SPAN_DAYS {
            return Err(Error::SpanExceeded {
                delta: self.duration_days,
                max: crate::featmaps::ReweightParams::DEFAULT_TIME_SPAN_DAYS,
            });
        }
        if self.h == 0 || self.w == 0 {
            return Err(Error::InvalidParameter("empty spatial dims".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct S1Acquisition {
    pub date: f64,
    /// c_s1 x h x w.
    pub image: Vec<f64>,
    pub valid: Vec<bool>,
    /// n_w x d_w window preceding the date.
    pub weather: Vec<f64>,
    pub azimuth: f64,
    pub incidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct S2Acquisition {
    pub date: f64,
    /// c_s2 x h x w.
    pub image: Vec<f64>,
    pub valid: Vec<bool>,
    /// true = cloudy (excluded from losses).
    pub cloud: Vec<bool>,
    pub weather: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMap {
    /// Matches one S2 acquisition date.
    pub date: f64,
    /// Class per pixel: 0 un-constructed, 1 solar panel, 2 out-of-site;
    /// 255 unlabeled.
    pub classes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalSample {
    pub h: usize,
    pub w: usize,
    pub c_s1: usize,
    pub c_s2: usize,
    pub site_id: u64,
    pub s1: Vec<S1Acquisition>,
    pub s2: Vec<S2Acquisition>,
    pub labels: Vec<LabeledMap>,
}

// hash stream tags
const T_START: u64 = 1;
const T_DATES: u64 = 2;
const T_FIELD: u64 = 3;
const T_EVENT: u64 = 4;
const T_NOISE_S2: u64 = 5;
const T_SPECKLE: u64 = 6;
const T_CLOUD: u64 = 7;
const T_SWATH: u64 = 8;
const T_ANGLE: u64 = 9;
const T_WEATHER: u64 = 10;
const T_LABELSEL: u64 = 11;
const T_BASE: u64 = 12;

struct SiteModel {
    start_day: f64,
    phase_a: f64,
    phase_b: f64,
    phase_c: f64,
    amp_a: f64,
    amp_b: f64,
    amp_c: f64,
    trend: f64,
    base_s2: Vec<f64>,
    weight_s2: Vec<f64>,
    solar_rects: Vec<(usize, usize, usize, usize, f64)>,
    outside_rect: Option<(usize, usize, usize, usize)>,
}

impl SiteModel {
    fn build(spec: &SyntheticSpec, site: u64) -> Self {
        let s = spec.seed;
        let u = |tag: u64, i: u64| hash_unit(&[s, site, tag, i]);
        let start_day = (hash_key(&[s, site, T_START]) % 3000) as f64;
        // the latent-to-channel mapping is shared by every site, so it is
        // learnable from a handful of training sites; per-site variation
        // lives in the phase/amplitude fields, events, and dates
        let base_s2 = (0..spec.c_s2)
            .map(|c| 0.3 * (1.7 * c as f64).sin())
            .collect();
        let weight_s2 = (0..spec.c_s2)
            .map(|c| 0.35 + 0.3 * (0.9 * c as f64 + 0.7).sin())
            .collect();
        let n_solar = 1 + (hash_key(&[s, site, T_EVENT, 0]) % 2) as usize;
        let mut solar_rects = Vec::new();
        for e in 0..n_solar {
            let e = e as u64;
            let rw = 6 + (hash_key(&[s, site, T_EVENT, 10 + e]) % 9) as usize;
            let rh = 6 + (hash_key(&[s, site, T_EVENT, 20 + e]) % 9) as usize;
            let x0 = (hash_key(&[s, site, T_EVENT, 30 + e]) % (spec.w.saturating_sub(rw) as u64 + 1))
                as usize;
            let y0 = (hash_key(&[s, site, T_EVENT, 40 + e]) % (spec.h.saturating_sub(rh) as u64 + 1))
                as usize;
            let t_c = start_day + (0.3 + 0.4 * u(T_EVENT, 50 + e)) * spec.duration_days;
            solar_rects.push((y0, x0, rh, rw, t_c));
        }
        let outside_rect = (hash_unit(&[s, site, T_EVENT, 60]) < 0.7).then(|| {
            let rw = 5 + (hash_key(&[s, site, T_EVENT, 61]) % 6) as usize;
            let rh = 5 + (hash_key(&[s, site, T_EVENT, 62]) % 6) as usize;
            let x0 = (hash_key(&[s, site, T_EVENT, 63]) % (spec.w.saturating_sub(rw) as u64 + 1))
                as usize;
            let y0 = (hash_key(&[s, site, T_EVENT, 64]) % (spec.h.saturating_sub(rh) as u64 + 1))
                as usize;
            (y0, x0, rh, rw)
        });
        Self {
            start_day,
            phase_a: u(T_FIELD, 1) - 0.5,
            phase_b: u(T_FIELD, 2) - 0.5,
            phase_c: u(T_FIELD, 3) * std::f64::consts::TAU,
            amp_a: u(T_FIELD, 4) - 0.5,
            amp_b: u(T_FIELD, 5) - 0.5,
            amp_c: u(T_FIELD, 6) * std::f64::consts::TAU,
            trend: 0.2 * u(T_FIELD, 7) - 0.1,
            base_s2,
            weight_s2,
            solar_rects,
            outside_rect,
        }
    }

    fn class_at(&self, y: usize, x: usize, date: f64) -> u8 {
        if let Some((y0, x0, rh, rw)) = self.outside_rect {
            if y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw {
                return 2;
            }
        }
        for &(y0, x0, rh, rw, t_c) in &self.solar_rects {
            if y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw && date >= t_c {
                return 1;
            }
        }
        0
    }

    /// Shared seasonal latent driving both sensors. The phase field varies
    /// smoothly but substantially within a tile, so per-pixel history is the
    /// only route to a good forecast.
    fn latent(&self, spec: &SyntheticSpec, y: usize, x: usize, date: f64) -> f64 {
        let fy = y as f64 / spec.h as f64;
        let fx = x as f64 / spec.w as f64;
        let tau = std::f64::consts::TAU;
        let phase = tau * (self.phase_a * fx + self.phase_b * fy)
            + self.phase_c
            + 1.2 * (tau * (1.5 * fx + 0.3 * self.phase_a)).sin() * (tau * 1.1 * fy).cos();
        let amp = 0.55 + 0.35 * (tau * (self.amp_a * fx + self.amp_b * fy) + self.amp_c).sin();
        amp * (tau * date / spec.seasonal_period + phase).sin()
            + self.trend * (date - self.start_day) / 365.0
    }
}

// solar/out-of-site signatures shared by every site, so classes are
// learnable across sites
fn s2_event_offset(class: u8, c: usize, c_s2: usize) -> f64 {
    match class {
        1 => {
            if c < c_s2 / 2 {
                1.1
            } else {
                -0.7
            }
        }
        2 => -0.6,
        _ => 0.0,
    }
}

fn s1_event_offset(class: u8, c: usize) -> f64 {
    match (class, c) {
        (1, 0) => 0.5,
        (1, _) => -0.3,
        (2, 0) => -0.25,
        (2, _) => 0.15,
        _ => 0.0,
    }
}

fn f32ify(v: f64) -> f64 {
    v as f32 as f64
}

fn acquisition_dates(spec: &SyntheticSpec, site: u64, modality: Modality, start: f64) -> Vec<f64> {
    let revisit = match modality {
        Modality::S1 => spec.revisit_s1,
        Modality::S2 => spec.revisit_s2,
    };
    let jit = spec.jitter_days;
    let mtag = modality.tag() as u64;
    let mut dates = Vec::new();
    let first = (hash_key(&[spec.seed, site, T_DATES, mtag, 0]) % (revisit as u64).max(1)) as f64;
    let mut date = start + first;
    let mut k = 1u64;
    while date <= start + spec.duration_days {
        dates.push(date);
        let span = (2.0 * jit + 1.0) as u64;
        let jitter = (hash_key(&[spec.seed, site, T_DATES, mtag, k]) % span) as f64 - jit;
        date += (revisit + jitter).max(1.0);
        k += 1;
    }
    dates
}

fn weather_window(spec: &SyntheticSpec, site: u64, model: &SiteModel, date: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(N_WEATHER_DAYS * N_WEATHER_VARS);
    for back in 0..N_WEATHER_DAYS {
        let day = date - (N_WEATHER_DAYS - back) as f64;
        for v in 0..N_WEATHER_VARS {
            let amp = 0.4 + 0.08 * v as f64;
            let phase = model.phase_c + 0.5 * v as f64;
            let seasonal =
                amp * (std::f64::consts::TAU * day / spec.seasonal_period + phase).sin();
            let noise =
                0.1 * hash_normal(&[spec.seed, site, T_WEATHER, day as u64, v as u64]);
            out.push(f32ify(seasonal + noise));
        }
    }
    out
}

fn cloud_mask(spec: &SyntheticSpec, site: u64, date: f64) -> Vec<bool> {
    let d = date as u64;
    let mut mask = vec![false; spec.h * spec.w];
    if hash_unit(&[spec.seed, site, T_CLOUD, d, 0]) >= spec.cloud_prob {
        return mask;
    }
    let n_blobs = 1 + hash_key(&[spec.seed, site, T_CLOUD, d, 1]) % 3;
    for b in 0..n_blobs {
        let cy = (hash_key(&[spec.seed, site, T_CLOUD, d, 10 + b]) % spec.h as u64) as f64;
        let cx = (hash_key(&[spec.seed, site, T_CLOUD, d, 20 + b]) % spec.w as u64) as f64;
        let r = spec.h as f64 * (0.15 + 0.25 * hash_unit(&[spec.seed, site, T_CLOUD, d, 30 + b]));
        for y in 0..spec.h {
            for x in 0..spec.w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                if dy * dy + dx * dx <= r * r {
                    mask[y * spec.w + x] = true;
                }
            }
        }
    }
    mask
}

fn swath_mask(spec: &SyntheticSpec, site: u64, date: f64) -> Vec<bool> {
    let d = date as u64;
    let mut valid = vec![true; spec.h * spec.w];
    if hash_unit(&[spec.seed, site, T_SWATH, d, 0]) >= spec.swath_gap_prob {
        return valid;
    }
    // a vertical band is out of swath
    let width = spec.w / 4 + (hash_key(&[spec.seed, site, T_SWATH, d, 1]) % (spec.w as u64 / 4)) as usize;
    let from_left = hash_unit(&[spec.seed, site, T_SWATH, d, 2]) < 0.5;
    for y in 0..spec.h {
        for x in 0..spec.w {
            let gap = if from_left { x < width } else { x >= spec.w - width };
            if gap {
                valid[y * spec.w + x] = false;
            }
        }
    }
    valid
}

/// Fully reproducible synthetic sample for site `site_id`.
pub fn generate_sample(spec: &SyntheticSpec, site_id: u64) -> Result<MultiModalSample> {
    spec.validate()?;
    let model = SiteModel::build(spec, site_id);
    let s1_dates = acquisition_dates(spec, site_id, Modality::S1, model.start_day);
    let mut s2_dates = acquisition_dates(spec, site_id, Modality::S2, model.start_day);
    // de-collide: same-day S2 acquisitions move half a day earlier (the
    // optical morning pass), keeping dates distinct across modalities
    for d in s2_dates.iter_mut() {
        if s1_dates.contains(d) {
            *d -= 0.5;
        }
    }
    let hw = spec.h * spec.w;

    let mut s1 = Vec::with_capacity(s1_dates.len());
    for &date in &s1_dates {
        let mut image = vec![0.0; spec.c_s1 * hw];
        for y in 0..spec.h {
            for x in 0..spec.w {
                let latent = model.latent(spec, y, x, date);
                let class = model.class_at(y, x, date);
                for c in 0..spec.c_s1 {
                    let mean = match c {
                        0 => 0.5 + 0.35 * latent,
                        _ => 0.2 - 0.3 * latent,
                    } + s1_event_offset(class, c);
                    let speckle = 1.0
                        + spec.speckle_s1
                            * hash_normal(&[
                                spec.seed,
                                site_id,
                                T_SPECKLE,
                                date as u64,
                                c as u64,
                                y as u64,
                                x as u64,
                            ]);
                    image[c * hw + y * spec.w + x] = f32ify(mean * speckle);
                }
            }
        }
        s1.push(S1Acquisition {
            date,
            image,
            valid: swath_mask(spec, site_id, date),
            weather: weather_window(spec, site_id, &model, date),
            azimuth: f32ify(
                hash_unit(&[spec.seed, site_id, T_ANGLE, date as u64, 0]) * std::f64::consts::TAU,
            ),
            incidence: f32ify(0.3 + 0.5 * hash_unit(&[spec.seed, site_id, T_ANGLE, date as u64, 1])),
        });
    }

    let mut s2 = Vec::with_capacity(s2_dates.len());
    for &date in &s2_dates {
        let mut image = vec![0.0; spec.c_s2 * hw];
        for y in 0..spec.h {
            for x in 0..spec.w {
                let latent = model.latent(spec, y, x, date);
                let class = model.class_at(y, x, date);
                for c in 0..spec.c_s2 {
                    let noise = spec.noise_s2
                        * hash_normal(&[
                            spec.seed,
                            site_id,
                            T_NOISE_S2,
                            date as u64,
                            c as u64,
                            y as u64,
                            x as u64,
                        ]);
                    let v = model.base_s2[c]
                        + model.weight_s2[c] * latent
                        + s2_event_offset(class, c, spec.c_s2)
                        + noise;
                    image[c * hw + y * spec.w + x] = f32ify(v);
                }
            }
        }
        s2.push(S2Acquisition {
            date,
            image,
            valid: vec![true; hw],
            cloud: cloud_mask(spec, site_id, date),
            weather: weather_window(spec, site_id, &model, date),
        });
    }

    let labels = s2_dates
        .iter()
        .filter(|d| hash_unit(&[spec.seed, site_id, T_LABELSEL, **d as u64]) < spec.label_fraction)
        .map(|&date| LabeledMap {
            date,
            classes: (0..hw)
                .map(|p| model.class_at(p / spec.w, p % spec.w, date))
                .collect(),
        })
        .collect();

    Ok(MultiModalSample {
        h: spec.h,
        w: spec.w,
        c_s1: spec.c_s1,
        c_s2: spec.c_s2,
        site_id,
        s1,
        s2,
        labels,
    })
}

// ---------------------------------------------------------------------------
// MMTS file format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct MmtsHeader {
    h: usize,
    w: usize,
    c_s1: usize,
    c_s2: usize,
    site_id: u64,
    s1: Vec<S1Meta>,
    s2: Vec<S2Meta>,
    label_dates: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct S1Meta {
    date: f64,
    azimuth: f64,
    incidence: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct S2Meta {
    date: f64,
}

/// Write a sample: magic, version, JSON header, then raw little-endian
/// 32-bit planes in declared order (per S1: image, validity, weather; per
/// S2: image, validity, cloud, weather; then label maps).
pub fn write_sample(path: &Path, sample: &MultiModalSample) -> Result<()> {
    let header = MmtsHeader {
        h: sample.h,
        w: sample.w,
        c_s1: sample.c_s1,
        c_s2: sample.c_s2,
        site_id: sample.site_id,
        s1: sample
            .s1
            .iter()
            .map(|a| S1Meta {
                date: a.date,
                azimuth: a.azimuth,
                incidence: a.incidence,
            })
            .collect(),
        s2: sample.s2.iter().map(|a| S2Meta { date: a.date }).collect(),
        label_dates: sample.labels.iter().map(|l| l.date).collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MMTS_MAGIC);
    buf.extend_from_slice(&MMTS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    let push_f32 = |buf: &mut Vec<u8>, values: &[f64]| {
        for &v in values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    let push_bool = |buf: &mut Vec<u8>, values: &[bool]| {
        buf.extend(values.iter().map(|&b| b as u8));
    };
    for acq in &sample.s1 {
        push_f32(&mut buf, &acq.image);
        push_bool(&mut buf, &acq.valid);
        push_f32(&mut buf, &acq.weather);
    }
    for acq in &sample.s2 {
        push_f32(&mut buf, &acq.image);
        push_bool(&mut buf, &acq.valid);
        push_bool(&mut buf, &acq.cloud);
        push_f32(&mut buf, &acq.weather);
    }
    for label in &sample.labels {
        buf.extend_from_slice(&label.classes);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                msg: format!(
                    "truncated payload: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn bools(&mut self, n: usize) -> Result<Vec<bool>> {
        Ok(self.take(n)?.iter().map(|&b| b != 0).collect())
    }
}

pub fn read_sample(path: &Path) -> Result<MultiModalSample> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let magic = cur.take(4)?;
    if magic != MMTS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MMTS_MAGIC:?}"),
        });
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != MMTS_VERSION {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let header_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let header_start = cur.pos as u64;
    let header: MmtsHeader =
        serde_json::from_slice(cur.take(header_len)?).map_err(|e| Error::Parse {
            offset: header_start,
            msg: format!("malformed header: {e}"),
        })?;
    let hw = header.h * header.w;
    let wlen = N_WEATHER_DAYS * N_WEATHER_VARS;
    let mut s1 = Vec::with_capacity(header.s1.len());
    for meta in &header.s1 {
        s1.push(S1Acquisition {
            date: meta.date,
            image: cur.f32s(header.c_s1 * hw)?,
            valid: cur.bools(hw)?,
            weather: cur.f32s(wlen)?,
            azimuth: meta.azimuth,
            incidence: meta.incidence,
        });
    }
    let mut s2 = Vec::with_capacity(header.s2.len());
    for meta in &header.s2 {
        s2.push(S2Acquisition {
            date: meta.date,
            image: cur.f32s(header.c_s2 * hw)?,
            valid: cur.bools(hw)?,
            cloud: cur.bools(hw)?,
            weather: cur.f32s(wlen)?,
        });
    }
    let mut labels = Vec::with_capacity(header.label_dates.len());
    for &date in &header.label_dates {
        labels.push(LabeledMap {
            date,
            classes: cur.take(hw)?.to_vec(),
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Parse {
            offset: cur.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    Ok(MultiModalSample {
        h: header.h,
        w: header.w,
        c_s1: header.c_s1,
        c_s2: header.c_s2,
        site_id: header.site_id,
        s1,
        s2,
        labels,
    })
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
    pub site_id: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_vec_pretty(self)?)?)
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn paths_for(&self, split: &Split) -> Vec<PathBuf> {
        self.samples
            .iter()
            .filter(|e| e.split == *split)
            .map(|e| e.path.clone())
            .collect()
    }
}

/// Generate `n` samples into `dir` with an 8/2/2-proportioned split and
/// write `manifest.json` alongside them.
pub fn generate_dataset(spec: &SyntheticSpec, dir: &Path, n: usize) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(n);
    let n_train = (n * 8).div_euclid(12).max(1);
    let n_val = ((n - n_train) / 2).max(1).min(n - n_train);
    for site in 0..n {
        let sample = generate_sample(spec, site as u64)?;
        let path = dir.join(format!("sample_{site:03}.mmts"));
        write_sample(&path, &sample)?;
        let split = if site < n_train {
            Split::Train
        } else if site < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        entries.push(ManifestEntry {
            path,
            split,
            site_id: site as u64,
        });
    }
    let manifest = Manifest { samples: entries };
    manifest.write(&dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            h: 16,
            w: 16,
            duration_days: 200.0,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_sample(&spec, 3).unwrap();
        let b = generate_sample(&spec, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(&spec, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_cloud_probability_means_no_clouds() {
        let spec = SyntheticSpec {
            cloud_prob: 0.0,
            ..small_spec()
        };
        let sample = generate_sample(&spec, 0).unwrap();
        for acq in &sample.s2 {
            assert!(acq.cloud.iter().all(|&c| !c));
        }
    }

    #[test]
    fn acquisition_gaps_respect_revisit_jitter() {
        let spec = SyntheticSpec::default();
        let mut n_gaps = 0;
        for site in 0..40 {
            let sample = generate_sample(&spec, site).unwrap();
            for (dates, revisit) in [
                (
                    sample.s1.iter().map(|a| a.date).collect::<Vec<_>>(),
                    spec.revisit_s1,
                ),
                (
                    sample.s2.iter().map(|a| a.date).collect::<Vec<_>>(),
                    spec.revisit_s2,
                ),
            ] {
                for w in dates.windows(2) {
                    let gap = w[1] - w[0];
                    // the half-day de-collision shift can stretch a gap by 0.5
                    assert!(
                        gap >= revisit - spec.jitter_days - 0.5
                            && gap <= revisit + spec.jitter_days + 0.5,
                        "gap {gap} outside [{}, {}]",
                        revisit - spec.jitter_days,
                        revisit + spec.jitter_days
                    );
                    n_gaps += 1;
                }
            }
        }
        assert!(n_gaps > 1000, "only {n_gaps} gaps sampled");
    }

    #[test]
    fn dates_strictly_increasing_and_values_bounded() {
        let sample = generate_sample(&SyntheticSpec::default(), 7).unwrap();
        for dates in [
            sample.s1.iter().map(|a| a.date).collect::<Vec<_>>(),
            sample.s2.iter().map(|a| a.date).collect::<Vec<_>>(),
        ] {
            assert!(dates.windows(2).all(|w| w[1] > w[0]));
        }
        for acq in &sample.s2 {
            assert!(acq.image.iter().all(|v| v.is_finite() && v.abs() <= 3.0));
        }
        for acq in &sample.s1 {
            assert!(acq.image.iter().all(|v| v.is_finite() && v.abs() <= 3.0));
        }
    }

    #[test]
    fn labels_exist_and_match_s2_dates() {
        let mut any = 0;
        for site in 0..10 {
            let sample = generate_sample(&small_spec(), site).unwrap();
            let s2_dates: Vec<f64> = sample.s2.iter().map(|a| a.date).collect();
            for label in &sample.labels {
                assert!(s2_dates.contains(&label.date));
                assert!(label.classes.iter().all(|&c| c <= 2));
                any += 1;
            }
        }
        assert!(any > 5, "label maps too rare: {any}");
    }

    #[test]
    fn solar_class_appears_after_construction() {
        let spec = small_spec();
        for site in 0..20 {
            let sample = generate_sample(&spec, site).unwrap();
            let counts: Vec<usize> = sample
                .labels
                .iter()
                .map(|l| l.classes.iter().filter(|&&c| c == 1).count())
                .collect();
            // counts are non-decreasing over time (construction happens once)
            for w in counts.windows(2) {
                assert!(w[1] >= w[0]);
            }
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.mmts");
        let sample = generate_sample(&small_spec(), 5).unwrap();
        write_sample(&path, &sample).unwrap();
        let back = read_sample(&path).unwrap();
        assert_eq!(sample, back);
    }

    #[test]
    fn truncated_and_corrupt_files_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.mmts");
        let sample = generate_sample(&small_spec(), 5).unwrap();
        write_sample(&path, &sample).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let tr = dir.path().join("t.mmts");
        std::fs::write(&tr, &bytes[..bytes.len() - 100]).unwrap();
        match read_sample(&tr) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let bp = dir.path().join("b.mmts");
        std::fs::write(&bp, &bad).unwrap();
        match read_sample(&bp) {
            Err(Error::Parse { offset, msg }) => {
                assert_eq!(offset, 0);
                assert!(msg.contains("magic"));
            }
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_roundtrip_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            h: 16,
            w: 16,
            duration_days: 60.0,
            ..SyntheticSpec::default()
        };
        let manifest = generate_dataset(&spec, dir.path(), 12).unwrap();
        assert_eq!(manifest.samples.len(), 12);
        assert_eq!(manifest.paths_for(&Split::Train).len(), 8);
        assert_eq!(manifest.paths_for(&Split::Val).len(), 2);
        assert_eq!(manifest.paths_for(&Split::Test).len(), 2);
        let back = Manifest::read(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(back.samples.len(), 12);
        for entry in &back.samples {
            assert!(entry.path.exists());
        }
    }
}
