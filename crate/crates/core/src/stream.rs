//! Recurrent inference runtime: a long-lived session ingesting one
//! acquisition at a time with constant per-step memory, plus the
//! microbenchmark helpers behind the complexity-shape checks.

use crate::error::{Error, Result};
use crate::heads::ForecastAux;
use crate::mixers::{
    mix_parallel, state_init, MixerConfig, MixerWeights, RecurrentState, TokenSequence,
};
use crate::model::{Model, Task};
use crate::params::ParamStore;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

pub const SESSION_MAGIC: &[u8; 4] = b"MMSS";
pub const SESSION_VERSION: u16 = 1;

/// One incoming acquisition.
#[derive(Debug, Clone)]
pub struct StreamAcquisition {
    /// 1 = S1, 2 = S2.
    pub modality: u8,
    pub date: f64,
    /// C x H x W.
    pub image: Vec<f64>,
    pub valid: Vec<bool>,
    /// S2 only.
    pub cloud: Option<Vec<bool>>,
    pub weather: Vec<f64>,
    /// S1 only.
    pub angles: Option<(f64, f64)>,
}

/// What one ingest emits.
#[derive(Debug, Clone)]
pub enum StreamOutput {
    /// Prediction of this acquisition made from the state before it
    /// arrived (None for the very first acquisition), plus the realized
    /// masked MSE against the arrived image.
    Forecast {
        prediction: Option<Vec<f64>>,
        mse_vs_actual: Option<f64>,
    },
    /// Per-pixel class map and logits at this acquisition.
    Segmentation { classes: Vec<u8>, logits: Vec<f64> },
}

/// Long-lived recurrent session over one site.
pub struct StreamSession {
    pub model: Model,
    pub task: Task,
    pub h: usize,
    pub w: usize,
    /// [layer][pixel] mixer states at half resolution.
    states: Vec<Vec<RecurrentState>>,
    start_date: Option<f64>,
    last_date: f64,
    step_count: u64,
    /// Backbone rows of the previous acquisition (forecast task only).
    prev_y_rows: Option<Vec<f64>>,
    prev_date: f64,
}

impl StreamSession {
    /// Open a session; fails for mixer kinds without a recurrent form.
    pub fn open(model: Model, h: usize, w: usize) -> Result<StreamSession> {
        if !model.cfg.kind.has_recurrent_form() {
            return Err(Error::NoRecurrentForm(model.cfg.kind.name().into()));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Dimension(format!(
                "stream tile must be divisible by 16, got {h}x{w}"
            )));
        }
        let mixer_cfg = model.cfg.mixer_config()?;
        let pixels = (h / 2) * (w / 2);
        let states = (0..model.cfg.n_layers)
            .map(|_| {
                (0..pixels)
                    .map(|_| state_init(&mixer_cfg))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let task = model.cfg.task;
        Ok(StreamSession {
            model,
            task,
            h,
            w,
            states,
            start_date: None,
            last_date: f64::NEG_INFINITY,
            step_count: 0,
            prev_y_rows: None,
            prev_date: f64::NEG_INFINITY,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step_count
    }

    /// Backbone rows ((H*W) x d_model) of the most recent acquisition.
    pub fn latest_rows(&self) -> Option<&[f64]> {
        self.prev_y_rows.as_deref()
    }

    /// Mixer state bytes currently held, independent of how many
    /// acquisitions have been ingested.
    pub fn state_bytes(&self) -> usize {
        self.states
            .iter()
            .flat_map(|layer| layer.iter().map(|s| s.byte_len()))
            .sum()
    }

    /// Process one acquisition fully and emit the task output.
    pub fn ingest(&mut self, acq: &StreamAcquisition) -> Result<StreamOutput> {
        if self.step_count > 0 && acq.date < self.last_date {
            return Err(Error::OutOfOrder {
                got: acq.date,
                last: self.last_date,
            });
        }
        let start = *self.start_date.get_or_insert(acq.date);
        let position = acq.date - start;
        let mixer_cfg = self.model.cfg.mixer_config()?;
        if mixer_cfg.kind.is_time() && position > mixer_cfg.reweight.max_span * (1.0 + 1e-9) {
            return Err(Error::SpanExceeded {
                delta: position,
                max: mixer_cfg.reweight.max_span,
            });
        }
        let store = &self.model.store;
        let sse = match acq.modality {
            1 => self
                .model
                .backbone
                .sse_s1
                .as_ref()
                .ok_or_else(|| Error::Config("model has no S1 branch".into()))?,
            _ => &self.model.backbone.sse_s2,
        };
        let (feat, _) = sse.forward(store, &acq.image, self.h, self.w)?;
        let pixels_half = (self.h / 2) * (self.w / 2);
        let tokens = self.model.backbone.assembler.forward_single(
            store,
            &feat,
            acq.modality,
            position,
            pixels_half,
        );
        let fused = self.model.backbone.fusion.step(
            store,
            &tokens,
            pixels_half,
            position,
            &mut self.states,
        )?;
        // pixel shuffle to full resolution rows
        let dm = self.model.cfg.d_model;
        let mut planes = vec![0.0; dm * pixels_half];
        for px in 0..pixels_half {
            for c in 0..dm {
                planes[c * pixels_half + px] = fused[px * dm + c];
            }
        }
        let (full, _) = self
            .model
            .backbone
            .shuffle
            .forward(store, &planes, self.h / 2, self.w / 2);
        let hw = self.h * self.w;
        let mut y_rows = vec![0.0; hw * dm];
        for c in 0..dm {
            for px in 0..hw {
                y_rows[px * dm + c] = full[c * hw + px];
            }
        }

        let output = match self.task {
            Task::Forecast => {
                let mut prediction = None;
                let mut mse = None;
                if let Some(prev_rows) = &self.prev_y_rows {
                    let delta = acq.date - self.prev_date;
                    if delta > 0.0 {
                        let forecaster = self
                            .model
                            .forecaster
                            .as_ref()
                            .expect("forecast model has a head");
                        let aux = ForecastAux {
                            modality: acq.modality,
                            delta,
                            weather: acq.weather.clone(),
                            angles: acq.angles,
                        };
                        let (pred_rows, _) = forecaster.forward(store, prev_rows, hw, &aux)?;
                        let channels = if acq.modality == 1 {
                            self.model.cfg.c_s1
                        } else {
                            self.model.cfg.c_s2
                        };
                        // to channel-major planes for emission
                        let mut planes = vec![0.0; channels * hw];
                        let mut err_sum = 0.0;
                        let mut err_count = 0usize;
                        for px in 0..hw {
                            let usable =
                                acq.valid[px] && acq.cloud.as_ref().map_or(true, |c| !c[px]);
                            for c in 0..channels {
                                let p = pred_rows[px * channels + c];
                                planes[c * hw + px] = p;
                                if usable {
                                    let d = p - acq.image[c * hw + px];
                                    err_sum += d * d;
                                    err_count += 1;
                                }
                            }
                        }
                        prediction = Some(planes);
                        mse = (err_count > 0).then(|| err_sum / err_count as f64);
                    }
                }
                StreamOutput::Forecast {
                    prediction,
                    mse_vs_actual: mse,
                }
            }
            Task::Segmentation => {
                let head = self
                    .model
                    .seg_head
                    .as_ref()
                    .expect("segmentation model has a head");
                let logits = head.forward(store, &y_rows, hw);
                let classes = (0..hw)
                    .map(|px| {
                        let row = &logits[px * 3..(px + 1) * 3];
                        (0..3u8)
                            .max_by(|&a, &b| {
                                row[a as usize].partial_cmp(&row[b as usize]).unwrap()
                            })
                            .unwrap()
                    })
                    .collect();
                StreamOutput::Segmentation { classes, logits }
            }
        };
        self.prev_y_rows = Some(y_rows);
        self.prev_date = acq.date;
        self.last_date = acq.date;
        self.step_count += 1;
        Ok(output)
    }

    /// Serialize everything needed to continue this stream later; the model
    /// weights are not included (they live in the checkpoint).
    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Head<'a> {
            task: &'a Task,
            h: usize,
            w: usize,
            start_date: Option<f64>,
            last_date: f64,
            prev_date: f64,
            step_count: u64,
            n_layers: usize,
            has_prev_y: bool,
        }
        let head = Head {
            task: &self.task,
            h: self.h,
            w: self.w,
            start_date: self.start_date,
            last_date: self.last_date,
            prev_date: self.prev_date,
            step_count: self.step_count,
            n_layers: self.states.len(),
            has_prev_y: self.prev_y_rows.is_some(),
        };
        let head_json = serde_json::to_vec(&head)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(SESSION_MAGIC);
        buf.extend_from_slice(&SESSION_VERSION.to_le_bytes());
        buf.extend_from_slice(&(head_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&head_json);
        for layer in &self.states {
            for state in layer {
                let bytes = state.to_bytes();
                buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
                buf.extend_from_slice(&bytes);
            }
        }
        if let Some(rows) = &self.prev_y_rows {
            for v in rows {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Restore a session over a freshly loaded model.
    pub fn resume(model: Model, path: &Path) -> Result<StreamSession> {
        #[derive(Deserialize)]
        struct Head {
            task: Task,
            h: usize,
            w: usize,
            start_date: Option<f64>,
            last_date: f64,
            prev_date: f64,
            step_count: u64,
            n_layers: usize,
            has_prev_y: bool,
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let need = |pos: usize, n: usize| -> Result<&[u8]> {
            bytes.get(pos..pos + n).ok_or(Error::Parse {
                offset: pos as u64,
                msg: "truncated session".into(),
            })
        };
        if need(0, 4)? != SESSION_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: "bad session magic".into(),
            });
        }
        let version = u16::from_le_bytes(need(4, 2)?.try_into().unwrap());
        if version != SESSION_VERSION {
            return Err(Error::Parse {
                offset: 4,
                msg: format!("unsupported session version {version}"),
            });
        }
        let hlen = u32::from_le_bytes(need(6, 4)?.try_into().unwrap()) as usize;
        let head: Head = serde_json::from_slice(need(10, hlen)?).map_err(|e| Error::Parse {
            offset: 10,
            msg: format!("session header: {e}"),
        })?;
        if head.task != model.cfg.task {
            return Err(Error::Checkpoint(
                "session task does not match the model".into(),
            ));
        }
        let mut pos = 10 + hlen;
        let pixels = (head.h / 2) * (head.w / 2);
        let mut states = Vec::with_capacity(head.n_layers);
        for _ in 0..head.n_layers {
            let mut layer = Vec::with_capacity(pixels);
            for _ in 0..pixels {
                let len = u32::from_le_bytes(need(pos, 4)?.try_into().unwrap()) as usize;
                pos += 4;
                layer.push(RecurrentState::from_bytes(need(pos, len)?)?);
                pos += len;
            }
            states.push(layer);
        }
        let prev_y_rows = if head.has_prev_y {
            let n = head.h * head.w * model.cfg.d_model;
            let raw = need(pos, 8 * n)?;
            pos += 8 * n;
            Some(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        } else {
            None
        };
        if pos != bytes.len() {
            return Err(Error::Parse {
                offset: pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - pos),
            });
        }
        Ok(StreamSession {
            task: model.cfg.task,
            model,
            h: head.h,
            w: head.w,
            states,
            start_date: head.start_date,
            last_date: head.last_date,
            step_count: head.step_count,
            prev_y_rows,
            prev_date: head.prev_date,
        })
    }
}

// ---------------------------------------------------------------------------
// Microbenchmarks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub kind: String,
    pub t: usize,
    /// "parallel" (full recompute) or "recurrent" (one step).
    pub mode: String,
    pub median_ns: u64,
    pub state_bytes: usize,
}

fn median_ns(mut samples: Vec<u64>) -> u64 {
    samples.sort_unstable();
    samples[samples.len() / 2]
}

/// Time one full parallel recompute and one recurrent step at each sequence
/// length. Raw per-repetition samples are returned alongside the medians so
/// slope statistics can bootstrap over them.
pub struct BenchOutput {
    pub rows: Vec<BenchRow>,
    /// (kind, t) -> raw recurrent-step nanosecond samples.
    pub recurrent_samples: Vec<(String, usize, Vec<u64>)>,
}

pub fn bench_mixers(kinds: &[crate::mixers::MixerKind], lengths: &[usize], reps: usize, seed: u64) -> Result<BenchOutput> {
    let d_model = 32;
    let n_heads = 4;
    let mut rows = Vec::new();
    let mut recurrent_samples = Vec::new();
    let mut rng = Rng::new(seed);
    for &t in lengths {
        // transformer parallel recompute cost at length t
        let cfg = MixerConfig::new(crate::mixers::MixerKind::TransformerCausal, d_model, d_model, d_model, n_heads)?;
        let mut store = ParamStore::new();
        let weights = MixerWeights::init(&cfg, &mut store, &mut rng, "bench");
        let seq = random_sequence(&mut rng, t, d_model);
        let mut samples = Vec::with_capacity(reps);
        let reps_parallel = reps.min(30).max(5);
        for _ in 0..reps_parallel {
            let start = Instant::now();
            let out = mix_parallel(&cfg, &weights, &store, &seq)?;
            samples.push(start.elapsed().as_nanos() as u64);
            std::hint::black_box(out);
        }
        rows.push(BenchRow {
            kind: cfg.kind.name().into(),
            t,
            mode: "parallel".into(),
            median_ns: median_ns(samples),
            state_bytes: 0,
        });

        for &kind in kinds {
            if !kind.has_recurrent_form() {
                continue;
            }
            let mut cfg = MixerConfig::new(kind, d_model, d_model, d_model, n_heads)?;
            cfg.reweight = crate::featmaps::ReweightParams::new((t as f64 * 8.0).max(700.0))?;
            let mut store = ParamStore::new();
            let weights = MixerWeights::init(&cfg, &mut store, &mut rng, "bench");
            // build a state holding t tokens
            let mut state = state_init(&cfg)?;
            let mut pos = 0.0;
            for _ in 0..t {
                let x: Vec<f64> = (0..d_model).map(|_| rng.uniform(1.0)).collect();
                crate::mixers::mix_step(&cfg, &weights, &store, &mut state, &x, pos)?;
                pos += 3.0;
            }
            let x: Vec<f64> = (0..d_model).map(|_| rng.uniform(1.0)).collect();
            let mut samples = Vec::with_capacity(reps);
            for _ in 0..reps {
                let mut s = state.clone();
                let start = Instant::now();
                let out = crate::mixers::mix_step(&cfg, &weights, &store, &mut s, &x, pos)?;
                samples.push(start.elapsed().as_nanos() as u64);
                std::hint::black_box(out);
            }
            rows.push(BenchRow {
                kind: kind.name().into(),
                t,
                mode: "recurrent".into(),
                median_ns: median_ns(samples.clone()),
                state_bytes: state.byte_len(),
            });
            recurrent_samples.push((kind.name().into(), t, samples));
        }
    }
    Ok(BenchOutput {
        rows,
        recurrent_samples,
    })
}

fn random_sequence(rng: &mut Rng, t: usize, d_model: usize) -> TokenSequence {
    let tokens: Vec<f64> = (0..t * d_model).map(|_| rng.uniform(1.0)).collect();
    let mut positions = Vec::with_capacity(t);
    let mut pos = 0.0;
    for _ in 0..t {
        positions.push(pos);
        pos += 1.0 + rng.below(10) as f64;
    }
    TokenSequence::new(tokens, positions, vec![0; t], d_model).unwrap()
}

/// Ordinary least squares slope of median cost vs t under bootstrap
/// resampling of the per-repetition samples; returns the (2.5%, 97.5%)
/// percentile interval of the slope.
pub fn bootstrap_slope_ci(
    samples_by_t: &[(usize, Vec<u64>)],
    n_boot: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = Rng::new(seed);
    let mut slopes = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let points: Vec<(f64, f64)> = samples_by_t
            .iter()
            .map(|(t, samples)| {
                let resampled: Vec<u64> = (0..samples.len())
                    .map(|_| samples[rng.below(samples.len() as u64) as usize])
                    .collect();
                (*t as f64, median_ns(resampled) as f64)
            })
            .collect();
        slopes.push(ols_slope(&points));
    }
    slopes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = slopes[(n_boot as f64 * 0.025) as usize];
    let hi = slopes[((n_boot as f64 * 0.975) as usize).min(n_boot - 1)];
    (lo, hi)
}

fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in points {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

pub fn bench_rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("kind,t,mode,median_ns,state_bytes\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.kind, row.t, row.mode, row.median_ns, row.state_bytes
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixers::MixerKind;
    use crate::model::ModelConfig;

    fn tiny_model(task: Task, kind: MixerKind) -> Model {
        Model::new(ModelConfig {
            task,
            kind,
            d_model: 8,
            d_k: 8,
            n_heads: 2,
            n_layers: 1,
            sse_base: 2,
            seed: 21,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn transformer_sessions_are_rejected() {
        let model = tiny_model(Task::Forecast, MixerKind::TransformerCausal);
        assert!(matches!(
            StreamSession::open(model, 16, 16),
            Err(Error::NoRecurrentForm(_))
        ));
    }

    #[test]
    fn session_shape_and_state_size() {
        let model = tiny_model(Task::Segmentation, MixerKind::Linear);
        let session = StreamSession::open(model, 16, 16).unwrap();
        // one layer, 8x8 half-res pixels
        assert_eq!(session.states.len(), 1);
        assert_eq!(session.states[0].len(), 64);
        assert!(session.state_bytes() > 0);
    }

    #[test]
    fn out_of_order_ingest_rejected() {
        let model = tiny_model(Task::Segmentation, MixerKind::Linear);
        let mut session = StreamSession::open(model, 16, 16).unwrap();
        let acq = |date: f64| StreamAcquisition {
            modality: 2,
            date,
            image: vec![0.1; 10 * 16 * 16],
            valid: vec![true; 256],
            cloud: Some(vec![false; 256]),
            weather: vec![0.0; 80],
            angles: None,
        };
        session.ingest(&acq(10.0)).unwrap();
        assert!(matches!(
            session.ingest(&acq(9.0)),
            Err(Error::OutOfOrder { .. })
        ));
    }

    #[test]
    fn ols_slope_on_line() {
        let points = [(1.0, 2.0), (2.0, 4.0), (3.0, 6.0)];
        assert!((ols_slope(&points) - 2.0).abs() < 1e-12);
    }
}
