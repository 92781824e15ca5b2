//! Single-binary CLI: dataset generation, training, evaluation, streaming
//! inference over a watched directory, dual-form equivalence checks, and
//! sequence-length microbenchmarks.
//!
//! Exit codes: 0 on success, 2 on any assertion or equivalence failure.

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use dualform_core::checkpoint::{load_checkpoint, save_checkpoint};
use dualform_core::mixers::{
    mix_parallel, mix_step, state_init, MixerConfig, MixerKind, MixerWeights, TokenSequence,
};
use dualform_core::model::build_input;
use dualform_core::params::ParamStore;
use dualform_core::rng::Rng;
use dualform_core::stream::{bench_mixers, bench_rows_to_csv, StreamAcquisition, StreamOutput, StreamSession};
use dualform_core::synthdata::{generate_dataset, read_sample, Manifest, Split, SyntheticSpec};
use dualform_core::training::{evaluate_samples, load_split, train, TrainConfig};
use dualform_core::featmaps::ReweightParams;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dualform", version, about = "Dual-form sequence mixers for multi-modal image time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and a split manifest.
    GenData {
        /// Generator spec JSON (defaults apply when omitted).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of sites.
        #[arg(long, default_value_t = 12)]
        n: usize,
    },
    /// Train a model from a config and a dataset manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset manifest JSON.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint and metrics stream.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Acquisitions kept per modality.
        #[arg(long, default_value_t = 16)]
        max_seq_len: usize,
    },
    /// Stream acquisitions from sample files appearing in a directory.
    Stream {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of MMTS sample files; each file is one site's stream.
        #[arg(long)]
        watch: PathBuf,
        /// JSON-lines output path.
        #[arg(long)]
        emit: PathBuf,
        /// Keep polling for new files instead of exiting when done.
        #[arg(long, default_value_t = false)]
        follow: bool,
        /// Poll interval in milliseconds (with --follow).
        #[arg(long, default_value_t = 500)]
        poll_ms: u64,
    },
    /// Verify parallel/recurrent equivalence for the dual-form kinds.
    EquivCheck {
        /// A mixer kind name, or "all".
        #[arg(long, default_value = "all")]
        kind: String,
        #[arg(long, default_value_t = 100)]
        trials: u64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Measure parallel-recompute vs recurrent-step cost over sequence
    /// lengths and write a CSV report.
    Bench {
        /// Comma-separated mixer kinds.
        #[arg(long, default_value = "linear,retention")]
        kinds: String,
        /// Comma-separated sequence lengths.
        #[arg(long, default_value = "16,64,256")]
        lengths: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        reps: usize,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::GenData { spec, out, n } => {
            let spec: SyntheticSpec = match spec {
                Some(path) => serde_json::from_slice(
                    &std::fs::read(&path).with_context(|| format!("reading {path:?}"))?,
                )?,
                None => SyntheticSpec::default(),
            };
            let manifest = generate_dataset(&spec, &out, n)?;
            println!(
                "{}",
                serde_json::json!({
                    "samples": manifest.samples.len(),
                    "manifest": out.join("manifest.json"),
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { config, data, out } => {
            let cfg: TrainConfig = serde_json::from_slice(
                &std::fs::read(&config).with_context(|| format!("reading {config:?}"))?,
            )?;
            let manifest = Manifest::read(&data)?;
            let result = train(&cfg, &manifest)?;
            std::fs::create_dir_all(&out)?;
            let ckpt_path = out.join("model.ckpt");
            save_checkpoint(&ckpt_path, &result.model, result.steps)?;
            let mut lines = String::new();
            for record in &result.metrics {
                lines.push_str(&serde_json::to_string(record)?);
                lines.push('\n');
            }
            std::fs::write(out.join("metrics.jsonl"), lines)?;
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": ckpt_path,
                    "steps": result.steps,
                    "final_train_loss": result.metrics.last().map(|r| r.train_loss),
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            ckpt,
            data,
            split,
            max_seq_len,
        } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let manifest = Manifest::read(&data)?;
            let split = match split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                other => bail!("unknown split `{other}`"),
            };
            let samples = load_split(&manifest, &split)?;
            if samples.is_empty() {
                bail!("split has no samples");
            }
            let params = dualform_core::model::LossParams::default();
            let report = evaluate_samples(&model, &samples, &params, max_seq_len)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Stream {
            ckpt,
            watch,
            emit,
            follow,
            poll_ms,
        } => stream_dir(&ckpt, &watch, &emit, follow, poll_ms),
        Command::EquivCheck { kind, trials, tol } => equiv_check(&kind, trials, tol),
        Command::Bench {
            kinds,
            lengths,
            out,
            reps,
        } => {
            let kinds: Vec<MixerKind> = kinds
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<_, _>>()?;
            let lengths: Vec<usize> = lengths
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .context("parsing --lengths")?;
            let bench = bench_mixers(&kinds, &lengths, reps, 7)?;
            std::fs::write(&out, bench_rows_to_csv(&bench.rows))?;
            println!(
                "{}",
                serde_json::json!({ "rows": bench.rows.len(), "csv": out })
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Stream every MMTS file in `watch` (one session per file, acquisitions in
/// merged date order), appending one JSON line per ingest to `emit`.
fn stream_dir(
    ckpt: &Path,
    watch: &Path,
    emit: &Path,
    follow: bool,
    poll_ms: u64,
) -> anyhow::Result<ExitCode> {
    use std::io::Write;
    let mut emit_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(emit)?;
    let mut seen: BTreeSet<PathBuf> = BTreeSet::new();
    loop {
        let mut files: Vec<PathBuf> = std::fs::read_dir(watch)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map_or(false, |x| x == "mmts"))
            .filter(|p| !seen.contains(p))
            .collect();
        files.sort();
        for path in files {
            seen.insert(path.clone());
            let sample = read_sample(&path)?;
            let (model, _) = load_checkpoint(ckpt)?;
            let input = build_input(&sample, model.cfg.mono_s2, usize::MAX, None)?;
            let mut session = StreamSession::open(model, sample.h, sample.w)?;
            for step in &input.merged {
                let acq = input.acq(step);
                let out = session.ingest(&StreamAcquisition {
                    modality: step.modality,
                    date: step.date,
                    image: acq.image.clone(),
                    valid: acq.valid.clone(),
                    cloud: acq.cloud.clone(),
                    weather: acq.weather.clone(),
                    angles: acq.angles,
                })?;
                let line = match out {
                    StreamOutput::Forecast { mse_vs_actual, prediction } => serde_json::json!({
                        "file": path,
                        "site": sample.site_id,
                        "date": step.date,
                        "modality": step.modality,
                        "predicted": prediction.is_some(),
                        "mse_vs_actual": mse_vs_actual,
                    }),
                    StreamOutput::Segmentation { classes, .. } => {
                        let solar = classes.iter().filter(|&&c| c == 1).count();
                        serde_json::json!({
                            "file": path,
                            "site": sample.site_id,
                            "date": step.date,
                            "modality": step.modality,
                            "solar_pixels": solar,
                        })
                    }
                };
                writeln!(emit_file, "{line}")?;
            }
        }
        if !follow {
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(poll_ms));
    }
    Ok(ExitCode::SUCCESS)
}

fn equiv_check(kind_arg: &str, trials: u64, tol: f64) -> anyhow::Result<ExitCode> {
    let kinds: Vec<MixerKind> = if kind_arg == "all" {
        MixerKind::RECURRENT.to_vec()
    } else {
        vec![kind_arg.parse()?]
    };
    let mut failed = false;
    let mut report = Vec::new();
    for kind in kinds {
        if !kind.has_recurrent_form() {
            bail!("kind `{kind}` has no recurrent form to check");
        }
        let mut worst: f64 = 0.0;
        for trial in 0..trials {
            let mut rng = Rng::new(0x6475616c666f726du64.wrapping_add(trial));
            let t = 1 + rng.below(32) as usize;
            let d_model = [8usize, 16, 32][rng.below(3) as usize];
            let heads = if d_model == 8 { 2 } else { 4 };
            let mut cfg = MixerConfig::new(kind, d_model, d_model, d_model, heads)?;
            cfg.reweight = ReweightParams::new(2200.0)?;
            let mut store = ParamStore::new();
            let weights = MixerWeights::init(&cfg, &mut store, &mut rng, "m");
            let tokens: Vec<f64> = (0..t * d_model).map(|_| rng.uniform(1.2)).collect();
            let mut positions = Vec::with_capacity(t);
            let mut pos = 0.0;
            for _ in 0..t {
                positions.push(pos);
                pos += 1.0 + rng.below(60) as f64;
            }
            let seq = TokenSequence::new(tokens, positions, vec![0; t], d_model)?;
            let parallel = mix_parallel(&cfg, &weights, &store, &seq)?;
            let mut state = state_init(&cfg)?;
            for i in 0..t {
                let x = &seq.tokens[i * d_model..(i + 1) * d_model];
                let rel = seq.positions[i] - seq.positions[0];
                let o = mix_step(&cfg, &weights, &store, &mut state, x, rel)?;
                for c in 0..d_model {
                    worst = worst.max((o[c] - parallel[i * d_model + c]).abs());
                }
            }
        }
        let pass = worst <= tol;
        failed |= !pass;
        report.push(serde_json::json!({
            "kind": kind.name(),
            "trials": trials,
            "max_abs_diff": worst,
            "tolerance": tol,
            "pass": pass,
        }));
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if failed {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}
