use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fedcodec::capture::{self, SnapshotStore};
use fedcodec::codec::{Codec, CodecSpec, Family};
use fedcodec::config::ExperimentConfig;
use fedcodec::fedsim::{self, Setup};
use fedcodec::{metrics, privacy, report};

#[derive(Parser)]
#[command(name = "fedcodec", version, about = "Federated LoRA fine-tuning with a learned update codec")]
struct Cli {
    /// Worker threads for client-side computation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        Ok(match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        })
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Record client update canvases from a plain run on the capture split.
    Capture {
        #[command(flatten)]
        config: ConfigArg,
        /// Snapshot file to write; overrides paths.snapshots.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Also write per-round value statistics as CSV.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Fit the codec on recorded snapshots.
    TrainCodec {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        snapshots: Option<PathBuf>,
        /// Checkpoint to write; overrides paths.codec.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Loss-curve CSV; defaults to the checkpoint path with a
        /// `.loss.csv` suffix.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Run federated fine-tuning and write transcript, model and manifest.
    Fedrun {
        #[command(flatten)]
        config: ConfigArg,
        /// `identity` or a codec checkpoint path; overrides paths.codec.
        #[arg(long)]
        codec: Option<String>,
        /// Output directory; overrides paths.out_dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate the codec against the identity channel under added noise.
    Channel {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        snapshots: Option<PathBuf>,
        /// Noise standard deviations; defaults to 5e-7..5e-1 rescaled so
        /// that each level keeps its power-to-noise ratio at a per-canvas
        /// power of 14.29.
        #[arg(long, value_delimiter = ',')]
        sigmas: Vec<f64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Privacy accountant: spend for a given sigma, or sigma for a target.
    Dp {
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
        /// Client sampling probability.
        #[arg(long, short = 'p', default_value_t = 1.0)]
        sampling: f64,
        #[arg(long, default_value_t = 20)]
        rounds: u64,
        #[arg(long)]
        sigma: Option<f64>,
        /// Report every preset budget instead of a single epsilon.
        #[arg(long)]
        presets: bool,
    },
    /// Merge transcripts into one comparison table keyed by round.
    Report {
        transcripts: Vec<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for problems with the caller's input, 2 for failures inside a
/// computation.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(fe) = cause.downcast_ref::<fedcodec::Error>() {
            return if fe.is_user_error() { 1 } else { 2 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 1;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = cli.threads.max(1);
    match cli.cmd {
        Cmd::Capture { config, out, stats } => {
            let cfg = config.load()?;
            let out = out.unwrap_or_else(|| cfg.paths.snapshots.clone());
            let setup = Setup::new(&cfg.model, &cfg.task, cfg.fed.clients, cfg.seed)?;
            let store = fedsim::capture_run(&setup, &cfg.fed, threads)?;
            capture::write_store(&store, &out).with_context(|| format!("writing {}", out.display()))?;
            if let Some(p) = stats {
                report::write_csv(&p, &capture::snapshot_stats(&store))?;
            }
            println!("{} snapshots ({}x{}) -> {}", store.len(), store.rows(), store.cols(), out.display());
        }
        Cmd::TrainCodec { config, snapshots, out, curve } => {
            let cfg = config.load()?;
            let snaps = snapshots.unwrap_or_else(|| cfg.paths.snapshots.clone());
            let out = out.unwrap_or_else(|| cfg.paths.codec.clone());
            let store = capture::read_store(&snaps).with_context(|| format!("reading {}", snaps.display()))?;
            let (train, test) = capture::split(&store, &cfg.split)?;
            let spec = cfg.codec_spec();
            let mut codec = Codec::build(&spec, cfg.seed)?;
            let losses = codec.train(&train.canvases(), &test.canvases(), &cfg.train)?;
            codec.save(&out)?;
            let curve = curve.unwrap_or_else(|| suffixed(&out, "loss.csv"));
            report::write_csv(&curve, &losses)?;
            write_manifest(
                &suffixed(&out, "manifest.json"),
                json!({
                    "command": "train-codec",
                    "config": cfg,
                    "snapshots": snaps,
                    "train_snapshots": train.len(),
                    "test_snapshots": test.len(),
                    "codec_hash": codec.hash()?,
                    "compression_ratio": codec.compression_ratio(),
                }),
            )?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                println!(
                    "epochs {}: train {:.4e} -> {:.4e}, test {:.4e} -> {:.4e}; CR {}",
                    losses.len(),
                    first.train,
                    last.train,
                    first.test,
                    last.test,
                    codec.compression_ratio()
                );
            }
        }
        Cmd::Fedrun { config, codec, out_dir } => {
            let cfg = config.load()?;
            let out_dir = out_dir.unwrap_or_else(|| cfg.paths.out_dir.clone());
            let codec_arg = codec.unwrap_or_else(|| cfg.paths.codec.display().to_string());
            let shape = cfg.model.canvas_shape();
            let codec = if codec_arg == "identity" {
                Codec::build(&CodecSpec::identity(shape[0], shape[1]), 0)?
            } else {
                Codec::load(Path::new(&codec_arg)).with_context(|| format!("loading codec {codec_arg}"))?
            };
            let setup = Setup::new(&cfg.model, &cfg.task, cfg.fed.clients, cfg.seed)?;
            let out = fedsim::run_experiment(&setup, &cfg.fed, &codec, threads)?;
            fs::create_dir_all(&out_dir)?;
            fedsim::write_transcript(&out_dir.join("transcript.csv"), &out.reports)?;
            fedsim::model_bundle(&setup, &out.state).write(&out_dir.join("model.cgfg"))?;
            write_manifest(
                &out_dir.join("manifest.json"),
                json!({
                    "command": "fedrun",
                    "config": cfg,
                    "codec": codec_arg,
                    "codec_spec": codec.spec(),
                    "codec_hash": codec.hash()?,
                    "seed": cfg.seed,
                    "threads": threads,
                }),
            )?;
            if let Some(last) = out.reports.last() {
                println!(
                    "{} rounds, final test accuracy {:.4}, uplink {} B (uncompressed {} B) -> {}",
                    out.reports.len(),
                    last.test_acc,
                    out.reports.iter().map(|r| r.uplink_bytes).sum::<u64>(),
                    out.reports.iter().map(|r| r.uplink_bytes_uncompressed).sum::<u64>(),
                    out_dir.display()
                );
            }
        }
        Cmd::Channel { config, codec, snapshots, sigmas, out } => {
            let cfg = config.load()?;
            let codec = Codec::load(&codec.unwrap_or_else(|| cfg.paths.codec.clone()))?;
            if codec.spec().family == Family::Identity {
                bail!("channel evaluation needs a trained codec checkpoint");
            }
            let store: SnapshotStore = capture::read_store(&snapshots.unwrap_or_else(|| cfg.paths.snapshots.clone()))?;
            let (_, test) = capture::split(&store, &cfg.split)?;
            let canvases = test.canvases();
            let sigmas = if sigmas.is_empty() {
                let power = canvases.iter().map(|c| c.sum_sq()).sum::<f64>() / canvases.len() as f64;
                metrics::matched_sigmas(power)
            } else {
                sigmas
            };
            let rows = metrics::noisy_channel_eval(&codec, &canvases, &sigmas, cfg.seed)?;
            report::write_csv(&out, &rows)?;
            for r in &rows {
                println!("sigma {:.3e}: identity mse {:.3e}, codec mse {:.3e}", r.sigma, r.identity_mse, r.codec_mse);
            }
        }
        Cmd::Dp { epsilon, delta, sampling, rounds, sigma, presets } => {
            let budgets: Vec<f64> = match (presets, epsilon) {
                (true, _) => privacy::EPSILON_PRESETS.to_vec(),
                (false, Some(e)) => vec![e],
                (false, None) => bail!("give --epsilon or --presets"),
            };
            if !(delta > 0.0 && delta < 1.0) {
                return Err(fedcodec::Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")).into());
            }
            println!("epsilon,delta_target,p,rounds,sigma,mu,delta");
            for eps in budgets {
                let s = match sigma {
                    Some(s) => s,
                    None => privacy::calibrate_sigma(eps, delta, sampling, rounds)?,
                };
                let spend = privacy::spend(eps, sampling, rounds, s)?;
                println!("{eps},{delta},{sampling},{rounds},{s:.10e},{:.10e},{:.10e}", spend.mu, spend.delta);
            }
        }
        Cmd::Report { transcripts, out } => {
            if transcripts.is_empty() {
                bail!("report needs at least one transcript");
            }
            let mut runs = Vec::new();
            for p in &transcripts {
                let name = p
                    .parent()
                    .and_then(|d| d.file_name())
                    .map(|n| n.to_string_lossy().into_owned())
                    .filter(|n| !n.is_empty())
                    .unwrap_or_else(|| p.display().to_string());
                runs.push((name, fedsim::read_transcript(p).with_context(|| format!("reading {}", p.display()))?));
            }
            let rows = report::compare(&runs)?;
            match out {
                Some(p) => report::write_csv(&p, &rows)?,
                None => print!("{}", report::to_csv_string(&rows)?),
            }
        }
    }
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn write_manifest(path: &Path, value: serde_json::Value) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
