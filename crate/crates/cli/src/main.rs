//! `fmformer` command-line tool: synthetic data, training, evaluation,
//! mask export and annotation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fmformer::model::{parse_on_off, HeadsMode, MhcaMode, Modality, Preset};

use crate::config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "fmformer", version, about = "Cross-modal furnace anomaly detection")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

fn switch(s: &str) -> std::result::Result<bool, String> {
    parse_on_off("switch", s).map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; flags take precedence over it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    modality: Option<Modality>,
    /// Dilated tokenization: on or off.
    #[arg(long, global = true, value_parser = switch, value_name = "on|off")]
    dilated: Option<bool>,
    #[arg(long, global = true)]
    mhca: Option<MhcaMode>,
    /// Late fusion of the current class head: on or off.
    #[arg(long, global = true, value_parser = switch, value_name = "on|off")]
    lf: Option<bool>,
    #[arg(long, global = true)]
    heads: Option<HeadsMode>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[arg(long, global = true)]
    clip_norm: Option<f64>,
    /// Probability that a generated clip is hazed.
    #[arg(long, global = true)]
    occlusion: Option<f64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Video frames per clip.
    #[arg(long, global = true)]
    frames: Option<usize>,
    #[arg(long, global = true)]
    height: Option<usize>,
    #[arg(long, global = true)]
    width: Option<usize>,
    /// Current samples per window.
    #[arg(long, global = true)]
    current_len: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic train and test containers.
    Generate {
        /// Training samples.
        #[arg(long)]
        n: Option<usize>,
        /// Test samples.
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Train a model, writing a resumable checkpoint and a CSV log.
    Train {
        /// Training container; defaults to `<out>/train.fmfb`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Container to evaluate once training ends.
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sweep input lengths and write `sweep.csv`.
        #[arg(long)]
        sweep_length: bool,
        /// Frame counts for the sweep, comma-separated.
        #[arg(long, value_delimiter = ',')]
        sweep_frames: Vec<usize>,
        /// Current lengths for the sweep, comma-separated.
        #[arg(long, value_delimiter = ',')]
        sweep_current: Vec<usize>,
    },
    /// Write predicted masks as PGM files plus an overlay mosaic.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Only the first N samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Propagate keyframe boxes and refine them into masks.
    Annotate {
        /// Lines of `frame_idx role x0 y0 x1 y1`.
        #[arg(long)]
        keyframes: PathBuf,
        /// Directory of P5/P6 frames, read in file-name order.
        #[arg(long, conflicts_with = "data")]
        frames_dir: Option<PathBuf>,
        /// Container whose sample video supplies the frames.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value_t = 7)]
        radius: usize,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
    },
    /// Cut a raw recording into a container.
    Ingest {
        /// 8-bit RGB frames, `[frames, height, width, 3]`.
        #[arg(long)]
        video: PathBuf,
        /// Little-endian f32 current, `[samples, 3]`.
        #[arg(long)]
        current: PathBuf,
        #[arg(long)]
        raw_frames: usize,
        #[arg(long)]
        raw_height: usize,
        #[arg(long)]
        raw_width: usize,
        #[arg(long)]
        raw_current_len: usize,
        /// Crop `x0,y0,x1,y1` (exclusive end); defaults to the whole frame.
        #[arg(long, value_delimiter = ',', num_args = 4)]
        crop: Option<Vec<usize>>,
        /// Frames between clip starts; defaults to the clip length.
        #[arg(long)]
        stride: Option<usize>,
        /// Directory of per-frame P5 masks, in file-name order.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Predict { .. } => "predict",
            Command::Annotate { .. } => "annotate",
            Command::Ingest { .. } => "ingest",
        }
    }
}

fn overrides(g: &Global, cmd: &Command) -> Overrides {
    let (n_train, n_test) = match cmd {
        Command::Generate { n, n_test } => (*n, *n_test),
        _ => (None, None),
    };
    Overrides {
        seed: g.seed,
        out: g.out.clone(),
        preset: g.preset,
        modality: g.modality,
        dilated: g.dilated,
        mhca: g.mhca,
        lf: g.lf,
        heads: g.heads,
        epochs: g.epochs,
        batch: g.batch,
        lr: g.lr,
        alpha: g.alpha,
        clip_norm: g.clip_norm,
        occlusion: g.occlusion,
        frames: g.frames,
        height: g.height,
        width: g.width,
        current_len: g.current_len,
        n_train,
        n_test,
    }
}

fn init_threads() -> Result<()> {
    let threads = match std::env::var("FMF_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Some(n),
            _ => bail!("FMF_THREADS must be a positive integer, got {v:?}"),
        },
        Err(_) => None,
    };
    fmformer::parallel::init_threads(threads);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let cfg = RunConfig::resolve(cli.command.name(), cli.global.config.as_deref(), &overrides(&cli.global, &cli.command))?;
    let resolved = cfg.persist()?;
    log::info!("resolved configuration written to {}", resolved.display());
    match cli.command {
        Command::Generate { .. } => commands::generate(&cfg),
        Command::Train { data, resume, test } => {
            let data = data.unwrap_or_else(|| cfg.out.join("train.fmfb"));
            commands::train(&cfg, &data, resume.as_deref(), test.as_deref())
        }
        Command::Eval { model, data, sweep_length, sweep_frames, sweep_current } => {
            let sweep = sweep_length.then_some((sweep_frames, sweep_current));
            commands::eval(&cfg, &model, &data, sweep)
        }
        Command::Predict { model, data, limit } => commands::predict(&cfg, &model, &data, limit),
        Command::Annotate { keyframes, frames_dir, data, sample, radius, sigma } => {
            let source = match (frames_dir, data) {
                (Some(dir), None) => commands::FrameSource::Dir(dir),
                (None, Some(path)) => commands::FrameSource::Dataset(path, sample),
                _ => bail!("annotate needs exactly one of --frames-dir or --data"),
            };
            let refine = fmformer::annotate::RefineConfig { radius, sigma };
            commands::annotate(&cfg, &keyframes, &source, refine)
        }
        Command::Ingest { video, current, raw_frames, raw_height, raw_width, raw_current_len, crop, stride, masks } => {
            let raw = commands::RawInput {
                video,
                current,
                frames: raw_frames,
                height: raw_height,
                width: raw_width,
                current_len: raw_current_len,
                crop: crop.map(|c| [c[0], c[1], c[2], c[3]]),
                stride,
                masks,
            };
            commands::ingest(&cfg, &raw)
        }
    }
    .with_context(|| format!("{} failed", cfg.command))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
