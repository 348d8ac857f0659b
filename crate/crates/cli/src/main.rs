//! `endodepth` command-line driver.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or usage error,
//! 3 I/O or file-format error, 4 train/test leakage, 5 training divergence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use endodepth::config::RunConfig;
use endodepth::dataset::{self, load_dataset, write_dataset, ManifestHeader, Split};
use endodepth::evaluation::{evaluate_dataset, table_header, table_row};
use endodepth::frame::Frame;
use endodepth::generate::{generate_cinematic, generate_synthetic};
use endodepth::training::{finetune, predict_depth, train_joint, CrfModel, EpochRecord};
use endodepth::Error;

#[derive(Parser)]
#[command(name = "endodepth", version, about = "Rendered endoscopy data and CNN-CRF depth estimation")]
struct Cli {
    /// Worker threads for rendering, training and evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render grayscale frames with exact depth from seeded colon scenes.
    GenSynthetic {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Path-trace scenes in several styles that share one depth map each.
    GenCinematic {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 4)]
        styles: usize,
        #[arg(long)]
        spp: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the network and CRF jointly on a synthetic dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; its train and val splits are used.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Training log (JSON lines); defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fine-tune the fully connected layers on a cinematic dataset.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Predict a depth raster for one image.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Depth raster to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model on one split of a dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Print a results-table row instead of the JSON report.
        #[arg(long)]
        table: bool,
        #[arg(long, default_value = "CNN-CRF")]
        method: String,
        #[arg(long, default_value = "synthetic")]
        training: String,
        #[arg(long, default_value = "none")]
        fine_tuning: String,
        /// Also write the full JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Parameter(_)) => 2,
        Some(Error::Io(_) | Error::Format(_)) => 3,
        Some(Error::Leakage(_)) => 4,
        Some(Error::Divergence(_)) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read {}: {io}", path.display())),
        e => e,
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    cfg.finetune.seed = cfg.seed;
    Ok(cfg)
}

fn write_dataset_dir(out: &Path, cfg: &RunConfig, frames: &[(Frame, Split)]) -> Result<()> {
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let sentinel = frames.first().map(|f| f.0.depth.sentinel).unwrap_or(0.0);
    let m = write_dataset(out, ManifestHeader::new(&name, sentinel, &cfg.hash()), frames)?;
    let depths: std::collections::BTreeSet<&str> = m.records.iter().map(|r| r.depth.as_str()).collect();
    log::info!("wrote {} frames and {} depth rasters to {}", m.records.len(), depths.len(), out.display());
    Ok(())
}

fn split_frames(dir: &Path) -> Result<(Vec<Frame>, Vec<Frame>)> {
    let (manifest, frames) = load_dataset(dir, &[Split::Train, Split::Val])?;
    let splits: Vec<Split> =
        manifest.records.iter().filter(|r| r.split != Split::Test).map(|r| r.split).collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (f, s) in frames.into_iter().zip(splits) {
        if s == Split::Train { train.push(f) } else { val.push(f) }
    }
    Ok((train, val))
}

fn write_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in log {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    fs::write(path, out).map_err(Error::Io)?;
    Ok(())
}

fn default_log(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynthetic { config, out, count, seed } => {
            let cfg = load_config(&config, seed)?;
            let frames = generate_synthetic(&cfg, count, cfg.seed)?;
            write_dataset_dir(&out, &cfg, &frames)
        }
        Command::GenCinematic { config, out, scenes, styles, spp, seed } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(spp) = spp {
                cfg.path_tracer.spp = spp;
            }
            let frames = generate_cinematic(&cfg, scenes, styles, cfg.path_tracer.spp, cfg.seed)?;
            write_dataset_dir(&out, &cfg, &frames)
        }
        Command::Train { config, data, out, seed, epochs, log } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let (train, val) = split_frames(&data)?;
            log::info!("training on {} frames, validating on {}", train.len(), val.len());
            let outcome = train_joint(&train, &val, &cfg.train_settings())?;
            outcome.model.save(&out)?;
            write_log(&log.unwrap_or_else(|| default_log(&out)), &outcome.log)?;
            log::info!("wrote {}", out.display());
            Ok(())
        }
        Command::Finetune { config, base, data, out, seed, epochs, log } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(e) = epochs {
                cfg.finetune.epochs = e;
            }
            let base = base.ok_or_else(|| Error::Config("finetune needs --base <checkpoint>".into()))?;
            if !base.is_file() {
                return Err(Error::Config(format!("base checkpoint {} does not exist", base.display())).into());
            }
            let base_model = CrfModel::load(&base)?;
            let (train, val) = split_frames(&data)?;
            log::info!("fine-tuning on {} frames, validating on {}", train.len(), val.len());
            let mut outcome = finetune(&base_model, &train, &val, &cfg.finetune)?;
            outcome.model.config_hash = cfg.hash_u64();
            outcome.model.save(&out)?;
            write_log(&log.unwrap_or_else(|| default_log(&out)), &outcome.log)?;
            log::info!("wrote {}", out.display());
            Ok(())
        }
        Command::Predict { model, image, out } => {
            let model = CrfModel::load(&model)?;
            let img = dataset::load_image(&image)?;
            let depth = predict_depth(&model, &img)?;
            dataset::write_depth(&out, &depth)?;
            Ok(())
        }
        Command::Evaluate { model, data, split, table, method, training, fine_tuning, out } => {
            let model_path = model;
            let model = CrfModel::load(&model_path)?;
            let (manifest, frames) = load_dataset(&data, &[split.into()])?;
            let model_id = format!("{:016x}", model.config_hash);
            let report = evaluate_dataset(&model, &frames, &manifest.header.name, &model_id)
                .with_context(|| format!("evaluating {}", model_path.display()))?;
            if let Some(path) = out {
                fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(Error::Io)?;
            }
            if table {
                println!("{}", table_header());
                println!("{}", table_row(&method, &training, &fine_tuning, &report.pooled));
            } else {
                println!("{}", serde_json::to_string(&report.pooled)?);
            }
            Ok(())
        }
    }
}
