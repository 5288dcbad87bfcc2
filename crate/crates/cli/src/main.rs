use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use igc_core::data::{self, load_checkpoint, synthetic, DatasetManifest};
use igc_core::eval;
use igc_core::train::{fit, FitOptions};
use igc_core::{Config, Error, Result};

#[derive(Parser)]
#[command(name = "igc", version, about = "Inverse graphics capsule network: train, evaluate, visualize")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a directory of images.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Image directory, or a manifest written by an earlier run.
        #[arg(long)]
        data: PathBuf,
        /// Landmark CSV; defaults to `landmarks.csv` inside the data directory.
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume from a checkpoint written under a different config.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Stop after this many total steps.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Score discovered parts as landmark detectors.
    EvalSeg {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-capsule and object figures for one image.
    ExportHierarchy {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the procedural face set with landmarks.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Load a saved manifest, or ingest an image directory and save the manifest
/// and the reject list next to `out`.
fn manifest_for(data: &Path, landmarks: Option<&Path>, cfg: &Config, out: Option<&Path>) -> Result<DatasetManifest> {
    if data.is_file() {
        return DatasetManifest::load(data);
    }
    let default_marks = data.join("landmarks.csv");
    let marks = landmarks.or_else(|| default_marks.is_file().then_some(default_marks.as_path()));
    let (manifest, rejects) = data::ingest(data, marks, cfg)?;
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
        manifest.save(&out.join("manifest.jsonl"))?;
        data::write_rejects(&rejects, &out.join("rejects.jsonl"))?;
    }
    Ok(manifest)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Train {
            config,
            data,
            landmarks,
            resume,
            force,
            out,
            max_steps,
        } => {
            let cfg = Config::load(&config)?;
            let manifest = manifest_for(&data, landmarks.as_deref(), &cfg, Some(&out))?;
            let opts = FitOptions {
                out_dir: out,
                resume,
                force,
                max_steps,
            };
            let ckpt = fit(&manifest, &cfg, &opts)?;
            Ok(serde_json::json!({ "checkpoint": ckpt }))
        }
        Command::EvalSeg {
            ckpt,
            data,
            landmarks,
            out,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let manifest = manifest_for(&data, Some(&landmarks), &ck.config, None)?;
            let report = eval::evaluate_segmentation(&ck.state.params, &ck.config, &manifest)?;
            report.save(&out)?;
            Ok(serde_json::to_value(&report)?)
        }
        Command::ExportHierarchy { ckpt, image, out } => {
            let files = eval::export_hierarchy(&ckpt, &image, &out)?;
            Ok(serde_json::json!({ "files": files }))
        }
        Command::Synth {
            out,
            count,
            size,
            seed,
        } => {
            let marks = synthetic::write_dataset(&out, count, size, seed)?;
            Ok(serde_json::json!({ "images": count, "landmarks": marks }))
        }
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string()),
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
