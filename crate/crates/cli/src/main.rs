use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use va_fusion::commands::{
    cmd_eval, cmd_filter, cmd_predict, cmd_synth, cmd_train, exit_code,
};
use va_fusion::config::{load_file_config, resolve_train_config, FileConfig};
use va_fusion_core::dataio::{load_manifest, Manifest, Split};
use va_fusion_core::trainer::ModelKind;
use va_fusion_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "va-fusion",
    version,
    about = "Multimodal valence/arousal regression pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (manifest + CSVs) under --out.
    Synth(CommonArgs),
    /// Train a model; writes checkpoint.json and metrics.jsonl under --out.
    Train(CommonArgs),
    /// Evaluate a checkpoint; writes report.json, per_video.csv and plots/.
    Eval(CommonArgs),
    /// Export per-frame prediction CSVs for a split under --out.
    Predict(CommonArgs),
    /// Judge audio segments by mouth-open evidence; writes filter_report.csv.
    Filter(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration; the flags below override it.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Corpus manifest (synth writes one under --out).
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// RNG seed override.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Model kind: face, behavior, audio, dcmmoe, raav.
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelKind>,
    /// Data split: train, devel, test (default devel).
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    /// Trained checkpoint to evaluate or predict with.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    ModelKind::from_str(s).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::from_str(s).map_err(|e| e.to_string())
}

impl CommonArgs {
    fn out(&self) -> Result<&PathBuf> {
        self.out
            .as_ref()
            .ok_or_else(|| Error::config("--out DIR is required for this command"))
    }

    fn manifest_path(&self) -> Result<&PathBuf> {
        self.manifest
            .as_ref()
            .ok_or_else(|| Error::config("--manifest PATH is required for this command"))
    }

    fn checkpoint_path(&self) -> Result<&PathBuf> {
        self.checkpoint
            .as_ref()
            .ok_or_else(|| Error::config("--checkpoint PATH is required for this command"))
    }

    fn file_config(&self) -> Result<FileConfig> {
        load_file_config(self.config.as_deref())
    }

    fn load_manifest(&self) -> Result<Manifest> {
        load_manifest(self.manifest_path()?)
    }

    fn split(&self) -> Split {
        self.split.unwrap_or(Split::Devel)
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("VA_FUSION_LOG")).init();
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => {
            let file = args.file_config()?;
            let mut spec = file.synth.clone().unwrap_or_default();
            if let Some(seed) = args.seed.or(file.seed) {
                spec.seed = seed;
            }
            let artifacts = cmd_synth(&spec, args.out()?)?;
            println!(
                "wrote {} ({} train / {} devel videos)",
                artifacts.manifest.display(),
                artifacts.n_train,
                artifacts.n_devel
            );
        }
        Command::Train(args) => {
            let file = args.file_config()?;
            let manifest = args.load_manifest()?;
            let cfg = resolve_train_config(&file, &manifest, args.model, args.seed)?;
            let out = args.out()?;
            let artifacts = cmd_train(&manifest, &cfg, out)?;
            println!(
                "trained {} ({} epochs, best dev mean CCC {}); checkpoint {}",
                cfg.model.kind(),
                artifacts.epochs_run,
                artifacts
                    .best_dev_mean_ccc
                    .map_or_else(|| "n/a".to_string(), |c| format!("{c:.4}")),
                artifacts.checkpoint.display()
            );
        }
        Command::Eval(args) => {
            let manifest = args.load_manifest()?;
            let artifacts = cmd_eval(
                &manifest,
                args.checkpoint_path()?,
                args.split(),
                args.out()?,
            )?;
            println!(
                "CCC valence {:.4} arousal {:.4} mean {:.4}; report {}",
                artifacts.overall.ccc_valence,
                artifacts.overall.ccc_arousal,
                artifacts.overall.ccc_mean,
                artifacts.report.display()
            );
        }
        Command::Predict(args) => {
            let manifest = args.load_manifest()?;
            let artifacts = cmd_predict(
                &manifest,
                args.checkpoint_path()?,
                args.split(),
                args.out()?,
            )?;
            println!(
                "wrote {} prediction files under {}",
                artifacts.files.len(),
                artifacts.dir.display()
            );
        }
        Command::Filter(args) => {
            let file = args.file_config()?;
            let section = file.filter.clone().unwrap_or_default();
            let manifest_path = args.manifest_path()?;
            let manifest = load_manifest(manifest_path)?;
            let manifest_dir = manifest_path
                .parent()
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("."));
            let artifacts = cmd_filter(&manifest, &manifest_dir, &section, args.out()?)?;
            println!(
                "kept {}/{} segments; report {}",
                artifacts.kept,
                artifacts.segments,
                artifacts.report.display()
            );
        }
    }
    Ok(())
}
