use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use tokenfusion::harness::{
    evaluate_view, export_masks, grad_check, load_dataset, train_to_dir, Checkpoint, ExperimentConfig, ExportOptions,
    Session, CHECKPOINT_DIR,
};
use tokenfusion::synth::{generate, DataConfig, HeterogeneousConfig, HomogeneousConfig};
use tokenfusion::Result;

#[derive(Parser)]
#[command(name = "tokenfusion", version, about = "Token scoring and substitution experiments on synthetic multimodal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by a config
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, writing metrics.jsonl, a checkpoint and final.json to the output directory
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from; steps in the config are the new total
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split
    Eval {
        /// Checkpoint directory, its manifest, or a training output directory
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Compare analytic and finite-difference gradients on a reduced model
    GradCheck {
        /// Config to reduce; a homogeneous and a heterogeneous default when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Write per-layer substitution masks of one sample
    ExportMasks {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: usize,
        /// Comma-separated 1-based layers, e.g. 1,2
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
        #[arg(long, default_value = "masks")]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Pixels per token cell
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
}

fn checkpoint_path(p: &Path) -> PathBuf {
    let nested = p.join(CHECKPOINT_DIR);
    if nested.is_dir() {
        nested
    } else {
        p.to_path_buf()
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn default_grad_configs() -> Vec<ExperimentConfig> {
    let mut homo = ExperimentConfig::default();
    homo.data = DataConfig::Homogeneous(HomogeneousConfig::default());
    homo.model.dim = 16;
    let mut hetero = ExperimentConfig::default();
    hetero.data = DataConfig::Heterogeneous(HeterogeneousConfig::default());
    vec![homo, hetero]
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let ds = generate(&cfg.data)?;
            ds.save(&out)?;
            eprintln!("wrote {} train and {} val samples to {}", ds.train.samples, ds.val.samples, out.display());
        }
        Command::Train { config, out, resume } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let resume = resume.map(|p| checkpoint_path(&p));
            let summary = train_to_dir(cfg, &out, resume.as_deref())?;
            print_json(&summary)?;
        }
        Command::Eval { ckpt, split } => {
            let ck = Checkpoint::load(&checkpoint_path(&ckpt))?;
            let ds = Arc::new(load_dataset(&ck.config)?);
            let session = Session::from_checkpoint(ck, ds)?;
            let view = session.view(&split)?;
            let metrics = evaluate_view(&session.model, &session.store, &view, &session.cfg, &split)?;
            print_json(&metrics)?;
        }
        Command::GradCheck { config, tol } => {
            let configs = match config {
                Some(p) => vec![ExperimentConfig::from_file(&p)?],
                None => default_grad_configs(),
            };
            let mut failed = None;
            for cfg in &configs {
                let report = grad_check(cfg, tol)?;
                print_json(&report)?;
                if let Err(e) = report.into_result() {
                    failed.get_or_insert(e);
                }
            }
            if let Some(e) = failed {
                return Err(e);
            }
        }
        Command::ExportMasks { ckpt, sample, layers, out, split, scale } => {
            let ck = Checkpoint::load(&checkpoint_path(&ckpt))?;
            let ds = Arc::new(load_dataset(&ck.config)?);
            let opts = ExportOptions { split, sample, layers, scale, policy: None };
            let report = export_masks(&ck, ds, &opts, &out)?;
            let files: Vec<String> = report.files.iter().map(|f| f.display().to_string()).collect();
            print_json(&serde_json::json!({
                "files": files,
                "substituted": report.substituted,
                "in_hidden": report.in_hidden,
            }))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            ExitCode::from(u8::try_from(code).unwrap_or(1))
        }
    }
}
