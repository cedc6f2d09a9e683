use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use icmf::config::{ExperimentConfig, MergeMethod, Precision};
use icmf::pipeline::{
    cmd_eval, cmd_finetune, cmd_fuse, cmd_merge_baseline, cmd_pretrain, cmd_report, cmd_taskvec,
    cmd_train_vae, run_all, LockGuard,
};
use icmf::{Error, Result};

/// Desk-scale laboratory for merging LoRA adapters, including a
/// task-vector-conditioned VAE that fuses adapters in latent space.
#[derive(Debug, Parser)]
#[command(name = "icmf", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides out_dir from the config
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the config's seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Redo stages even when their artifacts exist
    #[arg(long, global = true)]
    force: bool,
    /// Storage precision for artifact payloads (f32 or f64)
    #[arg(long, global = true)]
    precision: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the shared base model
    Pretrain,
    /// Fine-tune one adapter per task
    Finetune,
    /// Extract task vectors from the fine-tuned adapters
    Taskvec,
    /// Meta-train the fusion VAE
    TrainVae,
    /// Select fusion weights and decode the fused adapter
    Fuse,
    /// Run training-free baseline mergers
    MergeBaseline {
        /// Single method to run (default: all configured baselines)
        #[arg(long)]
        method: Option<String>,
    },
    /// Score all merged adapters on the test splits
    Eval,
    /// Emit the report CSV and latent export
    Report,
    /// Run every stage in order
    Run,
}

fn parse_precision(raw: &str) -> Result<Precision> {
    match raw {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(Error::InvalidConfig(format!(
            "unknown precision {other}; expected f32 or f64"
        ))),
    }
}

fn parse_method(raw: &str) -> Result<MergeMethod> {
    for method in [
        MergeMethod::Icm,
        MergeMethod::Soup,
        MergeMethod::Ta,
        MergeMethod::Ties,
        MergeMethod::DareTies,
        MergeMethod::Regmean,
        MergeMethod::SvdLatent,
    ] {
        if method.name() == raw {
            return Ok(method);
        }
    }
    Err(Error::InvalidConfig(format!("unknown merge method {raw}")))
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let path = common.config.as_ref().ok_or_else(|| {
        Error::InvalidConfig("--config is required for this command".into())
    })?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(raw) = &common.precision {
        cfg.precision = parse_precision(raw)?;
    }
    let out = match (&common.out, &cfg.out_dir) {
        (Some(out), _) => out.clone(),
        (None, Some(out)) => PathBuf::from(out),
        (None, None) => {
            return Err(Error::InvalidConfig(
                "no output directory; pass --out or set out_dir in the config".into(),
            ))
        }
    };
    Ok((cfg, out))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let (cfg, out) = load_config(&cli.common)?;
    let force = cli.common.force;
    let _lock = LockGuard::acquire(&out)?;
    match &cli.command {
        Command::Pretrain => cmd_pretrain(&cfg, &out, force),
        Command::Finetune => cmd_finetune(&cfg, &out, force),
        Command::Taskvec => cmd_taskvec(&cfg, &out, force),
        Command::TrainVae => cmd_train_vae(&cfg, &out, force),
        Command::Fuse => cmd_fuse(&cfg, &out, force),
        Command::MergeBaseline { method } => {
            let method = method.as_deref().map(parse_method).transpose()?;
            cmd_merge_baseline(&cfg, &out, method, force)
        }
        Command::Eval => cmd_eval(&cfg, &out, force),
        Command::Report => cmd_report(&cfg, &out, force),
        Command::Run => run_all(&cfg, &out, force),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::ConfigParse(_) => 2,
        Error::MissingInput(_) => 3,
        Error::ConfigHashMismatch { .. } => 4,
        Error::ContainerFormat(_) | Error::ContainerVersion { .. } => 5,
        Error::ChecksumMismatch { .. } => 6,
        Error::Locked(_) => 7,
        Error::NonFinite(_) | Error::Divergence(_) => 8,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
