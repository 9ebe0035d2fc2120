//! Subcommands of the `dscnet` binary.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 when a run
//! aborts on a non-finite value or a gradient check fails.

pub mod commands;
pub mod config_file;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use commands::{
    cmd_ablate, cmd_bench, cmd_dump_groups, cmd_eval, cmd_generate, cmd_gradcheck, cmd_train,
    EvalOutput, GroupDump, TrainOutput,
};
pub use config_file::RunConfigFile;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("gradient check failed for {0}")]
    GradcheckFailed(String),

    #[error(transparent)]
    Core(#[from] dscnet_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::GradcheckFailed(_) => 2,
            CliError::Core(
                dscnet_core::Error::NumericalAbort { .. } | dscnet_core::Error::NonFinite(_),
            ) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(
    name = "dscnet",
    version,
    about = "Dual-stream contrastive segmentation on synthetic scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration file plus command-line overrides, applied in that order.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// `key = value` run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// baseline, m1, m2, m3 or m4.
    #[arg(long)]
    pub mode: Option<String>,
    /// Any configuration key, e.g. `--set tau=0.2`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfigFile> {
        let mut cfg = match &self.config {
            Some(p) => RunConfigFile::load(p)?,
            None => RunConfigFile::default(),
        };
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(s) = self.steps {
            cfg.set("steps", &s.to_string())?;
        }
        if let Some(m) = &self.mode {
            cfg.set("mode", m)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic corpus and its manifest.
    Generate(GenerateArgs),
    /// Trains from a manifest; writes a checkpoint and a metrics CSV.
    Train(TrainArgs),
    /// Scores a checkpoint's pseudo labels against a manifest's masks.
    Eval(EvalArgs),
    /// Trains every mode over several seeds and compares mIoU.
    Ablate(AblateArgs),
    /// Times pixel-by-pixel against grouped contrast.
    Bench(BenchArgs),
    /// Finite-difference check of every loss term.
    Gradcheck(GradcheckArgs),
    /// Writes one image's group assignment and prototypes.
    DumpGroups(DumpGroupsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Scene count; defaults to the `scenes` key.
    #[arg(long)]
    pub count: Option<usize>,
    /// Output directory; defaults to `<out_dir>/data`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory; defaults to `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Per-class CSV; defaults to `eval.csv` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    /// Defaults to `<out_dir>/ablation.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Square feature-map sides.
    #[arg(long, value_delimiter = ',', default_value = "32,64")]
    pub sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "3")]
    pub groups: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value = "bench.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Clone, Args)]
pub struct DumpGroupsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub image_id: String,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => cmd_generate(&a).map(drop),
        Command::Train(a) => cmd_train(&a).map(drop),
        Command::Eval(a) => cmd_eval(&a).map(drop),
        Command::Ablate(a) => cmd_ablate(&a).map(drop),
        Command::Bench(a) => cmd_bench(&a).map(drop),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::DumpGroups(a) => cmd_dump_groups(&a).map(drop),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
