//! Command-line front end: `gen`, `train`, `eval` and `replay`.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::EvalError;
use crate::matcher::MatcherError;
use crate::scenegen::{SceneError, ShapeFamily};

pub use commands::{cmd_eval, cmd_gen, cmd_train};
pub use config::{expand_config, parse_config};

pub const MANIFEST_NAME: &str = "run_manifest.json";
pub const THREADS_ENV: &str = "LFM3D_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid flags: {0}")]
    InvalidFlags(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::InvalidFlags(_) | CliError::Matcher(MatcherError::MissingCheckpoint) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "lfm3d", version, about = "Synthetic wide-baseline matching: generate, train, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a split of scene pairs.
    Gen(GenArgs),
    /// Train a matcher stage.
    Train(TrainArgs),
    /// Evaluate a matcher or baseline on a split.
    Eval(EvalArgs),
    /// Rerun the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassArg {
    ShoeLike,
    CameraLike,
}

impl From<ClassArg> for ShapeFamily {
    fn from(c: ClassArg) -> Self {
        match c {
            ClassArg::ShoeLike => ShapeFamily::ShoeLike,
            ClassArg::CameraLike => ShapeFamily::CameraLike,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenSignal {
    Nocs,
    Mde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseArg {
    None,
    Default,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageArg {
    Pretrain2d,
    Finetune3d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainSignal {
    Nocs,
    Mde,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Pr,
    Pose,
    AblateKp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Lfm3d,
    Sg2d,
    Mnn,
    Ratio,
    NocsFilter,
    PnpSparse,
    PnpDense,
}

/// Inclusive baseline range written as `LO:HI` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineRange(pub f64, pub f64);

impl std::str::FromStr for BaselineRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected LO:HI, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
        let (lo, hi) = (parse(lo)?, parse(hi)?);
        if !(0.0 <= lo && lo <= hi && hi <= 180.0) {
            return Err(format!("need 0 <= LO <= HI <= 180, got {lo}:{hi}"));
        }
        Ok(BaselineRange(lo, hi))
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[command(args_override_self = true)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "shoe-like")]
    pub class: ClassArg,
    #[arg(long)]
    pub pairs: usize,
    #[arg(long, default_value = "15:75")]
    pub baseline: BaselineRange,
    #[arg(long, value_enum, default_value = "nocs")]
    pub signal: GenSignal,
    #[arg(long, value_enum, default_value = "default")]
    pub noise: NoiseArg,
    /// Surface points per object.
    #[arg(long, default_value_t = 800)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults as `key=value` lines; flags override.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    /// Stage-1 checkpoint to finetune from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    pub signal: TrainSignal,
    #[arg(long, value_enum, default_value = "on")]
    pub pe: Switch,
    #[arg(long, default_value_t = 50_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 8e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Iteration after which the learning rate decays.
    #[arg(long, default_value_t = 5_000)]
    pub decay_start: usize,
    /// Sinkhorn iterations of a fresh model; finetuning keeps the parent's.
    #[arg(long, default_value_t = 100)]
    pub sinkhorn_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Learned matcher; for nocs-filter the matcher whose output is filtered.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// NOCS distance of the nocs-filter method.
    #[arg(long)]
    pub d: Option<f64>,
    #[arg(long, default_value_t = crate::baselines::DEFAULT_RATIO)]
    pub ratio: f64,
    /// Keypoint counts of the ablation, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = crate::evaluation::ABLATION_COUNTS)]
    pub counts: Vec<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write to this path instead of the recorded output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything needed to rerun a subcommand, stored next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    /// Flags after config expansion, replayable as-is.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64, args: &[String], config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            seed,
            args: args.to_vec(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

pub(crate) fn display(p: &Path) -> String {
    p.display().to_string()
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::InvalidFlags(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<String> = argv.into_iter().map(|a| a.into().to_string_lossy().into_owned()).collect();
    match run_args(&argv) {
        Ok(()) => 0,
        Err(Exit::Clap(e)) => {
            let _ = e.print();
            e.exit_code()
        }
        Err(Exit::Cli(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

enum Exit {
    Clap(clap::Error),
    Cli(CliError),
}

impl From<CliError> for Exit {
    fn from(e: CliError) -> Self {
        Exit::Cli(e)
    }
}

fn run_args(argv: &[String]) -> Result<(), Exit> {
    let expanded = expand_config(argv)?;
    let cli = Cli::try_parse_from(&expanded).map_err(Exit::Clap)?;
    configure_threads()?;
    let recorded = without_flag(&expanded[2.min(expanded.len())..], "config");
    match cli.command {
        Command::Gen(a) => cmd_gen(&a, &recorded)?,
        Command::Train(a) => cmd_train(&a, &recorded)?,
        Command::Eval(a) => cmd_eval(&a, &recorded)?,
        Command::Replay(a) => replay(&a)?,
    }
    Ok(())
}

/// Drops every `--name VALUE` and `--name=VALUE` occurrence.
fn without_flag(args: &[String], name: &str) -> Vec<String> {
    let (bare, eq) = (format!("--{name}"), format!("--{name}="));
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if *a == bare {
            it.next();
        } else if !a.starts_with(&eq) {
            out.push(a.clone());
        }
    }
    out
}

/// Reruns a manifest's recorded flags, optionally redirecting `--out`.
pub fn replay(args: &ReplayArgs) -> Result<(), CliError> {
    let manifest = RunManifest::read(&args.manifest)?;
    let mut flags = manifest.args.clone();
    if let Some(out) = &args.out {
        flags = without_flag(&flags, "out");
        flags.push(format!("--out={}", out.display()));
    }
    let mut argv = vec![manifest.tool.clone(), manifest.subcommand.clone()];
    argv.extend(flags.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::InvalidFlags(format!("manifest flags: {e}")))?;
    match cli.command {
        Command::Gen(a) => cmd_gen(&a, &flags),
        Command::Train(a) => cmd_train(&a, &flags),
        Command::Eval(a) => cmd_eval(&a, &flags),
        Command::Replay(_) => Err(CliError::InvalidFlags("a manifest cannot record a replay".into())),
    }
}
