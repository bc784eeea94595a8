//! `rahp`: batch command-line front end for the scoring engine.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rahp_core::eval::Protocol;
use rahp_core::EngineConfig;

#[derive(Parser)]
#[command(name = "rahp", version, about = "Hierarchical relation-prompt scoring for open-vocabulary scene graphs")]
struct Cli {
    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Flat TOML file of engine settings; flags win over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    /// Weight of the region-aware score.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Region prompts kept per predicate, or `all`.
    #[arg(long, global = true, value_parser = parse_k)]
    k: Option<usize>,
    /// Triplets kept per image.
    #[arg(long, global = true)]
    top_m: Option<usize>,
    /// Number of super entities.
    #[arg(long, global = true)]
    num_super: Option<usize>,
    /// Seed for clustering and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// IoU threshold for SGDet matching.
    #[arg(long, global = true)]
    iou: Option<f64>,
    /// Softmax temperature for predicate scores.
    #[arg(long, global = true)]
    temperature: Option<f64>,
}

pub(crate) fn parse_k(s: &str) -> Result<usize, String> {
    if s == "all" {
        return Ok(usize::MAX);
    }
    s.parse().map_err(|_| format!("expected a positive integer or `all`, got {s:?}"))
}

#[derive(Subcommand)]
enum Command {
    /// Group entity embeddings into named super entities.
    Cluster(commands::ClusterArgs),
    /// List every entity and region prompt string.
    Prompts(commands::PromptsArgs),
    /// Collect region descriptions or super-entity names from an LLM or fixtures.
    Mine(commands::MineArgs),
    /// Score relation proposals against the prompt hierarchy.
    Score(commands::ScoreArgs),
    /// Turn predicate scores into ranked scene graphs.
    Infer(commands::InferArgs),
    /// Compute R@K and mR@K over total, base and novel predicates.
    Eval(commands::EvalArgs),
    /// Finite-difference check of every loss gradient.
    LossCheck(commands::LossCheckArgs),
    /// Run the built-in checks of every module.
    Selftest(commands::SelftestArgs),
    /// Evaluate a grid of alpha and k values.
    Sweep(commands::SweepArgs),
    /// Generate deterministic synthetic inputs.
    #[command(subcommand)]
    Synth(commands::SynthCommand),
}

/// How a command failed; rendered as one JSON line on stderr.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Module(rahp_core::Error),
    Other { kind: &'static str, message: String },
}

impl Failure {
    fn kind(&self) -> &str {
        match self {
            Self::Usage(_) => "UsageError",
            Self::Module(e) => e.kind(),
            Self::Other { kind, .. } => kind,
        }
    }

    fn message(&self) -> String {
        match self {
            Self::Usage(m) | Self::Other { message: m, .. } => m.clone(),
            Self::Module(e) => e.to_string(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::Other {
            kind: "IoFailure",
            message: format!("{}: {e}", path.display()),
        }
    }
}

macro_rules! module_errors {
    ($($t:ty),* $(,)?) => {
        $(impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Self::Module(e.into())
            }
        })*
    };
}

module_errors!(
    rahp_core::Error,
    rahp_core::embedding::EmbeddingError,
    rahp_core::clustering::ClusterError,
    rahp_core::prompts::PromptError,
    rahp_core::miner::MinerError,
    rahp_core::scorer::ScoreError,
    rahp_core::losses::LossError,
    rahp_core::eval::EvalError,
    rahp_core::corpus::CorpusError,
    rahp_core::config::ConfigError,
);

fn load_config(cli: &Cli) -> Result<EngineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
            EngineConfig::from_toml(&text)?
        }
        None => EngineConfig::default(),
    };
    let o = &cli.overrides;
    if let Some(v) = o.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = o.k {
        cfg.k = v;
    }
    if let Some(v) = o.top_m {
        cfg.top_m = v;
    }
    if let Some(v) = o.num_super {
        cfg.num_super = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.iou {
        cfg.iou_thresh = v;
    }
    if let Some(v) = o.temperature {
        cfg.softmax_temperature = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Cluster(a) => commands::cluster(a, &cfg),
        Command::Prompts(a) => commands::prompts(a),
        Command::Mine(a) => commands::mine(a),
        Command::Score(a) => commands::score(a, &cfg),
        Command::Infer(a) => commands::infer(a, &cfg),
        Command::Eval(a) => commands::eval(a, &cfg),
        Command::LossCheck(a) => commands::loss_check(a, &cfg),
        Command::Selftest(a) => commands::selftest(a),
        Command::Sweep(a) => commands::sweep(a, &cfg),
        Command::Synth(c) => commands::synth(c, &cfg),
    }
}

fn report(f: &Failure) -> ExitCode {
    let line = serde_json::json!({ "error": f.kind(), "message": f.message() });
    eprintln!("{line}");
    ExitCode::from(f.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or_default().trim_start_matches("error: ");
            return report(&Failure::Usage(first.to_string()));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&f),
    }
}

pub(crate) fn protocol_parser(s: &str) -> Result<Protocol, String> {
    s.parse()
}
