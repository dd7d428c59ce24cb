use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "greedyfool",
    version,
    about = "Sparse, low-visibility adversarial examples against black-box image classifiers",
    after_help = "Exit codes: 0 success, 1 attack failed, 2 usage error, 3 I/O error, 4 oracle error."
)]
pub struct Cli {
    /// More log output on stderr (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run GreedyFool on one PNG and write the adversarial image and a report.
    Attack(AttackArgs),
    /// Random single-pixel baseline with the same inputs and outputs as `attack`.
    Baseline(BaselineArgs),
    /// Perceptual and Lp distances between a benign and an adversarial PNG.
    Metrics(MetricsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleKind {
    /// Deterministic toy classifier built into the binary.
    Builtin,
    /// Model server reached over HTTP.
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Nontargeted,
    Targeted,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, value_enum, default_value_t = OracleKind::Builtin)]
    pub oracle: OracleKind,

    /// Seed of the builtin classifier's weights.
    #[arg(long, default_value_t = 0)]
    pub oracle_seed: u64,

    /// Number of classes of the builtin classifier.
    #[arg(long, default_value_t = 10)]
    pub num_classes: usize,

    /// Base URL of the model server.
    #[arg(long, env = "GREEDYFOOL_ENDPOINT")]
    pub endpoint: Option<String>,

    /// Bearer token sent to the model server.
    #[arg(long, env = "GREEDYFOOL_TOKEN", hide_env_values = true)]
    pub token: Option<String>,

    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 30.0)]
    pub timeout: f64,

    /// Retries of a request after a transient failure.
    #[arg(long, default_value_t = 2)]
    pub retries: u32,

    /// Maximum concurrent requests to the model server.
    #[arg(long, default_value_t = 8)]
    pub max_in_flight: usize,
}

#[derive(Debug, Args)]
pub struct GoalArgs {
    #[arg(long, value_enum, default_value_t = Mode::Nontargeted)]
    pub mode: Mode,

    /// Ground-truth class; defaults to the oracle's prediction on the input.
    #[arg(long)]
    pub true_label: Option<usize>,

    /// Class to reach; required in targeted mode.
    #[arg(long)]
    pub target_label: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PerceptualArgs {
    /// Lower bound on the local standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub sd_floor: f64,

    /// Channel weights `r,g,b`, summing to 1.
    #[arg(long, value_parser = parse_weights, default_value = "0.299,0.587,0.114")]
    pub weights: [f64; 3],
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Adversarial PNG path [default: <input stem>.adv.png in the current directory].
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// JSON report path [default: the --out path with a .json extension].
    #[arg(long)]
    pub report: Option<PathBuf>,
}

impl OutputArgs {
    pub fn resolve(&self, input: &Path) -> (PathBuf, PathBuf) {
        let out = self.out.clone().unwrap_or_else(|| {
            let stem = input.file_stem().unwrap_or_default().to_string_lossy();
            PathBuf::from(format!("{stem}.adv.png"))
        });
        let report = self
            .report
            .clone()
            .unwrap_or_else(|| out.with_extension("json"));
        (out, report)
    }
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Benign 8-bit RGB PNG.
    pub input: PathBuf,

    #[command(flatten)]
    pub oracle: OracleArgs,
    #[command(flatten)]
    pub goal: GoalArgs,
    #[command(flatten)]
    pub perceptual: PerceptualArgs,
    #[command(flatten)]
    pub output: OutputArgs,

    /// Seed for the optimizer; omit for a nondeterministic run.
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long, default_value_t = 200)]
    pub pop_size: usize,

    #[arg(long, default_value_t = 60)]
    pub generations: usize,

    /// Cap on applied pixels.
    #[arg(long)]
    pub max_units: Option<usize>,

    /// Worker threads for candidate scoring [default: all cores].
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// Benign 8-bit RGB PNG.
    pub input: PathBuf,

    #[command(flatten)]
    pub oracle: OracleArgs,
    #[command(flatten)]
    pub goal: GoalArgs,
    #[command(flatten)]
    pub perceptual: PerceptualArgs,
    #[command(flatten)]
    pub output: OutputArgs,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Maximum number of random pixels (one oracle query each).
    #[arg(long, default_value_t = 12_000)]
    pub budget: usize,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    pub benign: PathBuf,
    pub adversarial: PathBuf,

    #[command(flatten)]
    pub perceptual: PerceptualArgs,

    /// Include per-pixel cost breakdowns.
    #[arg(long)]
    pub breakdown: bool,

    /// Also write the JSON to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn parse_weights(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [r, g, b] = parts.as_slice() else {
        return Err(format!("expected three comma-separated weights, got {s:?}"));
    };
    let parse = |v: &str| v.parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok([parse(r)?, parse(g)?, parse(b)?])
}
