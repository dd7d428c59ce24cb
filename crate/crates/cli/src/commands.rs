use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Duration;

use greedyfool::attack::{self, REPORT_SCHEMA_VERSION};
use greedyfool::png_io::{self, PngError};
use greedyfool::{
    AttackConfig, AttackError, AttackGoal, AttackReport, BaselineConfig, ChannelWeights, DeConfig,
    ImageTensor, LpNorms, MetricError, Oracle, PerceptualModel, PixelLossBreakdown, RemoteOracle,
    RemoteOracleConfig, ToyClassifier,
};
use serde::Serialize;
use thiserror::Error;

use crate::args::{
    AttackArgs, BaselineArgs, GoalArgs, MetricsArgs, Mode, OracleArgs, OracleKind, PerceptualArgs,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Oracle(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Oracle(_) => 4,
        })
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::InvalidGoal(_) | AttackError::InvalidConfig(_) => {
                CliError::Usage(e.to_string())
            }
            AttackError::Baseline(_) | AttackError::Probe { .. } | AttackError::Scoring { .. } => {
                CliError::Oracle(e.to_string())
            }
            AttackError::Image(_) | AttackError::Metric(_) => CliError::Io(e.to_string()),
        }
    }
}

fn load(path: &Path) -> Result<ImageTensor, CliError> {
    png_io::load(path).map_err(|e| match e {
        PngError::Io(io) => CliError::Io(format!("cannot read {}: {io}", path.display())),
        other => CliError::Io(format!("cannot decode {}: {other}", path.display())),
    })
}

fn perceptual_model(args: &PerceptualArgs) -> Result<PerceptualModel, CliError> {
    let [r, g, b] = args.weights;
    ChannelWeights::new(r, g, b)
        .and_then(|w| PerceptualModel::new(w, args.sd_floor))
        .map_err(|e| CliError::Usage(e.to_string()))
}

/// Checks everything that can be checked before touching the filesystem or
/// the oracle.
fn precheck(oracle: &OracleArgs, goal: &GoalArgs) -> Result<(), CliError> {
    if goal.mode == Mode::Targeted {
        let Some(target) = goal.target_label else {
            return Err(CliError::Usage(
                "--mode targeted requires --target-label".into(),
            ));
        };
        if goal.true_label == Some(target) {
            return Err(CliError::Usage(format!(
                "--target-label {target} equals --true-label"
            )));
        }
    } else if goal.target_label.is_some() {
        return Err(CliError::Usage(
            "--target-label is only valid with --mode targeted".into(),
        ));
    }
    match oracle.oracle {
        OracleKind::Remote if oracle.endpoint.is_none() => Err(CliError::Usage(
            "--oracle remote requires --endpoint or GREEDYFOOL_ENDPOINT".into(),
        )),
        OracleKind::Remote if !(oracle.timeout.is_finite() && oracle.timeout > 0.0) => {
            Err(CliError::Usage(format!(
                "--timeout must be positive, got {}",
                oracle.timeout
            )))
        }
        _ => Ok(()),
    }
}

fn build_oracle(args: &OracleArgs) -> Result<Box<dyn Oracle>, CliError> {
    match args.oracle {
        OracleKind::Builtin => ToyClassifier::new(args.num_classes, args.oracle_seed, None)
            .map(|t| Box::new(t) as Box<dyn Oracle>)
            .map_err(|e| CliError::Usage(e.to_string())),
        OracleKind::Remote => {
            let endpoint = args.endpoint.clone().unwrap_or_default();
            let config = RemoteOracleConfig {
                timeout: Duration::from_secs_f64(args.timeout),
                retries: args.retries,
                max_in_flight: args.max_in_flight,
                bearer_token: args.token.clone(),
                ..RemoteOracleConfig::new(endpoint)
            };
            RemoteOracle::new(config)
                .map(|o| Box::new(o) as Box<dyn Oracle>)
                .map_err(|e| CliError::Usage(e.to_string()))
        }
    }
}

fn resolve_goal(
    args: &GoalArgs,
    image: &ImageTensor,
    oracle: &dyn Oracle,
) -> Result<AttackGoal, CliError> {
    let true_label = match args.true_label {
        Some(label) => label,
        None => {
            let label = oracle
                .predict(image)
                .map_err(|e| CliError::Oracle(format!("oracle failed on the benign image: {e}")))?
                .argmax();
            tracing::info!(label, "true label taken from the oracle's prediction");
            label
        }
    };
    Ok(match (args.mode, args.target_label) {
        (Mode::Targeted, Some(target)) => AttackGoal::targeted(true_label, target)?,
        _ => AttackGoal::non_targeted(true_label),
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn finish(report: &AttackReport, out: &Path, report_path: &Path) -> Result<ExitCode, CliError> {
    png_io::save(&report.adversarial, out)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", out.display())))?;
    write_json(report, report_path)?;
    let verdict = if report.success { "success" } else { "failure" };
    println!(
        "{verdict}: label {} -> {} ({:.4}) with {} pixel(s), MulFactorLoss {:.4}, {} oracle call(s)",
        report.initial_label,
        report.final_label,
        report.final_confidence,
        report.metrics.l0,
        report.metrics.mul_factor_loss,
        report.oracle_calls,
    );
    println!("wrote {} and {}", out.display(), report_path.display());
    Ok(match (&report.error, report.success) {
        (Some(err), _) => {
            eprintln!("error: {err}");
            ExitCode::from(4)
        }
        (None, true) => ExitCode::SUCCESS,
        (None, false) => ExitCode::from(1),
    })
}

pub fn attack(args: &AttackArgs) -> Result<ExitCode, CliError> {
    precheck(&args.oracle, &args.goal)?;
    let model = perceptual_model(&args.perceptual)?;
    let de = DeConfig {
        population_size: args.pop_size,
        generations: args.generations,
        seed: args.seed,
        threads: args.threads,
        ..DeConfig::default()
    };
    de.validate().map_err(CliError::Usage)?;
    let image = load(&args.input)?;
    let oracle = build_oracle(&args.oracle)?;
    let goal = resolve_goal(&args.goal, &image, oracle.as_ref())?;
    let config = AttackConfig {
        de,
        max_units: args.max_units,
        model,
    };
    let report = attack::attack(&image, &goal, &config, oracle.as_ref())?;
    let (out, report_path) = args.output.resolve(&args.input);
    finish(&report, &out, &report_path)
}

pub fn baseline(args: &BaselineArgs) -> Result<ExitCode, CliError> {
    precheck(&args.oracle, &args.goal)?;
    let model = perceptual_model(&args.perceptual)?;
    let image = load(&args.input)?;
    let oracle = build_oracle(&args.oracle)?;
    let goal = resolve_goal(&args.goal, &image, oracle.as_ref())?;
    let config = BaselineConfig {
        budget: args.budget,
        seed: args.seed,
        model,
    };
    let report = attack::random_baseline_attack(&image, &goal, &config, oracle.as_ref())?;
    let (out, report_path) = args.output.resolve(&args.input);
    finish(&report, &out, &report_path)
}

#[derive(Debug, Serialize)]
struct MetricsReport {
    schema_version: u32,
    l0: usize,
    l2: f64,
    linf: u8,
    mul_factor_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    breakdown: Option<Vec<PixelLossBreakdown>>,
}

pub fn metrics(args: &MetricsArgs) -> Result<ExitCode, CliError> {
    let model = perceptual_model(&args.perceptual)?;
    let benign = load(&args.benign)?;
    let adversarial = load(&args.adversarial)?;
    let input_err = |e: MetricError| CliError::Io(e.to_string());
    let LpNorms { l0, l2, linf } =
        greedyfool::lp_norms(&benign, &adversarial).map_err(input_err)?;
    let breakdowns = model.breakdowns(&benign, &adversarial).map_err(input_err)?;
    let report = MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        l0,
        l2,
        linf,
        mul_factor_loss: breakdowns.iter().fold(0.0, |acc, b| acc + b.total),
        breakdown: args.breakdown.then_some(breakdowns),
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    println!("{text}");
    if let Some(path) = &args.report {
        write_json(&report, path)?;
    }
    Ok(ExitCode::SUCCESS)
}
