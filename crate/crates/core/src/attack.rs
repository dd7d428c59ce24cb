//! GreedyFool: score single-pixel candidates with differential evolution,
//! then apply the best ones until the classifier's decision changes.
//!
//! A candidate's perturbation priority is
//! `zeta * (P_t(X) - P_t(X')) / IntegLoss`, with `zeta = +1` and `t` the true
//! label for non-targeted attacks, and `zeta = -1` and `t` the target label
//! for targeted ones. Priorities are measured once, against the pristine
//! benign image; the greedy phase accumulates a prefix of the ranking.

use std::collections::{HashMap, HashSet};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evolution::{self, DeConfig, DeError, InitDistribution, SearchBounds};
use crate::image::{ImageError, ImageTensor, PerturbationUnit};
use crate::metrics::{lp_norms, MetricError, PerceptualModel};
use crate::oracle::{InstrumentedOracle, Oracle, OracleError, ProbabilityVector};

/// Priority of candidates that leave the pixel unchanged. Such units are
/// never applied.
pub const SENTINEL_PRIORITY: f64 = f64::MIN;

/// Version tag written into serialized reports.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Initial distributions for `(x, y, r, g, b)`.
pub const PIXEL_INIT: [InitDistribution; 5] = [
    InitDistribution::Uniform,
    InitDistribution::Uniform,
    InitDistribution::Gaussian {
        mean: 128.0,
        std_dev: 127.0,
    },
    InitDistribution::Gaussian {
        mean: 128.0,
        std_dev: 127.0,
    },
    InitDistribution::Gaussian {
        mean: 128.0,
        std_dev: 127.0,
    },
];

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack goal: {0}")]
    InvalidGoal(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("oracle failed on the benign image: {0}")]
    Baseline(#[source] OracleError),
    #[error("oracle failed probing unit {unit:?}: {source}")]
    Probe {
        unit: PerturbationUnit,
        #[source]
        source: OracleError,
    },
    #[error("candidate scoring aborted after {oracle_calls} oracle call(s): {source}")]
    Scoring {
        oracle_calls: u64,
        #[source]
        source: Box<AttackError>,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    NonTargeted,
    Targeted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackGoal {
    mode: AttackMode,
    true_label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_label: Option<usize>,
}

impl AttackGoal {
    pub fn non_targeted(true_label: usize) -> Self {
        Self {
            mode: AttackMode::NonTargeted,
            true_label,
            target_label: None,
        }
    }

    pub fn targeted(true_label: usize, target_label: usize) -> Result<Self, AttackError> {
        if target_label == true_label {
            return Err(AttackError::InvalidGoal(format!(
                "target label {target_label} equals the true label"
            )));
        }
        Ok(Self {
            mode: AttackMode::Targeted,
            true_label,
            target_label: Some(target_label),
        })
    }

    pub fn mode(&self) -> AttackMode {
        self.mode
    }

    pub fn true_label(&self) -> usize {
        self.true_label
    }

    pub fn target_label(&self) -> Option<usize> {
        self.target_label
    }

    /// `+1` for non-targeted, `-1` for targeted.
    pub fn zeta(&self) -> f64 {
        match self.mode {
            AttackMode::NonTargeted => 1.0,
            AttackMode::Targeted => -1.0,
        }
    }

    /// Class whose probability the priority tracks.
    pub fn tracked_label(&self) -> usize {
        self.target_label.unwrap_or(self.true_label)
    }

    pub fn is_satisfied_by(&self, prediction: &ProbabilityVector) -> bool {
        let label = prediction.argmax();
        match self.mode {
            AttackMode::NonTargeted => label != self.true_label,
            AttackMode::Targeted => Some(label) == self.target_label,
        }
    }

    fn check_classes(&self, num_classes: usize) -> Result<(), AttackError> {
        let max = self.true_label.max(self.target_label.unwrap_or(0));
        if max >= num_classes {
            return Err(AttackError::InvalidGoal(format!(
                "label {max} is out of range for {num_classes} classes"
            )));
        }
        Ok(())
    }
}

/// A scored single-pixel candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub unit: PerturbationUnit,
    pub priority: f64,
    /// `P_t` of the benign image with only this unit applied.
    pub probe_probability: f64,
}

/// Perturbation priority of one unit.
///
/// `baseline_prob` is `P_t` of the untouched image. No-op units score
/// [`SENTINEL_PRIORITY`] without querying the oracle.
pub fn perturbation_priority<O: Oracle + ?Sized>(
    benign: &ImageTensor,
    unit: &PerturbationUnit,
    goal: &AttackGoal,
    baseline_prob: f64,
    oracle: &O,
    model: &PerceptualModel,
) -> Result<CandidateRecord, AttackError> {
    let loss = model.integ_loss(benign, unit)?.total;
    if loss == 0.0 {
        return Ok(CandidateRecord {
            unit: *unit,
            priority: SENTINEL_PRIORITY,
            probe_probability: baseline_prob,
        });
    }
    let probe = oracle
        .predict(&benign.with_unit(unit)?)
        .map_err(|source| AttackError::Probe {
            unit: *unit,
            source,
        })?;
    let probe_probability = probe.get(goal.tracked_label());
    Ok(CandidateRecord {
        unit: *unit,
        priority: goal.zeta() * (baseline_prob - probe_probability) / loss,
        probe_probability,
    })
}

fn unit_of(position: &[i64]) -> PerturbationUnit {
    PerturbationUnit::new(
        position[0] as usize,
        position[1] as usize,
        [position[2] as u8, position[3] as u8, position[4] as u8],
    )
}

pub fn pixel_bounds(image: &ImageTensor) -> SearchBounds<5> {
    SearchBounds::new(
        [0, 0, 0, 0, 0],
        [
            image.width() as i64 - 1,
            image.height() as i64 - 1,
            255,
            255,
            255,
        ],
    )
    .expect("image dimensions are nonzero")
}

/// Sorts by descending priority (stable on ties), drops sentinel records and
/// keeps only the best unit per pixel coordinate.
pub fn rank_and_dedup(mut records: Vec<CandidateRecord>) -> Vec<CandidateRecord> {
    records.retain(|r| r.priority != SENTINEL_PRIORITY);
    records.sort_by(|a, b| b.priority.total_cmp(&a.priority));
    let mut seen = HashSet::new();
    records.retain(|r| seen.insert((r.unit.x, r.unit.y)));
    records
}

/// Scoring result: the deduplicated ranking plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidates {
    pub ranked: Vec<CandidateRecord>,
    /// Trials evaluated by the optimizer (initial population excluded).
    pub archive_size: usize,
}

/// Runs differential evolution with the perturbation priority as fitness and
/// ranks every evaluated trial.
pub fn score_candidates<O: Oracle + ?Sized>(
    benign: &ImageTensor,
    goal: &AttackGoal,
    baseline: &ProbabilityVector,
    de_config: &DeConfig,
    oracle: &O,
    model: &PerceptualModel,
) -> Result<ScoredCandidates, AttackError> {
    let counted = InstrumentedOracle::new(oracle);
    let baseline_prob = baseline.get(goal.tracked_label());
    let probes: Mutex<HashMap<[i64; 5], f64>> = Mutex::new(HashMap::new());
    let fitness = |position: &[i64; 5]| -> Result<f64, AttackError> {
        let record = perturbation_priority(
            benign,
            &unit_of(position),
            goal,
            baseline_prob,
            &counted,
            model,
        )?;
        probes
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(*position, record.probe_probability);
        Ok(record.priority)
    };
    let outcome = evolution::run(de_config, &pixel_bounds(benign), &PIXEL_INIT, fitness).map_err(
        |e| match e {
            DeError::InvalidConfig(msg) => AttackError::InvalidConfig(msg),
            DeError::PopulationTooSmall(n) => {
                AttackError::InvalidConfig(format!("population of {n} is too small"))
            }
            DeError::Fitness { source, .. } => AttackError::Scoring {
                oracle_calls: counted.calls(),
                source: Box::new(source),
            },
            DeError::NonFiniteFitness { position, value } => AttackError::Scoring {
                oracle_calls: counted.calls(),
                source: Box::new(AttackError::Probe {
                    unit: unit_of(&position),
                    source: OracleError::Protocol(format!("non-finite priority {value}")),
                }),
            },
        },
    )?;
    let probes = probes.into_inner().unwrap_or_else(|e| e.into_inner());
    let records = outcome
        .archive
        .iter()
        .map(|m| CandidateRecord {
            unit: unit_of(&m.position),
            priority: m.fitness,
            probe_probability: probes.get(&m.position).copied().unwrap_or(baseline_prob),
        })
        .collect();
    Ok(ScoredCandidates {
        ranked: rank_and_dedup(records),
        archive_size: outcome.archive.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppliedUnit {
    #[serde(flatten)]
    pub unit: PerturbationUnit,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub priority: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub mul_factor_loss: f64,
    pub l0: usize,
    pub l2: f64,
    pub linf: u8,
}

impl ReportMetrics {
    pub fn measure(
        benign: &ImageTensor,
        adversarial: &ImageTensor,
        model: &PerceptualModel,
    ) -> Result<Self, MetricError> {
        let lp = lp_norms(benign, adversarial)?;
        Ok(Self {
            mul_factor_loss: model.mul_factor_loss(benign, adversarial)?,
            l0: lp.l0,
            l2: lp.l2,
            linf: lp.linf,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    GreedyFool,
    RandomBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub elapsed_secs: f64,
}

/// Outcome of one attack.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub schema_version: u32,
    pub method: AttackMethod,
    pub success: bool,
    pub goal: AttackGoal,
    pub initial_label: usize,
    pub final_label: usize,
    pub final_confidence: f64,
    /// Units in application order.
    pub applied_units: Vec<AppliedUnit>,
    pub oracle_calls: u64,
    /// Candidates surviving ranking and deduplication (0 for the baseline).
    pub ranked_candidates: usize,
    pub metrics: ReportMetrics,
    /// Set when an oracle failure cut the attack short.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Excluded from reproducibility guarantees.
    pub timing: Timing,
    #[serde(skip)]
    pub adversarial: ImageTensor,
}

/// Applies ranked units one at a time, probing after each, until the goal is
/// met, the ranking runs out or `max_units` units have been applied.
///
/// `baseline` is the oracle's prediction on the untouched image; when it
/// already satisfies the goal no unit is applied. An oracle failure ends the
/// loop with a failure report that keeps the units applied so far.
pub fn greedy_synthesize<O: Oracle + ?Sized>(
    benign: &ImageTensor,
    ranked: &[CandidateRecord],
    goal: &AttackGoal,
    baseline: &ProbabilityVector,
    oracle: &O,
    max_units: Option<usize>,
    model: &PerceptualModel,
) -> Result<AttackReport, AttackError> {
    let start = Instant::now();
    let mut adversarial = benign.clone();
    let mut applied = Vec::new();
    let mut latest = baseline.clone();
    let mut success = goal.is_satisfied_by(baseline);
    let mut calls = 0u64;
    let mut error = None;
    let budget = max_units.unwrap_or(usize::MAX);

    for record in ranked.iter().take(budget) {
        if success {
            break;
        }
        adversarial.apply(&record.unit)?;
        applied.push(AppliedUnit {
            unit: record.unit,
            priority: Some(record.priority),
        });
        calls += 1;
        match oracle.predict(&adversarial) {
            Ok(p) => {
                success = goal.is_satisfied_by(&p);
                latest = p;
            }
            Err(e) => {
                error = Some(format!("oracle failed after unit {}: {e}", applied.len()));
                break;
            }
        }
    }

    Ok(AttackReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method: AttackMethod::GreedyFool,
        success,
        goal: *goal,
        initial_label: baseline.argmax(),
        final_label: latest.argmax(),
        final_confidence: latest.confidence(),
        metrics: ReportMetrics::measure(benign, &adversarial, model)?,
        applied_units: applied,
        oracle_calls: calls,
        ranked_candidates: ranked.len(),
        error,
        timing: Timing {
            elapsed_secs: start.elapsed().as_secs_f64(),
        },
        adversarial,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttackConfig {
    pub de: DeConfig,
    /// Cap on greedily applied units; `None` walks the whole ranking.
    pub max_units: Option<usize>,
    pub model: PerceptualModel,
}

fn baseline_prediction<O: Oracle + ?Sized>(
    benign: &ImageTensor,
    goal: &AttackGoal,
    oracle: &O,
) -> Result<ProbabilityVector, AttackError> {
    let baseline = oracle.predict(benign).map_err(AttackError::Baseline)?;
    goal.check_classes(baseline.num_classes())?;
    if goal.mode() == AttackMode::NonTargeted && baseline.argmax() != goal.true_label() {
        tracing::warn!(
            predicted = baseline.argmax(),
            true_label = goal.true_label(),
            "benign image is already misclassified"
        );
    }
    Ok(baseline)
}

/// Full pipeline: baseline query, candidate scoring, greedy synthesis.
pub fn attack<O: Oracle + ?Sized>(
    benign: &ImageTensor,
    goal: &AttackGoal,
    config: &AttackConfig,
    oracle: &O,
) -> Result<AttackReport, AttackError> {
    let start = Instant::now();
    let counted = InstrumentedOracle::new(oracle);
    let baseline = baseline_prediction(benign, goal, &counted)?;
    let scored = score_candidates(benign, goal, &baseline, &config.de, &counted, &config.model)
        .map_err(|e| match e {
            AttackError::Scoring { source, .. } => AttackError::Scoring {
                oracle_calls: counted.calls(),
                source,
            },
            other => other,
        })?;
    tracing::debug!(
        archive = scored.archive_size,
        ranked = scored.ranked.len(),
        "candidates scored"
    );
    let mut report = greedy_synthesize(
        benign,
        &scored.ranked,
        goal,
        &baseline,
        &counted,
        config.max_units,
        &config.model,
    )?;
    report.oracle_calls = counted.calls();
    report.timing.elapsed_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BaselineConfig {
    /// Maximum oracle probes (one per applied unit).
    pub budget: usize,
    pub seed: u64,
    pub model: PerceptualModel,
}

/// Applies uniformly random units (uniform coordinates, uniform colors) until
/// the goal is met or the probe budget runs out. The benign image is not
/// queried.
pub fn random_baseline_attack<O: Oracle + ?Sized>(
    benign: &ImageTensor,
    goal: &AttackGoal,
    config: &BaselineConfig,
    oracle: &O,
) -> Result<AttackReport, AttackError> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adversarial = benign.clone();
    let mut applied = Vec::new();
    let mut latest: Option<ProbabilityVector> = None;
    let mut success = false;
    let mut error = None;

    for _ in 0..config.budget {
        let unit = PerturbationUnit::new(
            rng.gen_range(0..benign.width()),
            rng.gen_range(0..benign.height()),
            rng.gen(),
        );
        adversarial.apply(&unit)?;
        applied.push(AppliedUnit {
            unit,
            priority: None,
        });
        match oracle.predict(&adversarial) {
            Ok(p) => {
                if latest.is_none() {
                    goal.check_classes(p.num_classes())?;
                }
                success = goal.is_satisfied_by(&p);
                latest = Some(p);
                if success {
                    break;
                }
            }
            Err(e) => {
                error = Some(format!("oracle failed after unit {}: {e}", applied.len()));
                break;
            }
        }
    }

    let (final_label, final_confidence) = latest
        .as_ref()
        .map_or((goal.true_label(), 0.0), |p| (p.argmax(), p.confidence()));
    Ok(AttackReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method: AttackMethod::RandomBaseline,
        success,
        goal: *goal,
        initial_label: goal.true_label(),
        final_label,
        final_confidence,
        metrics: ReportMetrics::measure(benign, &adversarial, &config.model)?,
        oracle_calls: applied.len() as u64,
        applied_units: applied,
        ranked_candidates: 0,
        error,
        timing: Timing {
            elapsed_secs: start.elapsed().as_secs_f64(),
        },
        adversarial,
    })
}
