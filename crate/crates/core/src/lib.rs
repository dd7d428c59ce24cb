//! Black-box adversarial attacks scored by a multi-factor perceptual loss.
//!
//! The crate is split along the pipeline:
//!
//! - [`metrics`]: JND curve, perceptual-stimulus table, texture masking, channel
//!   weights and the composite `IntegLoss` / `MulFactorLoss`, plus Lp norms.
//! - [`evolution`]: integer differential evolution (rand/1, no crossover,
//!   one-to-one selection) with a full archive of evaluated trials.
//! - [`oracle`]: the classifier seen as a confidence oracle, with a seeded toy
//!   classifier and an HTTP client.
//! - [`attack`]: perturbation priority, candidate scoring, greedy synthesis and
//!   a random-unit baseline.
//! - [`png_io`]: lossless 8-bit RGB PNG loading and saving.

pub mod attack;
pub mod evolution;
pub mod image;
pub mod metrics;
pub mod oracle;
pub mod png_io;

pub use attack::{
    attack, greedy_synthesize, perturbation_priority, random_baseline_attack, score_candidates,
    AttackConfig, AttackError, AttackGoal, AttackMode, AttackReport, BaselineConfig,
    CandidateRecord, ReportMetrics, SENTINEL_PRIORITY,
};
pub use evolution::{
    DeConfig, DeError, DeOutcome, EvaluatedMember, InitDistribution, SearchBounds,
};
pub use image::{Channel, ImageError, ImageTensor, PerturbationUnit};
pub use metrics::{
    jnd_at, jnd_curve, lp_norms, texture_sd, ChannelWeights, LpNorms, MetricError, PerceptualModel,
    PixelLossBreakdown, PsTable,
};
pub use oracle::{
    InstrumentedOracle, Oracle, OracleError, OracleStats, ProbabilityVector, RemoteOracle,
    RemoteOracleConfig, ToyClassifier,
};
