//! The classifier under attack, seen only through its confidence scores.

mod remote;
mod toy;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageTensor;

pub use remote::{RemoteOracle, RemoteOracleConfig, WireRequest, WireResponse};
pub use toy::ToyClassifier;

/// Allowed deviation of a probability vector's sum from 1.
pub const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("image is {actual:?} but oracle expects {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("server answered HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("invalid oracle configuration: {0}")]
    Config(String),
}

/// Confidence distribution over class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector {
    probabilities: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

impl ProbabilityVector {
    /// Validates: at least two classes, entries in `[0, 1]`, sum within
    /// [`SUM_TOLERANCE`] of 1, and one label per class when labels are given.
    pub fn new(probabilities: Vec<f64>, labels: Option<Vec<String>>) -> Result<Self, OracleError> {
        if probabilities.len() < 2 {
            return Err(OracleError::Protocol(format!(
                "expected at least 2 classes, got {}",
                probabilities.len()
            )));
        }
        if let Some((i, p)) = probabilities
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(OracleError::Protocol(format!(
                "probability {p} at index {i} is outside [0, 1]"
            )));
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(OracleError::Protocol(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != probabilities.len() {
                return Err(OracleError::Protocol(format!(
                    "{} labels for {} classes",
                    labels.len(),
                    probabilities.len()
                )));
            }
        }
        Ok(Self {
            probabilities,
            labels,
        })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.probabilities.len()
    }

    /// Probability of class `label`, 0 when the index is out of range.
    pub fn get(&self, label: usize) -> f64 {
        self.probabilities.get(label).copied().unwrap_or(0.0)
    }

    /// Most likely class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probabilities.iter().enumerate().skip(1) {
            if p > self.probabilities[best] {
                best = i;
            }
        }
        best
    }

    pub fn confidence(&self) -> f64 {
        self.probabilities[self.argmax()]
    }
}

/// A black-box classifier.
///
/// Implementations must be safe to call from several threads at once.
pub trait Oracle: Send + Sync {
    fn predict(&self, image: &ImageTensor) -> Result<ProbabilityVector, OracleError>;

    /// `(height, width)` the oracle accepts, when it declares one.
    fn input_shape(&self) -> Option<(usize, usize)> {
        None
    }
}

impl<O: Oracle + ?Sized> Oracle for &O {
    fn predict(&self, image: &ImageTensor) -> Result<ProbabilityVector, OracleError> {
        (**self).predict(image)
    }
    fn input_shape(&self) -> Option<(usize, usize)> {
        (**self).input_shape()
    }
}

impl<O: Oracle + ?Sized> Oracle for Box<O> {
    fn predict(&self, image: &ImageTensor) -> Result<ProbabilityVector, OracleError> {
        (**self).predict(image)
    }
    fn input_shape(&self) -> Option<(usize, usize)> {
        (**self).input_shape()
    }
}

impl<O: Oracle + ?Sized> Oracle for Arc<O> {
    fn predict(&self, image: &ImageTensor) -> Result<ProbabilityVector, OracleError> {
        (**self).predict(image)
    }
    fn input_shape(&self) -> Option<(usize, usize)> {
        (**self).input_shape()
    }
}

pub(crate) fn check_shape(
    expected: Option<(usize, usize)>,
    image: &ImageTensor,
) -> Result<(), OracleError> {
    match expected {
        Some(expected) if expected != image.shape() => Err(OracleError::ShapeMismatch {
            expected,
            actual: image.shape(),
        }),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleStats {
    /// `predict` invocations.
    pub total_calls: u64,
    /// Transport-level attempts; differs from `total_calls` only for oracles
    /// that retry.
    pub attempts: u64,
    /// Failed attempts.
    pub failures: u64,
    #[serde(with = "duration_secs")]
    pub cumulative_latency: Duration,
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        f64::deserialize(d).map(Duration::from_secs_f64)
    }
}

#[derive(Debug, Default)]
pub(crate) struct StatsCounter {
    calls: AtomicU64,
    attempts: AtomicU64,
    failures: AtomicU64,
    latency_ns: AtomicU64,
}

impl StatsCounter {
    pub(crate) fn record_call(&self) {
        self.calls.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn record_attempt(&self, ok: bool, elapsed: Duration) {
        self.attempts.fetch_add(1, Ordering::Relaxed);
        if !ok {
            self.failures.fetch_add(1, Ordering::Relaxed);
        }
        self.latency_ns
            .fetch_add(elapsed.as_nanos() as u64, Ordering::Relaxed);
    }

    pub(crate) fn snapshot(&self) -> OracleStats {
        OracleStats {
            total_calls: self.calls.load(Ordering::Relaxed),
            attempts: self.attempts.load(Ordering::Relaxed),
            failures: self.failures.load(Ordering::Relaxed),
            cumulative_latency: Duration::from_nanos(self.latency_ns.load(Ordering::Relaxed)),
        }
    }
}

/// Wraps any oracle and counts its calls, failures and latency.
#[derive(Debug)]
pub struct InstrumentedOracle<O> {
    inner: O,
    stats: StatsCounter,
}

impl<O: Oracle> InstrumentedOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            stats: StatsCounter::default(),
        }
    }

    pub fn stats(&self) -> OracleStats {
        self.stats.snapshot()
    }

    pub fn calls(&self) -> u64 {
        self.stats.calls.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }
}

impl<O: Oracle> Oracle for InstrumentedOracle<O> {
    fn predict(&self, image: &ImageTensor) -> Result<ProbabilityVector, OracleError> {
        self.stats.record_call();
        let start = Instant::now();
        let out = self.inner.predict(image);
        self.stats.record_attempt(out.is_ok(), start.elapsed());
        out
    }

    fn input_shape(&self) -> Option<(usize, usize)> {
        self.inner.input_shape()
    }
}
