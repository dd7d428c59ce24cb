//! HTTP client for an external model server.
//!
//! `POST {endpoint}/v1/predict` with
//! `{"height": H, "width": W, "channels": 3, "data_b64": "..."}`, where the
//! payload is the base64 of the row-major RGB bytes. A 200 answer carries
//! `{"probabilities": [...], "labels": [...]}` (labels optional).

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{check_shape, Oracle, OracleError, OracleStats, ProbabilityVector, StatsCounter};
use crate::image::{ImageError, ImageTensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRequest {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data_b64: String,
}

impl WireRequest {
    pub fn from_image(image: &ImageTensor) -> Self {
        Self {
            height: image.height(),
            width: image.width(),
            channels: ImageTensor::CHANNELS,
            data_b64: STANDARD.encode(image.as_bytes()),
        }
    }

    pub fn to_image(&self) -> Result<ImageTensor, String> {
        if self.channels != ImageTensor::CHANNELS {
            return Err(format!("expected 3 channels, got {}", self.channels));
        }
        let data = STANDARD
            .decode(&self.data_b64)
            .map_err(|e| format!("bad base64: {e}"))?;
        ImageTensor::new(self.height, self.width, data).map_err(|e: ImageError| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub probabilities: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteOracleConfig {
    /// Base URL; `/v1/predict` is appended.
    pub endpoint: String,
    /// Per-attempt timeout.
    pub timeout: Duration,
    /// Extra attempts after the first one fails transiently.
    pub retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff: Duration,
    pub max_in_flight: usize,
    pub bearer_token: Option<String>,
    pub input_shape: Option<(usize, usize)>,
}

impl RemoteOracleConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(30),
            retries: 2,
            backoff: Duration::from_millis(200),
            max_in_flight: 8,
            bearer_token: None,
            input_shape: None,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(slots: usize) -> Self {
        Self {
            free: Mutex::new(slots),
            cv: Condvar::new(),
        }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct RemoteOracle {
    config: RemoteOracleConfig,
    url: String,
    agent: ureq::Agent,
    gate: Gate,
    stats: StatsCounter,
}

enum Attempt {
    Done(Result<ProbabilityVector, OracleError>),
    Transient(OracleError),
}

impl RemoteOracle {
    pub fn new(config: RemoteOracleConfig) -> Result<Self, OracleError> {
        if !(config.endpoint.starts_with("http://") || config.endpoint.starts_with("https://")) {
            return Err(OracleError::Config(format!(
                "endpoint must be an http(s) URL, got {:?}",
                config.endpoint
            )));
        }
        if config.max_in_flight == 0 {
            return Err(OracleError::Config(
                "max_in_flight must be at least 1".into(),
            ));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let url = format!("{}/v1/predict", config.endpoint.trim_end_matches('/'));
        Ok(Self {
            gate: Gate::new(config.max_in_flight),
            config,
            url,
            agent,
            stats: StatsCounter::default(),
        })
    }

    pub fn config(&self) -> &RemoteOracleConfig {
        &self.config
    }

    pub fn stats(&self) -> OracleStats {
        self.stats.snapshot()
    }

    fn attempt(&self, body: &str, attempt_no: u32) -> Attempt {
        let mut req = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json");
        if let Some(token) = &self.config.bearer_token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = match req.send(body) {
            Ok(resp) => resp,
            Err(ureq::Error::Timeout(_)) => {
                return Attempt::Transient(OracleError::Timeout {
                    attempts: attempt_no,
                })
            }
            Err(e) => {
                return Attempt::Transient(OracleError::Transport {
                    attempts: attempt_no,
                    message: e.to_string(),
                })
            }
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => {
                return Attempt::Transient(OracleError::Timeout {
                    attempts: attempt_no,
                })
            }
            Err(e) => return Attempt::Done(Err(OracleError::Malformed(e.to_string()))),
        };
        if status != 200 {
            let err = OracleError::Status { status, body: text };
            return if status >= 500 || status == 429 {
                Attempt::Transient(err)
            } else {
                Attempt::Done(Err(err))
            };
        }
        let parsed: WireResponse = match serde_json::from_str(&text) {
            Ok(p) => p,
            Err(e) => return Attempt::Done(Err(OracleError::Malformed(e.to_string()))),
        };
        Attempt::Done(ProbabilityVector::new(parsed.probabilities, parsed.labels))
    }
}

impl Oracle for RemoteOracle {
    fn predict(&self, image: &ImageTensor) -> Result<ProbabilityVector, OracleError> {
        self.stats.record_call();
        check_shape(self.config.input_shape, image)?;
        let body = serde_json::to_string(&WireRequest::from_image(image))
            .map_err(|e| OracleError::Malformed(e.to_string()))?;
        let _slot = self.gate.enter();
        let mut delay = self.config.backoff;
        let mut attempt_no = 1;
        loop {
            let start = Instant::now();
            let outcome = self.attempt(&body, attempt_no);
            let ok = matches!(outcome, Attempt::Done(Ok(_)));
            self.stats.record_attempt(ok, start.elapsed());
            match outcome {
                Attempt::Done(result) => return result,
                Attempt::Transient(err) if attempt_no > self.config.retries => return Err(err),
                Attempt::Transient(err) => {
                    tracing::debug!(attempt = attempt_no, error = %err, "retrying oracle request");
                    thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                    attempt_no += 1;
                }
            }
        }
    }

    fn input_shape(&self) -> Option<(usize, usize)> {
        self.config.input_shape
    }
}
