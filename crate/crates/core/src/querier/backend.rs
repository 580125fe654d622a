use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::http::HttpChatBackend;
use super::PromptBundle;
use crate::canvas::{GridCell, GridSpec};
use crate::corpus::LocalizationTask;
use crate::rng::{self, HarnessRng};
use crate::scorer::OverlapGrid;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// Worth retrying: timeouts, connection resets, 429 and 5xx.
    #[error("transient backend failure: {0}")]
    Transient(String),
    /// Credentials missing or rejected. Aborts the whole lane.
    #[error("backend authentication failed: {0}")]
    Auth(String),
    #[error("backend rejected the request: {0}")]
    Permanent(String),
}

pub struct QueryRequest<'a> {
    pub task: &'a LocalizationTask,
    pub prompt: &'a PromptBundle,
    /// Ground-truth coverage, only handed to simulated oracles.
    pub overlap: Option<&'a OverlapGrid>,
}

pub trait Backend: Send + Sync {
    fn query(&self, req: &QueryRequest<'_>) -> Result<String, BackendError>;

    /// Whether the backend reads ground truth (and so needs overlap grids).
    fn needs_overlap(&self) -> bool {
        false
    }

    /// Requests received so far, for backends that count them.
    fn requests_seen(&self) -> Option<usize> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningEffort {
    Minimal,
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat {
        endpoint: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default)]
        temperature: Option<f64>,
        #[serde(default)]
        reasoning_effort: Option<ReasoningEffort>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
    Simulated {
        simulator: SimulatorSpec,
    },
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub id: String,
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub min_request_interval_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_base_delay")]
    pub retry_base_delay_ms: u64,
}

fn default_retries() -> u32 {
    3
}

fn default_in_flight() -> usize {
    1
}

fn default_base_delay() -> u64 {
    500
}

impl BackendConfig {
    pub fn simulated(id: impl Into<String>, simulator: SimulatorSpec) -> Self {
        Self {
            id: id.into(),
            kind: BackendKind::Simulated { simulator },
            max_retries: default_retries(),
            min_request_interval_ms: 0,
            max_in_flight: default_in_flight(),
            retry_base_delay_ms: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return Err(format!(
                "backend id {:?} must be non-empty and use only letters, digits, '-', '_' or '.'",
                self.id
            ));
        }
        if self.max_in_flight < 1 {
            return Err(format!("backend {}: max_in_flight must be at least 1", self.id));
        }
        match &self.kind {
            BackendKind::HttpChat { temperature, .. } => {
                if let Some(t) = temperature {
                    if !(0.0..=2.0).contains(t) {
                        return Err(format!("backend {}: temperature {t} outside [0, 2]", self.id));
                    }
                }
            }
            BackendKind::Simulated { simulator } => {
                simulator.validate().map_err(|e| format!("backend {}: {e}", self.id))?
            }
        }
        Ok(())
    }

    pub fn is_http(&self) -> bool {
        matches!(self.kind, BackendKind::HttpChat { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SimulatorSpec {
    UniformRandom { seed: u64 },
    Oracle,
    NoisyOracle { p_correct: f64, seed: u64 },
    FixedCell { cell: String },
    Scripted { responses: Vec<ScriptedResponse> },
}

impl SimulatorSpec {
    fn validate(&self) -> Result<(), String> {
        match self {
            SimulatorSpec::NoisyOracle { p_correct, .. } if !(0.0..=1.0).contains(p_correct) => {
                Err(format!("p_correct {p_correct} outside [0, 1]"))
            }
            SimulatorSpec::Scripted { responses } if responses.is_empty() => {
                Err("scripted backend needs at least one response".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedFault {
    Transient,
    Auth,
    Permanent,
}

/// A canned reply: either literal text or an injected failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedResponse {
    Text(String),
    Fault { error: ScriptedFault },
}

/// Built-in predictors. None of them look at the image.
#[derive(Debug, Clone)]
pub struct Simulated {
    spec: SimulatorSpec,
    requests: Arc<AtomicUsize>,
}

impl Simulated {
    pub fn new(spec: SimulatorSpec) -> Self {
        Self {
            spec,
            requests: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Shared handle on the request counter.
    pub fn counter(&self) -> Arc<AtomicUsize> {
        Arc::clone(&self.requests)
    }

    /// The per-task stream behind the uniform and noisy predictors; the first
    /// draw is the one a query returns.
    pub fn task_stream(seed: u64, task: &LocalizationTask) -> HarnessRng {
        rng::keyed(
            seed,
            &[
                task.image_id.as_bytes(),
                task.pathology.slug().as_bytes(),
                task.grid.to_string().as_bytes(),
            ],
        )
    }

    pub fn uniform_draw(rng: &mut HarnessRng, spec: &GridSpec) -> GridCell {
        spec.cell_at_index(rng.random_range(0..spec.cell_count() as usize))
    }

    /// Oracle cell with probability `p_correct`, otherwise a uniformly chosen
    /// different cell.
    pub fn noisy_draw(rng: &mut HarnessRng, grid: &OverlapGrid, p_correct: f64) -> GridCell {
        let spec = grid.spec();
        let oracle = grid.best_cell();
        let n = spec.cell_count() as usize;
        if n == 1 || rng.random_bool(p_correct) {
            return oracle;
        }
        let mut i = rng.random_range(0..n - 1);
        if i >= spec.index_of(oracle) {
            i += 1;
        }
        spec.cell_at_index(i)
    }
}

fn label(spec: &GridSpec, cell: GridCell) -> String {
    spec.label_of(cell).expect("simulated cells are in range")
}

impl Backend for Simulated {
    fn query(&self, req: &QueryRequest<'_>) -> Result<String, BackendError> {
        let n = self.requests.fetch_add(1, Ordering::SeqCst);
        let spec = &req.task.grid;
        let overlap = || {
            req.overlap
                .ok_or_else(|| BackendError::Permanent("oracle predictor needs the task's overlap grid".into()))
        };
        match &self.spec {
            SimulatorSpec::UniformRandom { seed } => {
                let mut g = Self::task_stream(*seed, req.task);
                Ok(label(spec, Self::uniform_draw(&mut g, spec)))
            }
            SimulatorSpec::Oracle => Ok(label(spec, overlap()?.best_cell())),
            SimulatorSpec::NoisyOracle { p_correct, seed } => {
                let mut g = Self::task_stream(*seed, req.task);
                Ok(label(spec, Self::noisy_draw(&mut g, overlap()?, *p_correct)))
            }
            SimulatorSpec::FixedCell { cell } => Ok(cell.clone()),
            SimulatorSpec::Scripted { responses } => match &responses[n % responses.len()] {
                ScriptedResponse::Text(t) => Ok(t.clone()),
                ScriptedResponse::Fault { error } => {
                    let msg = format!("scripted fault at request {n}");
                    Err(match error {
                        ScriptedFault::Transient => BackendError::Transient(msg),
                        ScriptedFault::Auth => BackendError::Auth(msg),
                        ScriptedFault::Permanent => BackendError::Permanent(msg),
                    })
                }
            },
        }
    }

    fn needs_overlap(&self) -> bool {
        matches!(self.spec, SimulatorSpec::Oracle | SimulatorSpec::NoisyOracle { .. })
    }

    fn requests_seen(&self) -> Option<usize> {
        Some(self.requests.load(Ordering::SeqCst))
    }
}

pub fn build_backend(cfg: &BackendConfig) -> Result<Box<dyn Backend>, String> {
    cfg.validate()?;
    Ok(match &cfg.kind {
        BackendKind::Simulated { simulator } => Box::new(Simulated::new(simulator.clone())),
        BackendKind::HttpChat { .. } => Box::new(HttpChatBackend::new(cfg)?),
    })
}
