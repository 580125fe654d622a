use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::backend::{Backend, BackendConfig, BackendError, QueryRequest};
use super::journal::{compact, load_journal, CacheKey, Journal, JournalError};
use super::{build_prompt, digest, parse_cell, ParseFailure, ParseResult, PromptOptions};
use crate::corpus::LocalizationTask;
use crate::scorer::OverlapGrid;

const MAX_BACKOFF: Duration = Duration::from_secs(60);

/// A task together with its rendered grid image.
#[derive(Debug, Clone)]
pub struct QueryJob {
    pub task: LocalizationTask,
    pub image_png: Arc<[u8]>,
    pub image_hash: String,
    pub overlap: Option<OverlapGrid>,
}

impl QueryJob {
    pub fn new(task: LocalizationTask, image_png: Arc<[u8]>, overlap: Option<OverlapGrid>) -> Self {
        let image_hash = digest(&image_png);
        Self::with_hash(task, image_png, image_hash, overlap)
    }

    /// For callers that already hashed a shared image.
    pub fn with_hash(
        task: LocalizationTask,
        image_png: Arc<[u8]>,
        image_hash: String,
        overlap: Option<OverlapGrid>,
    ) -> Self {
        Self {
            task,
            image_png,
            image_hash,
            overlap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub task: LocalizationTask,
    pub backend_id: String,
    pub prompt_hash: String,
    pub image_hash: String,
    pub raw_response: String,
    pub received_at: DateTime<Utc>,
    pub attempts: u32,
    pub parse_result: ParseResult,
    #[serde(default)]
    pub ambiguous: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl QueryRecord {
    pub fn key(&self) -> CacheKey {
        (
            self.backend_id.clone(),
            self.image_hash.clone(),
            self.prompt_hash.clone(),
        )
    }

    pub fn is_transport_failure(&self) -> bool {
        self.parse_result == ParseResult::Failure(ParseFailure::Transport)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub tasks: usize,
    pub cached: usize,
    /// Tasks dispatched in this run.
    pub sent: usize,
    /// Backend calls including retries.
    pub requests: usize,
    pub transport_failures: usize,
}

#[derive(Debug)]
pub struct RunOutput {
    /// One record per job, in job order.
    pub records: Vec<QueryRecord>,
    pub stats: RunStats,
}

#[derive(Debug, thiserror::Error)]
pub enum QueryError {
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("backend {backend}: {message} ({completed} tasks completed before the abort are kept in the journal)")]
    Auth {
        backend: String,
        message: String,
        completed: usize,
        stats: RunStats,
    },
    #[error("backend {backend}: {message}")]
    Config { backend: String, message: String },
}

enum Outcome {
    Done(QueryRecord),
    Auth(String),
}

struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn wait(&self) {
        if self.interval.is_zero() {
            return;
        }
        let now = Instant::now();
        let start = {
            let mut next = self.next.lock().expect("limiter lock");
            let start = next.map_or(now, |n| n.max(now));
            *next = Some(start + self.interval);
            start
        };
        if start > now {
            std::thread::sleep(start - now);
        }
    }
}

/// Sends every job whose cache key is not already answered, appending each
/// completion to the journal at `cache_path` as it arrives. Records that
/// only hold a transport failure are sent again.
pub fn run_queries(
    jobs: &[QueryJob],
    backend: &dyn Backend,
    cfg: &BackendConfig,
    prompt_opts: &PromptOptions,
    cache_path: &Path,
) -> Result<RunOutput, QueryError> {
    cfg.validate().map_err(|message| QueryError::Config {
        backend: cfg.id.clone(),
        message,
    })?;
    let mut cache = load_journal(cache_path)?;
    let mut journal = Journal::open(cache_path)?;

    let prompts: Vec<_> = jobs
        .iter()
        .map(|j| build_prompt(&j.task, Arc::clone(&j.image_png), prompt_opts))
        .collect();
    let keys: Vec<CacheKey> = jobs
        .iter()
        .zip(&prompts)
        .map(|(j, p)| (cfg.id.clone(), j.image_hash.clone(), p.prompt_hash()))
        .collect();

    let mut stats = RunStats {
        tasks: jobs.len(),
        ..RunStats::default()
    };
    let mut pending: Vec<usize> = Vec::new();
    let mut queued: HashMap<&CacheKey, ()> = HashMap::new();
    for (i, key) in keys.iter().enumerate() {
        match cache.get(key) {
            Some(rec) if !rec.is_transport_failure() => stats.cached += 1,
            _ => {
                if queued.insert(key, ()).is_none() {
                    pending.push(i);
                }
            }
        }
    }
    for &i in &pending {
        if backend.needs_overlap() && jobs[i].overlap.is_none() {
            return Err(QueryError::Config {
                backend: cfg.id.clone(),
                message: format!(
                    "task {} / {} has no overlap grid",
                    jobs[i].task.image_id, jobs[i].task.pathology
                ),
            });
        }
    }

    let limiter = RateLimiter {
        interval: Duration::from_millis(cfg.min_request_interval_ms),
        next: Mutex::new(None),
    };
    let abort = AtomicBool::new(false);
    let cursor = AtomicUsize::new(0);
    let requests = AtomicUsize::new(0);
    let workers = cfg.max_in_flight.min(pending.len());
    let mut auth_failure: Option<String> = None;
    let mut write_failure: Option<JournalError> = None;

    std::thread::scope(|s| {
        let (tx, rx) = mpsc::channel::<Outcome>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (pending, prompts, keys) = (&pending, &prompts, &keys);
            let (abort, cursor, requests, limiter) = (&abort, &cursor, &requests, &limiter);
            s.spawn(move || loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let Some(&i) = pending.get(cursor.fetch_add(1, Ordering::SeqCst)) else {
                    break;
                };
                let job = &jobs[i];
                let req = QueryRequest {
                    task: &job.task,
                    prompt: &prompts[i],
                    overlap: job.overlap.as_ref(),
                };
                let mut attempts = 0u32;
                let result = loop {
                    limiter.wait();
                    attempts += 1;
                    requests.fetch_add(1, Ordering::SeqCst);
                    match backend.query(&req) {
                        Err(BackendError::Transient(m)) if attempts <= cfg.max_retries => {
                            log::debug!("{}: retrying {} after: {m}", cfg.id, job.task.image_id);
                            let delay = Duration::from_millis(cfg.retry_base_delay_ms)
                                .saturating_mul(1u32 << (attempts - 1).min(16))
                                .min(MAX_BACKOFF);
                            std::thread::sleep(delay);
                        }
                        other => break other,
                    }
                };
                let (raw, parsed, error) = match result {
                    Ok(text) => {
                        let p = parse_cell(&text, &job.task.grid);
                        (text, p, None)
                    }
                    Err(BackendError::Auth(m)) => {
                        abort.store(true, Ordering::SeqCst);
                        let _ = tx.send(Outcome::Auth(m));
                        break;
                    }
                    Err(e) => (
                        String::new(),
                        super::ParsedCell {
                            result: ParseResult::Failure(ParseFailure::Transport),
                            ambiguous: false,
                        },
                        Some(e.to_string()),
                    ),
                };
                let (backend_id, image_hash, prompt_hash) = keys[i].clone();
                let rec = QueryRecord {
                    task: job.task.clone(),
                    backend_id,
                    prompt_hash,
                    image_hash,
                    raw_response: raw,
                    received_at: Utc::now(),
                    attempts,
                    parse_result: parsed.result,
                    ambiguous: parsed.ambiguous,
                    error,
                };
                if tx.send(Outcome::Done(rec)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for outcome in rx {
            match outcome {
                Outcome::Done(rec) => {
                    if write_failure.is_some() {
                        continue;
                    }
                    if let Err(e) = journal.append(&rec) {
                        abort.store(true, Ordering::SeqCst);
                        write_failure = Some(e);
                        continue;
                    }
                    stats.sent += 1;
                    if rec.is_transport_failure() {
                        stats.transport_failures += 1;
                    }
                    cache.insert(rec.key(), rec);
                }
                Outcome::Auth(m) => {
                    auth_failure.get_or_insert(m);
                }
            }
        }
    });
    stats.requests = requests.load(Ordering::SeqCst);
    drop(journal);

    if let Some(e) = write_failure {
        return Err(e.into());
    }
    if stats.sent > 0 {
        compact(cache_path, &cache)?;
    }
    if let Some(message) = auth_failure {
        return Err(QueryError::Auth {
            backend: cfg.id.clone(),
            message,
            completed: stats.sent,
            stats,
        });
    }

    let records = jobs
        .iter()
        .zip(&keys)
        .map(|(job, key)| {
            let mut rec = cache[key].clone();
            rec.task = job.task.clone();
            rec
        })
        .collect();
    Ok(RunOutput { records, stats })
}
