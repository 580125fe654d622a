//! The `prepare`, `run`, `score` and `simulate` stages.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::Arc;

use anyhow::{bail, Context as _, Result};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use gridloc_core::canvas::{read_canonical, render_grid, GridStyle};
use gridloc_core::corpus::synthetic::{self, SyntheticSpec};
use gridloc_core::corpus::{Pathology, Split, ViewPosition};
use gridloc_core::querier::{
    build_backend, digest, run_queries, template_digest, ParseFailure, ParseResult, QueryError, QueryJob, RunStats,
};
use gridloc_core::scorer::{
    categorize, hit_rate, judge, random_baseline, CategoryBreakdown, ErrorCategory, PlausibilityAtlas,
    UnparseablePolicy, Verdict,
};

use crate::config::{CorpusFormat, CorpusSection, RunConfig};
use crate::context::{
    grid_dir_name, image_file_name, journal_path, lane_records, write_if_changed, Context, PreparedImage,
    PreparedIndex, PREPARED_SCHEMA,
};

pub const RUN_MANIFEST_SCHEMA: &str = "gridloc.run_manifest.v1";
pub const OUTCOMES_SCHEMA: &str = "gridloc.outcomes.v1";
pub const SUMMARY_SCHEMA: &str = "gridloc.score_summary.v1";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PrepareSummary {
    pub rendered: usize,
    pub unchanged: usize,
}

/// Renders one gridded image per (image, grid). All pathologies of an image
/// share the file.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<PrepareSummary> {
    let ctx = Context::load(cfg)?;
    prepare_with(cfg, &ctx)
}

fn prepare_with(cfg: &RunConfig, ctx: &Context) -> Result<PrepareSummary> {
    let mut summary = PrepareSummary::default();
    let style = GridStyle::default();
    let prepared = cfg.prepared_dir();
    for layout in &ctx.layouts {
        let dir = prepared.join(grid_dir_name(&layout.spec));
        let mut ids: Vec<&str> = layout.tasks.iter().map(|t| t.image_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        let mut images = BTreeMap::new();
        let mut files_seen: HashMap<String, &str> = HashMap::new();
        for id in ids {
            let record = ctx.set.record(id).expect("tasks reference records");
            let canon =
                read_canonical(&record.image_path, layout.spec.canvas_side()).with_context(|| format!("image {id}"))?;
            let png = render_grid(&canon, &layout.spec, &style).with_context(|| format!("image {id}"))?;
            let file = image_file_name(id);
            if let Some(other) = files_seen.insert(file.clone(), id) {
                bail!("image ids {other:?} and {id:?} map to the same file name {file}");
            }
            if write_if_changed(&dir.join(&file), &png)? {
                summary.rendered += 1;
            } else {
                summary.unchanged += 1;
            }
            images.insert(
                id.to_string(),
                PreparedImage {
                    file,
                    sha256: digest(&png),
                },
            );
        }
        let index = PreparedIndex {
            schema: PREPARED_SCHEMA.into(),
            grid: layout.spec,
            images,
        };
        let mut text = serde_json::to_string_pretty(&index)?;
        text.push('\n');
        write_if_changed(&PreparedIndex::path(&prepared, &layout.spec), text.as_bytes())?;
    }
    log::info!(
        "prepare: {} rendered, {} unchanged",
        summary.rendered,
        summary.unchanged
    );
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LaneSummary {
    pub backend: String,
    /// Per-grid query statistics, for the grids completed.
    pub grids: BTreeMap<String, RunStats>,
    /// Requests counted by the backend itself, when it keeps a count.
    pub backend_requests_seen: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub lanes: Vec<LaneSummary>,
}

impl RunSummary {
    pub fn failed(&self) -> Vec<&LaneSummary> {
        self.lanes.iter().filter(|l| l.error.is_some()).collect()
    }

    pub fn lane(&self, backend: &str) -> Option<&LaneSummary> {
        self.lanes.iter().find(|l| l.backend == backend)
    }
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    schema: &'static str,
    tool_version: &'static str,
    started_at: DateTime<Utc>,
    finished_at: DateTime<Utc>,
    config: &'a RunConfig,
    corpus_manifest_sha256: &'a str,
    prompt_template_sha256: String,
    lanes: &'a [LaneSummary],
}

/// Queries every backend over every grid. Lanes run concurrently; a fatal
/// error in one lane is reported in its summary and leaves the others
/// running.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary> {
    let started_at = Utc::now();
    let ctx = Context::load(cfg)?;
    let prepared = cfg.prepared_dir();

    let mut grid_jobs: Vec<Vec<QueryJob>> = Vec::new();
    for layout in &ctx.layouts {
        let index = PreparedIndex::load(&prepared, &layout.spec)?;
        let mut pngs: HashMap<&str, (Arc<[u8]>, String)> = HashMap::new();
        let mut jobs = Vec::with_capacity(layout.tasks.len());
        for (task, overlap) in layout.tasks.iter().zip(&layout.overlaps) {
            let (png, hash) = match pngs.get(task.image_id.as_str()) {
                Some(v) => v.clone(),
                None => {
                    let png = index.read_png(&prepared, &task.image_id)?;
                    let hash = digest(&png);
                    if hash != index.entry(&task.image_id)?.sha256 {
                        bail!(
                            "prepared image for {} changed on disk; run `prepare` again",
                            task.image_id
                        );
                    }
                    pngs.insert(&task.image_id, (Arc::clone(&png), hash.clone()));
                    (png, hash)
                }
            };
            jobs.push(QueryJob::with_hash(task.clone(), png, hash, Some(overlap.clone())));
        }
        grid_jobs.push(jobs);
    }

    let lanes: Vec<LaneSummary> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .backends
            .iter()
            .map(|b| {
                let (ctx, grid_jobs) = (&ctx, &grid_jobs);
                s.spawn(move || run_lane(cfg, b, ctx, grid_jobs))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("lane thread panicked"))
            .collect()
    });

    let manifest = RunManifest {
        schema: RUN_MANIFEST_SCHEMA,
        tool_version: env!("CARGO_PKG_VERSION"),
        started_at,
        finished_at: Utc::now(),
        config: cfg,
        corpus_manifest_sha256: &ctx.corpus_digest,
        prompt_template_sha256: template_digest(),
        lanes: &lanes,
    };
    let path = cfg.out_dir.join("run_manifest.json");
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;

    for l in &lanes {
        match &l.error {
            Some(e) => log::error!("lane {}: {e}", l.backend),
            None => log::info!("lane {}: done", l.backend),
        }
    }
    Ok(RunSummary { lanes })
}

fn run_lane(
    cfg: &RunConfig,
    backend_cfg: &gridloc_core::querier::BackendConfig,
    ctx: &Context,
    grid_jobs: &[Vec<QueryJob>],
) -> LaneSummary {
    let mut summary = LaneSummary {
        backend: backend_cfg.id.clone(),
        grids: BTreeMap::new(),
        backend_requests_seen: None,
        error: None,
    };
    let backend = match build_backend(backend_cfg) {
        Ok(b) => b,
        Err(e) => {
            summary.error = Some(e);
            return summary;
        }
    };
    let cache = journal_path(cfg, &backend_cfg.id);
    for (layout, jobs) in ctx.layouts.iter().zip(grid_jobs) {
        let stripped;
        let jobs = if backend.needs_overlap() {
            jobs
        } else {
            stripped = jobs
                .iter()
                .map(|j| QueryJob {
                    overlap: None,
                    ..j.clone()
                })
                .collect::<Vec<_>>();
            &stripped
        };
        match run_queries(jobs, backend.as_ref(), backend_cfg, &cfg.prompt, &cache) {
            Ok(out) => {
                summary.grids.insert(grid_dir_name(&layout.spec), out.stats);
            }
            Err(e) => {
                if let QueryError::Auth { stats, .. } = &e {
                    summary.grids.insert(grid_dir_name(&layout.spec), *stats);
                }
                summary.error = Some(e.to_string());
                break;
            }
        }
    }
    summary.backend_requests_seen = backend.requests_seen();
    summary
}

/// One scored task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTask {
    pub image_id: String,
    pub pathology: Pathology,
    pub view: ViewPosition,
    pub split: Split,
    pub predicted: Option<String>,
    pub parse_failure: Option<ParseFailure>,
    pub ambiguous: bool,
    pub verdict: Verdict,
    pub cell_fraction: f64,
    pub fallback_active: bool,
    /// Absent for lateral views and unparseable responses.
    pub category: Option<ErrorCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathologySummary {
    pub pathology: Pathology,
    pub n: usize,
    pub n_unparseable: usize,
    pub hits: usize,
    pub rate_count_as_miss: f64,
    pub rate_exclude: Option<f64>,
    pub random_baseline: f64,
    pub breakdown: CategoryBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub schema: String,
    pub backend: String,
    pub grid: String,
    pub pathologies: Vec<PathologySummary>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScoreRunSummary {
    pub lanes: Vec<(String, String)>,
}

pub fn load_atlas(cfg: &RunConfig, side: u32) -> Result<Option<PlausibilityAtlas>> {
    cfg.review
        .atlas_dir
        .as_ref()
        .map(|d| PlausibilityAtlas::load_dir(d, side).with_context(|| format!("loading atlas {}", d.display())))
        .transpose()
}

/// Judges every cached response. Reads only the cache and the corpus.
pub fn cmd_score(cfg: &RunConfig) -> Result<ScoreRunSummary> {
    let ctx = Context::load(cfg)?;
    score_with(cfg, &ctx)
}

fn score_with(cfg: &RunConfig, ctx: &Context) -> Result<ScoreRunSummary> {
    let mut out = ScoreRunSummary::default();
    for layout in &ctx.layouts {
        let atlas = load_atlas(cfg, layout.spec.canvas_side())?;
        for b in &cfg.backends {
            let records = lane_records(cfg, &b.id, layout)?;
            let mut scored = Vec::with_capacity(records.len());
            let mut by_pathology: BTreeMap<Pathology, Vec<usize>> = BTreeMap::new();
            for (i, (rec, overlap)) in records.iter().zip(&layout.overlaps).enumerate() {
                let task = &rec.task;
                let cell = rec.parse_result.cell();
                let outcome = judge(cell, overlap, &cfg.scoring);
                let category = match cell {
                    Some(c) if task.view.is_frontal() => Some(categorize(
                        &outcome,
                        c,
                        layout.spec,
                        atlas.as_ref(),
                        task.pathology,
                        task.view,
                    )?),
                    _ => None,
                };
                let split = ctx.set.record(&task.image_id).expect("record exists").split;
                scored.push(ScoredTask {
                    image_id: task.image_id.clone(),
                    pathology: task.pathology,
                    view: task.view,
                    split,
                    predicted: cell.map(|c| layout.spec.label_of(c).expect("parsed cells are in range")),
                    parse_failure: match rec.parse_result {
                        ParseResult::Failure(f) => Some(f),
                        ParseResult::Cell(_) => None,
                    },
                    ambiguous: rec.ambiguous,
                    verdict: outcome.verdict,
                    cell_fraction: outcome.cell_fraction,
                    fallback_active: outcome.fallback_active,
                    category,
                });
                by_pathology.entry(task.pathology).or_default().push(i);
            }

            let mut pathologies = Vec::new();
            for (p, idx) in &by_pathology {
                let outcomes: Vec<_> = idx
                    .iter()
                    .map(|&i| gridloc_core::scorer::HitOutcome {
                        verdict: scored[i].verdict,
                        cell_fraction: scored[i].cell_fraction,
                        fallback_active: scored[i].fallback_active,
                    })
                    .collect();
                let grids: Vec<_> = idx.iter().map(|&i| layout.overlaps[i].clone()).collect();
                let mut breakdown = CategoryBreakdown::default();
                for &i in idx {
                    if let Some(c) = scored[i].category {
                        breakdown.add(c);
                        if scored[i].verdict == Verdict::FallbackHit {
                            breakdown.fallback_hits += 1;
                        }
                    }
                }
                pathologies.push(PathologySummary {
                    pathology: *p,
                    n: idx.len(),
                    n_unparseable: outcomes.iter().filter(|o| o.verdict == Verdict::Unparseable).count(),
                    hits: outcomes.iter().filter(|o| o.verdict.is_hit()).count(),
                    rate_count_as_miss: hit_rate(&outcomes, UnparseablePolicy::CountAsMiss)?,
                    rate_exclude: hit_rate(&outcomes, UnparseablePolicy::Exclude).ok(),
                    random_baseline: random_baseline(&grids, &cfg.scoring)?,
                    breakdown,
                });
            }

            let grid = grid_dir_name(&layout.spec);
            let dir = cfg.scores_dir().join(&b.id).join(&grid);
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let mut lines = Vec::new();
            writeln!(lines, "{{\"schema\":\"{OUTCOMES_SCHEMA}\"}}")?;
            for s in &scored {
                serde_json::to_writer(&mut lines, s)?;
                lines.push(b'\n');
            }
            std::fs::write(dir.join("outcomes.jsonl"), lines)?;
            let summary = ScoreSummary {
                schema: SUMMARY_SCHEMA.into(),
                backend: b.id.clone(),
                grid: grid.clone(),
                pathologies,
            };
            let mut text = serde_json::to_string_pretty(&summary)?;
            text.push('\n');
            std::fs::write(dir.join("summary.json"), text)?;
            out.lanes.push((b.id.clone(), grid));
        }
    }
    Ok(out)
}

pub fn read_outcomes(cfg: &RunConfig, backend: &str, grid: &str) -> Result<Vec<ScoredTask>> {
    let path = cfg.scores_dir().join(backend).join(grid).join("outcomes.jsonl");
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("missing {}; run `score` first", path.display()))?;
    let mut lines = text.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().unwrap_or("{}"))?;
    if header["schema"] != OUTCOMES_SCHEMA {
        bail!("{} has an unknown schema", path.display());
    }
    lines
        .map(|l| serde_json::from_str(l).with_context(|| format!("parsing {}", path.display())))
        .collect()
}

pub fn read_summary(cfg: &RunConfig, backend: &str, grid: &str) -> Result<ScoreSummary> {
    let path = cfg.scores_dir().join(backend).join(grid).join("summary.json");
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("missing {}; run `score` first", path.display()))?;
    let s: ScoreSummary = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if s.schema != SUMMARY_SCHEMA {
        bail!("{} has an unknown schema", path.display());
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub prepare: PrepareSummary,
    pub run: RunSummary,
    pub report: crate::reporting::ReportSummary,
}

/// Generates a synthetic corpus (unless the config names one) and runs every
/// stage with simulated backends only.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateSummary> {
    if let Some(b) = cfg.backends.iter().find(|b| b.is_http()) {
        bail!(
            "simulate only runs simulated backends; {} is an http_chat backend",
            b.id
        );
    }
    let mut cfg = cfg.clone();
    if cfg.corpus.is_none() {
        let spec = cfg.synthetic.clone().unwrap_or_else(|| SyntheticSpec {
            seed: cfg.seed,
            ..SyntheticSpec::default()
        });
        let dir = cfg.out_dir.join("synthetic");
        let generated = synthetic::generate(&spec, &dir, cfg.canvas_side)?;
        cfg.corpus = Some(CorpusSection {
            format: CorpusFormat::SyntheticIndex,
            manifest: generated.index_path,
            images_root: None,
            default_split: spec.split,
            split: None,
            view: None,
            pathologies: None,
        });
        if cfg.review.atlas_dir.is_none() {
            cfg.review.atlas_dir = Some(generated.atlas_dir);
        }
    }
    let ctx = Context::load(&cfg)?;
    let prepare = prepare_with(&cfg, &ctx)?;
    let run = cmd_run(&cfg)?;
    if let Some(l) = run.failed().first() {
        bail!("backend {} failed: {}", l.backend, l.error.as_deref().unwrap_or(""));
    }
    score_with(&cfg, &ctx)?;
    let report = crate::reporting::report_with(&cfg, &ctx)?;
    Ok(SimulateSummary { prepare, run, report })
}
