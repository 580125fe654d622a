//! The `report` stage: tables, review worksheets and heatmaps.

use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use rand::RngCore;
use serde::Serialize;

use gridloc_core::canvas::{read_canonical, CanonicalImage};
use gridloc_core::corpus::Pathology;
use gridloc_core::report::{
    average_image, emit_tables, ground_truth_heatmap, macro_row, prediction_heatmap, reference_values,
    render_heatmap_overlay, sensitivity_rows, CellCountGrid, ErrorShareRow, EvalReport, HitRateRow,
};
use gridloc_core::rng;
use gridloc_core::scorer::{
    ingest_review, read_worksheet, sample_for_review, write_worksheet, ErrorCategory, ReviewRow, UnparseablePolicy,
    Verdict,
};
use gridloc_core::stats::{bootstrap_replicate_means, population_std, StatsConfig};

use crate::config::RunConfig;
use crate::context::{grid_dir_name, image_file_name, lane_records, write_if_changed, Context, GridLayout};
use crate::stages::{read_outcomes, read_summary, ScoredTask};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub files: usize,
    pub report: EvalReport,
}

fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let bytes: Vec<&[u8]> = parts.iter().map(|p| p.as_bytes()).collect();
    rng::keyed(seed, &bytes).next_u64()
}

pub fn cmd_report(cfg: &RunConfig) -> Result<ReportSummary> {
    let ctx = Context::load(cfg)?;
    report_with(cfg, &ctx)
}

pub(crate) fn report_with(cfg: &RunConfig, ctx: &Context) -> Result<ReportSummary> {
    let dir = cfg.report_dir();
    let mut files = 0usize;
    let mut report = EvalReport {
        reference: reference_values(),
        ..EvalReport::default()
    };
    let seed = cfg.stats_seed();

    for (gi, layout) in ctx.layouts.iter().enumerate() {
        let grid = grid_dir_name(&layout.spec);
        for b in &cfg.backends {
            let summary = read_summary(cfg, &b.id, &grid)?;
            let outcomes = read_outcomes(cfg, &b.id, &grid)?;
            let reviewed = match &cfg.review.completed_dir {
                Some(d) => {
                    let path = d.join(&b.id).join(format!("{grid}.csv"));
                    if path.is_file() {
                        Some(ingest_review(&read_worksheet(&path)?).with_context(|| path.display().to_string())?)
                    } else {
                        None
                    }
                }
                None => None,
            };

            let mut rows = Vec::new();
            let mut replicates: Vec<Vec<f64>> = Vec::new();
            let mut worksheet: Vec<ReviewRow> = Vec::new();
            for ps in &summary.pathologies {
                let p = ps.pathology;
                let of_p: Vec<&ScoredTask> = outcomes.iter().filter(|o| o.pathology == p).collect();
                let hits: Vec<bool> = of_p
                    .iter()
                    .filter(|o| {
                        cfg.scoring.unparseable_policy == UnparseablePolicy::CountAsMiss
                            || o.verdict != Verdict::Unparseable
                    })
                    .map(|o| o.verdict.is_hit())
                    .collect();
                let stats_cfg = StatsConfig {
                    replicates: cfg.stats.replicates,
                    seed: derive_seed(seed, &["bootstrap", &b.id, &grid, p.slug()]),
                };
                let reps = bootstrap_replicate_means(&hits, &stats_cfg).ok();
                let rate = match cfg.scoring.unparseable_policy {
                    UnparseablePolicy::CountAsMiss => Some(ps.rate_count_as_miss),
                    UnparseablePolicy::Exclude => ps.rate_exclude,
                };
                rows.push(HitRateRow {
                    backend: b.id.clone(),
                    grid: grid.clone(),
                    pathology: p.display_name().into(),
                    n: ps.n,
                    n_unparseable: ps.n_unparseable,
                    rate,
                    bootstrap_std: reps.as_deref().map(population_std),
                    random_baseline: ps.random_baseline,
                    rate_count_as_miss: ps.rate_count_as_miss,
                    rate_exclude: ps.rate_exclude,
                });
                if let Some(r) = reps {
                    replicates.push(r);
                }

                let mut breakdown = ps.breakdown;
                let mut extrapolated = false;
                if let Some(counts) = reviewed.as_ref().and_then(|m| m.get(&(b.id.clone(), grid.clone(), p))) {
                    let pending = breakdown.needs_review;
                    breakdown.apply_review(counts);
                    extrapolated = pending > 0.0 && breakdown.needs_review == 0.0;
                }
                let shares = breakdown.shares();
                let share = |k: usize| shares.map(|s| s[k]);
                report.error_shares.push(ErrorShareRow {
                    backend: b.id.clone(),
                    grid: grid.clone(),
                    pathology: p.display_name().into(),
                    n: breakdown.total().round() as usize,
                    full_hit: breakdown.full_hit,
                    partial_hit: breakdown.partial_hit,
                    position_error: breakdown.position_error,
                    anatomy_error: breakdown.anatomy_error,
                    needs_review: breakdown.needs_review,
                    fallback_hits: breakdown.fallback_hits,
                    share_full_hit: share(0),
                    share_partial_hit: share(1),
                    share_position_error: share(2),
                    share_anatomy_error: share(3),
                    share_needs_review: share(4),
                    extrapolated,
                });

                let misses: Vec<ReviewRow> = of_p
                    .iter()
                    .filter(|o| o.category == Some(ErrorCategory::NeedsReview))
                    .map(|o| ReviewRow {
                        backend_id: b.id.clone(),
                        grid: grid.clone(),
                        image_id: o.image_id.clone(),
                        pathology: p,
                        predicted_cell: o.predicted.clone().unwrap_or_default(),
                        rendered_image: format!("prepared/{grid}/{}", image_file_name(&o.image_id)),
                        category: String::new(),
                    })
                    .collect();
                let review_seed = derive_seed(cfg.seed, &["review", &b.id, &grid, p.slug()]);
                worksheet.extend(sample_for_review(&misses, cfg.review.cap, review_seed));
            }

            let macro_std = (replicates.len() == rows.len() && !replicates.is_empty()).then(|| {
                let k = replicates.len() as f64;
                let per_rep: Vec<f64> = (0..cfg.stats.replicates)
                    .map(|i| replicates.iter().map(|r| r[i]).sum::<f64>() / k)
                    .collect();
                population_std(&per_rep)
            });
            if let Some(m) = macro_row(&rows, macro_std) {
                report.hit_rates.extend(rows);
                report.hit_rates.push(m);
            }

            write_worksheet(
                &dir.join("worksheets").join(&b.id).join(format!("{grid}.csv")),
                &worksheet,
            )?;
            files += 1;
        }
        files += render_heatmaps(cfg, ctx, layout, &dir.join("heatmaps"), gi == 0)?;
    }

    report.sensitivity = sensitivity_rows(&report.hit_rates);
    files += emit_tables(&report, &dir)?.len();
    log::info!("report: {files} files under {}", dir.display());
    Ok(ReportSummary { files, report })
}

fn heatmap_path(root: &Path, who: &str, grid: &str, primary: bool, name: &str) -> PathBuf {
    let base = root.join(who);
    let base = if primary { base } else { base.join(grid) };
    base.join(format!("{name}.png"))
}

fn render_heatmaps(cfg: &RunConfig, ctx: &Context, layout: &GridLayout, root: &Path, primary: bool) -> Result<usize> {
    let grid = grid_dir_name(&layout.spec);
    let side = layout.spec.canvas_side();
    let frontal_only = cfg.report.frontal_only;
    let keep = |i: usize| {
        let t = &layout.tasks[i];
        let record = ctx.set.record(&t.image_id).expect("record exists");
        (!frontal_only || t.view.is_frontal()) && cfg.report.heatmap_split.is_none_or(|s| s == record.split)
    };
    let kept: Vec<usize> = (0..layout.tasks.len()).filter(|&i| keep(i)).collect();

    let mut ids: Vec<&str> = kept.iter().map(|&i| layout.tasks[i].image_id.as_str()).collect();
    ids.sort();
    ids.dedup();
    let images = ids
        .iter()
        .map(|id| {
            let r = ctx.set.record(id).expect("record exists");
            read_canonical(&r.image_path, side).with_context(|| format!("image {id}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let background = if images.is_empty() {
        CanonicalImage::uniform_gray(side, 0)
    } else {
        average_image(&images)?
    };
    let mut files = 0;
    let avg_png = gridloc_core::canvas::encode_png(&background.to_rgb());
    let avg_path = if primary {
        root.join("average.png")
    } else {
        root.join(&grid).join("average.png")
    };
    write_if_changed(&avg_path, &avg_png)?;
    files += 1;

    let mut pathologies: Vec<Pathology> = layout.tasks.iter().map(|t| t.pathology).collect();
    pathologies.sort();
    pathologies.dedup();

    for &p in &pathologies {
        let grids: Vec<_> = kept
            .iter()
            .filter(|&&i| layout.tasks[i].pathology == p)
            .map(|&i| layout.overlaps[i].clone())
            .collect();
        let gt = if grids.is_empty() {
            CellCountGrid::zeros(layout.spec)
        } else {
            ground_truth_heatmap(&grids, &cfg.scoring, cfg.report.ground_truth_mode)?
        };
        let png = render_heatmap_overlay(&gt, &background, &cfg.report.style)?;
        write_if_changed(&heatmap_path(root, "ground_truth", &grid, primary, p.slug()), &png)?;
        files += 1;
    }

    for b in &cfg.backends {
        let records = lane_records(cfg, &b.id, layout)?;
        for &p in &pathologies {
            let selected: Vec<_> = records
                .iter()
                .filter(|r| r.task.pathology == p)
                .filter(|r| {
                    cfg.report
                        .heatmap_split
                        .is_none_or(|s| ctx.set.record(&r.task.image_id).is_some_and(|rec| rec.split == s))
                })
                .cloned()
                .collect();
            let h = prediction_heatmap(&selected, layout.spec, frontal_only)?;
            let png = render_heatmap_overlay(&h.grid, &background, &cfg.report.style)?;
            write_if_changed(&heatmap_path(root, &b.id, &grid, primary, p.slug()), &png)?;
            files += 1;
        }
    }
    Ok(files)
}
