//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so the summary is always
//! printed; the process exits nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{ensure, Context as _, Result};
use rand::Rng;

use gridloc::config::{CorpusFormat, CorpusSection, Overrides, RunConfig};
use gridloc::context::{journal_path, Context};
use gridloc::stages::{cmd_prepare, cmd_run, cmd_simulate, read_outcomes, SimulateSummary};
use gridloc_core::canvas::{transform_mask, GridCell, GridSpec};
use gridloc_core::corpus::synthetic::{self, SyntheticSpec};
use gridloc_core::corpus::{decode_rle, encode_rle, BinaryMask, Pathology, RleMask, Split};
use gridloc_core::querier::{load_journal, Simulated};
use gridloc_core::report::{HitRateRow, MACRO_LABEL};
use gridloc_core::rng;
use gridloc_core::scorer::{
    extrapolate_proportions, ingest_review, judge, overlap_fractions, read_worksheet, sample_for_review,
    write_worksheet, CategoryBreakdown, ErrorCategory, ReviewRow, ScoringConfig, Verdict,
};
use gridloc_core::stats::{bootstrap_std, StatsConfig};

type Check = fn() -> Result<String>;

fn main() {
    let criteria: [(&str, Check); 11] = [
        ("grid geometry and tiling", grid_geometry),
        ("hit rule matches per-pixel oracle", hit_rule_oracle),
        ("oracle backend scores 1.0", oracle_backend),
        (
            "uniform backend tracks the analytic baseline",
            random_baseline_consistency,
        ),
        ("bootstrap std", bootstrap_correctness),
        ("RLE round trip", rle_round_trip),
        ("error taxonomy accounting", taxonomy_accounting),
        ("review cap and extrapolation", review_cap),
        ("pipeline determinism", pipeline_determinism),
        ("resume issues only missing requests", resume_semantics),
        ("reference constants", reference_constants),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(anyhow::anyhow!("panicked: {}", panic_text(&p))));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name} ({detail}) [{secs:.2}s]", i + 1),
            Err(e) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {e:#} [{secs:.2}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<()> {
    ensure!(elapsed < limit, "{what} took {elapsed:?}, limit {limit:?}");
    Ok(())
}

// --- helpers ---------------------------------------------------------------

fn load_cfg(dir: &Path, toml: &str) -> Result<RunConfig> {
    let path = dir.join("config.toml");
    std::fs::write(&path, toml)?;
    RunConfig::load(&path, &Overrides::default())
}

fn simulate(dir: &Path, toml: &str) -> Result<(RunConfig, SimulateSummary)> {
    let cfg = load_cfg(dir, toml)?;
    let summary = cmd_simulate(&cfg)?;
    Ok((cfg, summary))
}

/// The config `simulate` used internally, with the generated corpus named.
fn with_generated_corpus(cfg: &RunConfig) -> RunConfig {
    let mut cfg = cfg.clone();
    let dir = cfg.out_dir.join("synthetic");
    cfg.corpus = Some(CorpusSection {
        format: CorpusFormat::SyntheticIndex,
        manifest: dir.join("index.json"),
        images_root: None,
        default_split: Split::Test,
        split: None,
        view: None,
        pathologies: None,
    });
    cfg.review.atlas_dir = Some(dir.join("atlas"));
    cfg
}

fn grid(n: u32) -> GridSpec {
    GridSpec::square(n).expect("valid grid")
}

/// Pixel bounds of row/column `i` of `n` on a `side` canvas, derived
/// independently of the geometry code.
fn band(i: u32, n: u32, side: u32) -> (u32, u32) {
    (i * side / n, (i + 1) * side / n)
}

fn random_mask<R: Rng>(rng: &mut R, side: u32) -> BinaryMask {
    let s = side as f64;
    match rng.random_range(0..4) {
        0 => {
            let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
            let (rx, ry) = (rng.random_range(1.0..s * 0.3), rng.random_range(1.0..s * 0.3));
            BinaryMask::from_fn(side, side, |x, y| {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                dx * dx + dy * dy <= 1.0
            })
        }
        1 => {
            let x0 = rng.random_range(0..side);
            let y0 = rng.random_range(0..side);
            let x1 = rng.random_range(x0..=side.min(x0 + side / 2));
            let y1 = rng.random_range(y0..=side.min(y0 + side / 2));
            BinaryMask::from_fn(side, side, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
        }
        2 => {
            // A few scattered pixels: no cell reaches the threshold.
            let mut m = BinaryMask::empty(side, side);
            for _ in 0..rng.random_range(1..12) {
                m.set(rng.random_range(0..side), rng.random_range(0..side), true);
            }
            m
        }
        _ => {
            let p = rng.random_range(0.05..0.95);
            let bits = (0..side * side).map(|_| rng.random_bool(p)).collect();
            BinaryMask::new(side, side, bits).expect("sized")
        }
    }
}

// --- criteria --------------------------------------------------------------

fn grid_geometry() -> Result<String> {
    let start = Instant::now();
    for (n, cell_px) in [(8u32, 32u32), (16, 16)] {
        let spec = grid(n);
        ensure!(spec.canvas_side() == 256, "default canvas is {}", spec.canvas_side());
        // Rect bounds are inclusive.
        let mut cover = vec![0u8; 256 * 256];
        for cell in spec.cells() {
            let r = spec.cell_rect(cell)?;
            ensure!(
                r.width() == cell_px && r.height() == cell_px,
                "{n}x{n} cell {cell:?} is {}x{}",
                r.width(),
                r.height()
            );
            for y in r.row_start..=r.row_end {
                for x in r.col_start..=r.col_end {
                    cover[(y * 256 + x) as usize] += 1;
                    ensure!(spec.cell_containing(x, y) == Some(cell), "pixel ({x},{y}) disagrees");
                }
            }
        }
        ensure!(cover.iter().all(|&c| c == 1), "{n}x{n} has gaps or overlaps");
    }
    within(start.elapsed(), Duration::from_secs(1), "tiling")?;
    Ok("8x8 -> 32px, 16x16 -> 16px, exact tiling".into())
}

fn hit_rule_oracle() -> Result<String> {
    let start = Instant::now();
    let cfg = ScoringConfig::default();
    let mut rng = rng::seeded(0xACCE);
    let mut checked = 0usize;
    let mut fallback_masks = 0usize;
    for m in 0..1000 {
        let n = if m % 2 == 0 { 8 } else { 16 };
        let spec = grid(n);
        let mask = loop {
            let m = random_mask(&mut rng, 256);
            if !m.is_empty() {
                break m;
            }
        };
        let overlap = overlap_fractions(&mask, spec, &cfg)?;

        let mut frac = BTreeMap::new();
        for row in 0..n {
            for col in 0..n {
                let (y0, y1) = band(row, n, 256);
                let (x0, x1) = band(col, n, 256);
                let mut inside = 0u64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        inside += mask.get(x, y) as u64;
                    }
                }
                frac.insert((row, col), (inside, ((y1 - y0) * (x1 - x0)) as u64));
            }
        }
        let any_half = frac.values().any(|&(i, a)| 2 * i >= a);
        fallback_masks += !any_half as usize;

        for (&(row, col), &(inside, area)) in &frac {
            let cell = GridCell { row, col };
            let expect_hit = if any_half { 2 * inside >= area } else { inside > 0 };
            let got = judge(Some(cell), &overlap, &cfg);
            ensure!(
                got.verdict.is_hit() == expect_hit,
                "mask {m}, cell {cell:?}: judge says {:?}, oracle says hit={expect_hit}",
                got.verdict
            );
            ensure!(got.fallback_active == !any_half, "mask {m}: fallback flag disagrees");
            checked += 1;
        }
    }
    within(start.elapsed(), Duration::from_secs(30), "oracle comparison")?;
    Ok(format!(
        "1000 masks, {checked} verdicts, 0 disagreements, {fallback_masks} fallback masks"
    ))
}

const THREE_BACKENDS: &str = r#"
seed = 11
grids = ["8x8", "16x16"]

[synthetic]
images = 40
pathologies_per_image = 4
small_mask_fraction = 0.1

[[backends]]
id = "oracle"
kind = "simulated"
simulator = { type = "oracle" }

[[backends]]
id = "noisy"
kind = "simulated"
simulator = { type = "noisy_oracle", p_correct = 0.5, seed = 5 }

[[backends]]
id = "uniform"
kind = "simulated"
simulator = { type = "uniform_random", seed = 6 }
"#;

fn oracle_backend() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let (_, summary) = simulate(dir.path(), THREE_BACKENDS)?;
    let rows: Vec<&HitRateRow> = summary
        .report
        .report
        .hit_rates
        .iter()
        .filter(|r| r.backend == "oracle")
        .collect();
    ensure!(!rows.is_empty(), "no oracle rows");
    for r in &rows {
        ensure!(r.rate == Some(1.0), "{} / {}: rate {:?}", r.grid, r.pathology, r.rate);
    }
    Ok(format!("{} rows at exactly 1.0", rows.len()))
}

fn random_baseline_consistency() -> Result<String> {
    let start = Instant::now();
    let dir = tempfile::tempdir()?;
    let toml = r#"
seed = 2026

[synthetic]
images = 500
pathologies_per_image = 9

[[backends]]
id = "uniform"
kind = "simulated"
simulator = { type = "uniform_random", seed = 2026 }
"#;
    let (cfg, summary) = simulate(dir.path(), toml)?;
    let mut worst_run = 0.0f64;
    let rows: Vec<&HitRateRow> = summary
        .report
        .report
        .hit_rates
        .iter()
        .filter(|r| r.pathology != MACRO_LABEL)
        .collect();
    ensure!(
        rows.len() == Pathology::ALL.len(),
        "expected one row per pathology, got {}",
        rows.len()
    );
    for r in &rows {
        let gap = (r.rate.context("rate")? - r.random_baseline).abs();
        ensure!(
            gap <= 0.03,
            "{}: empirical {:?} vs analytic {}",
            r.pathology,
            r.rate,
            r.random_baseline
        );
        worst_run = worst_run.max(gap);
    }

    // Many draws per image from the same per-task streams the backend uses.
    let ctx = Context::load(&with_generated_corpus(&cfg))?;
    let layout = &ctx.layouts[0];
    let mut by_p: BTreeMap<Pathology, (f64, usize)> = BTreeMap::new();
    for (task, overlap) in layout.tasks.iter().zip(&layout.overlaps) {
        let mut stream = Simulated::task_stream(2026, task);
        let draws = 20_000;
        let hits = (0..draws)
            .filter(|_| {
                let c = Simulated::uniform_draw(&mut stream, &layout.spec);
                judge(Some(c), overlap, &cfg.scoring).verdict.is_hit()
            })
            .count();
        let e = by_p.entry(task.pathology).or_default();
        e.0 += hits as f64 / draws as f64;
        e.1 += 1;
    }
    let mut worst_mc = 0.0f64;
    for r in &rows {
        let p = Pathology::ALL
            .iter()
            .copied()
            .find(|p| p.display_name() == r.pathology)
            .context("pathology name")?;
        let (sum, n) = by_p[&p];
        let gap = (sum / n as f64 - r.random_baseline).abs();
        ensure!(
            gap <= 0.01,
            "{p}: 20k-draw mean {} vs analytic {}",
            sum / n as f64,
            r.random_baseline
        );
        worst_mc = worst_mc.max(gap);
    }
    within(start.elapsed(), Duration::from_secs(120), "baseline check")?;
    Ok(format!(
        "max gap {worst_run:.4} (single draw), {worst_mc:.5} (20k draws)"
    ))
}

fn bootstrap_correctness() -> Result<String> {
    let cfg = StatsConfig {
        replicates: 1000,
        seed: 42,
    };
    for v in [true, false] {
        let s = bootstrap_std(&[v; 200], &cfg)?;
        ensure!(s == 0.0, "constant {v} vector gave std {s}");
    }
    let mut rng = rng::seeded(7);
    let data: Vec<bool> = (0..200).map(|_| rng.random_bool(0.5)).collect();
    let s = bootstrap_std(&data, &cfg)?;
    let analytic = (0.5f64 * 0.5 / 200.0).sqrt();
    let rel = (s - analytic).abs() / analytic;
    ensure!(rel <= 0.15, "std {s} vs analytic {analytic} ({:.1}% off)", rel * 100.0);
    let again = bootstrap_std(&data, &cfg)?;
    ensure!(s.to_bits() == again.to_bits(), "same seed gave {s} then {again}");
    Ok(format!(
        "std {s:.5} vs {analytic:.5} ({:.1}% off), reproducible",
        rel * 100.0
    ))
}

fn rle_round_trip() -> Result<String> {
    let mut rng = rng::seeded(0x41E);
    for i in 0..500 {
        let (w, h) = (rng.random_range(1..64u32), rng.random_range(1..64u32));
        let total = w * h;
        // Random run list, zero-length runs included, summing to w*h.
        let mut counts = Vec::new();
        let mut left = total;
        while left > 0 {
            let c = if rng.random_bool(0.15) {
                0
            } else {
                rng.random_range(1..=left.min(40))
            };
            counts.push(c);
            left -= c;
        }
        if rng.random_bool(0.2) {
            counts.push(0);
        }
        let r = RleMask {
            width: w,
            height: h,
            counts,
        };
        let decoded = decode_rle(&r)?;
        ensure!(
            encode_rle(&decoded) == r.canonical(),
            "run list {i} does not re-encode canonically"
        );

        let m = random_mask(&mut rng, 32);
        ensure!(decode_rle(&encode_rle(&m))? == m, "mask {i} does not round-trip");
    }
    Ok("500 run lists and 500 masks, 0 failures".into())
}

fn taxonomy_accounting() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let (cfg, summary) = simulate(dir.path(), THREE_BACKENDS)?;
    let mut rows = 0;
    for r in &summary.report.report.error_shares {
        let (Some(f), Some(p), Some(pos), Some(a)) = (
            r.share_full_hit,
            r.share_partial_hit,
            r.share_position_error,
            r.share_anatomy_error,
        ) else {
            anyhow::bail!("{} / {} / {} has no shares", r.backend, r.grid, r.pathology);
        };
        let sum = f + p + pos + a;
        ensure!(
            (sum - 1.0).abs() <= 1e-9,
            "{} / {} / {}: shares sum to {sum}",
            r.backend,
            r.grid,
            r.pathology
        );
        rows += 1;
    }

    // Partial hits, rechecked against the mask pixels.
    let ctx = Context::load(&with_generated_corpus(&cfg))?;
    let mut partials = 0;
    for layout in &ctx.layouts {
        let spec = layout.spec;
        let n = spec.rows();
        for b in &cfg.backends {
            for o in read_outcomes(&cfg, &b.id, &spec.to_string())? {
                if o.category != Some(ErrorCategory::PartialHit) {
                    continue;
                }
                let label = o.predicted.as_deref().context("partial hit without a cell")?;
                let cell = spec.cell_of(label)?;
                let rec = ctx.set.record(&o.image_id).context("record")?;
                let native = ctx.set.mask(&o.image_id, o.pathology).context("mask")?;
                let mask = transform_mask(native, rec.native_width, rec.native_height, spec.canvas_side())?;
                let (y0, y1) = band(cell.row, n, spec.canvas_side());
                let (x0, x1) = band(cell.col, n, spec.canvas_side());
                let mut inside = 0u64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        inside += mask.get(x, y) as u64;
                    }
                }
                let frac = inside as f64 / ((y1 - y0) * (x1 - x0)) as f64;
                ensure!(
                    frac > 0.0 && frac < 0.5,
                    "{} {label}: partial hit with fraction {frac}",
                    o.image_id
                );
                ensure!(
                    o.verdict == Verdict::Miss,
                    "{} {label}: partial hit scored {:?}",
                    o.image_id,
                    o.verdict
                );
                partials += 1;
            }
        }
    }
    ensure!(partials > 0, "no partial hits to recheck");
    Ok(format!("{rows} rows sum to 1, {partials} partial hits rechecked"))
}

fn review_cap() -> Result<String> {
    let misses: Vec<ReviewRow> = (0..120)
        .map(|i| ReviewRow {
            backend_id: "b".into(),
            grid: "8x8".into(),
            image_id: format!("img{i:03}"),
            pathology: Pathology::Edema,
            predicted_cell: "A1".into(),
            rendered_image: format!("prepared/8x8/img{i:03}.png"),
            category: String::new(),
        })
        .collect();
    let sheet = sample_for_review(&misses, 50, 99);
    ensure!(sheet.len() == 50, "worksheet has {} rows", sheet.len());
    ensure!(
        sheet == sample_for_review(&misses, 50, 99),
        "sampling is not deterministic"
    );

    // Label 30 position / 20 anatomy, round-trip through the worksheet file.
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("8x8.csv");
    let labelled: Vec<ReviewRow> = sheet
        .into_iter()
        .enumerate()
        .map(|(i, mut r)| {
            r.category = if i < 30 { "position_error" } else { "anatomy_error" }.into();
            r
        })
        .collect();
    write_worksheet(&path, &labelled)?;
    let counts = ingest_review(&read_worksheet(&path)?)?;
    let c = counts[&("b".to_string(), "8x8".to_string(), Pathology::Edema)];
    ensure!((c.position, c.anatomy) == (30, 20), "ingested {c:?}");

    let (pos, ana) = extrapolate_proportions(&c, 120.0).context("nothing reviewed")?;
    ensure!((pos, ana) == (72.0, 48.0), "extrapolated {pos}/{ana}");
    let mut b = CategoryBreakdown {
        needs_review: 120.0,
        ..Default::default()
    };
    b.apply_review(&c);
    ensure!(
        (b.position_error, b.anatomy_error, b.needs_review) == (72.0, 48.0, 0.0),
        "breakdown after review: {b:?}"
    );
    Ok("120 misses -> 50 rows, 30/20 -> 72/48".into())
}

fn files_under(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root)?.to_path_buf(), std::fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn pipeline_determinism() -> Result<String> {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    let (ca, _) = simulate(a.path(), THREE_BACKENDS)?;
    let (cb, _) = simulate(b.path(), THREE_BACKENDS)?;
    let fa = files_under(&ca.report_dir())?;
    let fb = files_under(&cb.report_dir())?;
    ensure!(
        fa.keys().eq(fb.keys()),
        "file sets differ: {:?} vs {:?}",
        fa.keys().collect::<Vec<_>>(),
        fb.keys().collect::<Vec<_>>()
    );
    for (k, v) in &fa {
        ensure!(fb[k] == *v, "{} differs", k.display());
    }
    let pngs = fa.keys().filter(|k| k.extension().is_some_and(|e| e == "png")).count();
    ensure!(pngs > 0, "no heatmaps rendered");
    Ok(format!("{} files identical, {pngs} of them heatmaps", fa.len()))
}

fn resume_semantics() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let corpus = dir.path().join("corpus");
    synthetic::generate(
        &SyntheticSpec {
            images: 10,
            pathologies_per_image: 3,
            seed: 3,
            ..SyntheticSpec::default()
        },
        &corpus,
        256,
    )?;
    let n = 30;
    let k = 12;
    let config = |script: &str| {
        format!(
            r#"
seed = 1
[corpus]
format = "synthetic_index"
manifest = "corpus/index.json"

[[backends]]
id = "scripted"
kind = "simulated"
max_retries = 0
simulator = {{ type = "scripted", responses = [{script}] }}
"#
        )
    };
    let interrupted = std::iter::repeat_n("\"B2\"", k)
        .chain(std::iter::once("{ error = \"auth\" }"))
        .collect::<Vec<_>>()
        .join(", ");
    let cfg = load_cfg(dir.path(), &config(&interrupted))?;
    cmd_prepare(&cfg)?;
    let first = cmd_run(&cfg)?;
    let lane = first.lane("scripted").context("lane")?;
    ensure!(lane.error.is_some(), "first run was not interrupted");
    ensure!(
        lane.backend_requests_seen == Some(k + 1),
        "first run sent {:?}",
        lane.backend_requests_seen
    );
    let cached = load_journal(&journal_path(&cfg, "scripted"))?.len();
    ensure!(cached == k, "{cached} records survived the interruption, expected {k}");

    let cfg = load_cfg(dir.path(), &config("\"B2\""))?;
    let second = cmd_run(&cfg)?;
    let lane = second.lane("scripted").context("lane")?;
    ensure!(lane.error.is_none(), "rerun failed: {:?}", lane.error);
    ensure!(
        lane.backend_requests_seen == Some(n - k),
        "rerun issued {:?} requests, expected {}",
        lane.backend_requests_seen,
        n - k
    );
    let third = cmd_run(&cfg)?;
    let lane = third.lane("scripted").context("lane")?;
    ensure!(
        lane.backend_requests_seen == Some(0),
        "complete cache still sent {:?}",
        lane.backend_requests_seen
    );
    Ok(format!("n={n}, k={k}: rerun sent {}, third run sent 0", n - k))
}

fn reference_constants() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let (cfg, _) = simulate(
        dir.path(),
        r#"
seed = 4
[synthetic]
images = 6
[[backends]]
id = "oracle"
kind = "simulated"
simulator = { type = "oracle" }
"#,
    )?;
    let text = std::fs::read_to_string(cfg.report_dir().join("tables/hit_rates.json"))?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    let reference = doc["reference"].as_array().context("no reference block")?;
    let mut seen = BTreeMap::new();
    for r in reference {
        let key = r["key"].as_str().context("key")?;
        let provenance = r["provenance"].as_str().context("provenance")?;
        ensure!(
            provenance.contains("published"),
            "{key} is not labelled as published: {provenance}"
        );
        seen.insert(key.to_string(), r["macro_hit_rate_percent"].as_f64().context("value")?);
    }
    for (key, want) in [("human", 80.1), ("cnn", 59.9), ("random", 11.9)] {
        ensure!(
            seen.get(key) == Some(&want),
            "{key}: {:?}, expected {want}",
            seen.get(key)
        );
    }
    Ok("human 80.1, cnn 59.9, random 11.9".into())
}
