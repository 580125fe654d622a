use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::ReportError;

pub const HIT_RATES_SCHEMA: &str = "gridloc.hit_rates.v1";
pub const ERROR_SHARES_SCHEMA: &str = "gridloc.error_shares.v1";
pub const GRID_SENSITIVITY_SCHEMA: &str = "gridloc.grid_sensitivity.v1";
pub const REFERENCE_SCHEMA: &str = "gridloc.reference_values.v1";

/// Pathology column value for the per-backend macro-average row.
pub const MACRO_LABEL: &str = "MACRO";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRateRow {
    pub backend: String,
    pub grid: String,
    pub pathology: String,
    pub n: usize,
    pub n_unparseable: usize,
    /// Rate under the configured unparseable policy.
    pub rate: Option<f64>,
    pub bootstrap_std: Option<f64>,
    pub random_baseline: f64,
    pub rate_count_as_miss: f64,
    pub rate_exclude: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorShareRow {
    pub backend: String,
    pub grid: String,
    pub pathology: String,
    /// Parseable frontal predictions analysed.
    pub n: usize,
    pub full_hit: f64,
    pub partial_hit: f64,
    pub position_error: f64,
    pub anatomy_error: f64,
    pub needs_review: f64,
    pub fallback_hits: u64,
    pub share_full_hit: Option<f64>,
    pub share_partial_hit: Option<f64>,
    pub share_position_error: Option<f64>,
    pub share_anatomy_error: Option<f64>,
    pub share_needs_review: Option<f64>,
    /// Position/anatomy counts were extrapolated from a reviewed subsample.
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub backend: String,
    pub pathology: String,
    pub base_grid: String,
    pub base_rate: Option<f64>,
    pub other_grid: String,
    pub other_rate: Option<f64>,
    pub difference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValue {
    pub key: String,
    pub description: String,
    pub macro_hit_rate_percent: f64,
    pub provenance: String,
}

/// Published macro hit rates for context. These are fixed constants and are
/// never recomputed.
pub fn reference_values() -> Vec<ReferenceValue> {
    let published = |key: &str, description: &str, v: f64| ReferenceValue {
        key: key.into(),
        description: description.into(),
        macro_hit_rate_percent: v,
        provenance: "published reference value, not computed by this run".into(),
    };
    vec![
        published("human", "radiologist benchmark", 80.1),
        published("cnn", "task-specific CNN baseline", 59.9),
        published("random", "uniform random cell choice", 11.9),
    ]
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub hit_rates: Vec<HitRateRow>,
    pub error_shares: Vec<ErrorShareRow>,
    pub sensitivity: Vec<SensitivityRow>,
    pub reference: Vec<ReferenceValue>,
}

/// Macro row over the per-pathology rows of one (backend, grid). Rates are
/// unweighted means over pathologies with a defined rate; `bootstrap_std` is
/// supplied by the caller because it needs the replicate means.
pub fn macro_row(rows: &[HitRateRow], bootstrap_std: Option<f64>) -> Option<HitRateRow> {
    let first = rows.first()?;
    let mean_of = |f: &dyn Fn(&HitRateRow) -> Option<f64>| crate::stats::exact_mean(rows.iter().filter_map(f));
    Some(HitRateRow {
        backend: first.backend.clone(),
        grid: first.grid.clone(),
        pathology: MACRO_LABEL.into(),
        n: rows.iter().map(|r| r.n).sum(),
        n_unparseable: rows.iter().map(|r| r.n_unparseable).sum(),
        rate: mean_of(&|r| r.rate),
        bootstrap_std,
        random_baseline: mean_of(&|r| Some(r.random_baseline)).unwrap_or(0.0),
        rate_count_as_miss: mean_of(&|r| Some(r.rate_count_as_miss)).unwrap_or(0.0),
        rate_exclude: mean_of(&|r| r.rate_exclude),
    })
}

/// Pairs each backend's rates under the first grid with every other grid.
pub fn sensitivity_rows(hit_rates: &[HitRateRow]) -> Vec<SensitivityRow> {
    let mut grids: Vec<&str> = Vec::new();
    for r in hit_rates {
        if !grids.contains(&r.grid.as_str()) {
            grids.push(&r.grid);
        }
    }
    let Some((&base, others)) = grids.split_first() else {
        return Vec::new();
    };
    let by_key: BTreeMap<(&str, &str, &str), &HitRateRow> = hit_rates
        .iter()
        .map(|r| ((r.backend.as_str(), r.grid.as_str(), r.pathology.as_str()), r))
        .collect();
    let mut out = Vec::new();
    for r in hit_rates.iter().filter(|r| r.grid == base) {
        for &other in others {
            let Some(o) = by_key.get(&(r.backend.as_str(), other, r.pathology.as_str())) else {
                continue;
            };
            out.push(SensitivityRow {
                backend: r.backend.clone(),
                pathology: r.pathology.clone(),
                base_grid: base.into(),
                base_rate: r.rate,
                other_grid: other.into(),
                other_rate: o.rate,
                difference: r.rate.zip(o.rate).map(|(a, b)| b - a),
            });
        }
    }
    out
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> ReportError {
    ReportError::Write {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_csv<T: Serialize>(path: &Path, schema: &str, rows: &[T], header: &[&str]) -> Result<(), ReportError> {
    let mut buf = Vec::new();
    writeln!(buf, "# schema: {schema}").expect("in-memory write");
    {
        let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(&mut buf);
        if rows.is_empty() {
            w.write_record(header).map_err(|e| write_err(path, e))?;
        }
        for r in rows {
            w.serialize(r).map_err(|e| write_err(path, e))?;
        }
        w.flush().map_err(|e| write_err(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| write_err(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), ReportError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| write_err(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| write_err(path, e))
}

const HIT_RATE_HEADER: &[&str] = &[
    "backend",
    "grid",
    "pathology",
    "n",
    "n_unparseable",
    "rate",
    "bootstrap_std",
    "random_baseline",
    "rate_count_as_miss",
    "rate_exclude",
];

const ERROR_SHARE_HEADER: &[&str] = &[
    "backend",
    "grid",
    "pathology",
    "n",
    "full_hit",
    "partial_hit",
    "position_error",
    "anatomy_error",
    "needs_review",
    "fallback_hits",
    "share_full_hit",
    "share_partial_hit",
    "share_position_error",
    "share_anatomy_error",
    "share_needs_review",
    "extrapolated",
];

/// Writes every table as CSV (first line `# schema: <tag>`) and JSON
/// (`{"schema": <tag>, ...}`) under `<dir>/tables`. The sensitivity table is
/// only written when it has rows. Returns the files written.
pub fn emit_tables(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let tables = dir.join("tables");
    std::fs::create_dir_all(&tables).map_err(|e| write_err(&tables, e))?;
    let mut written = Vec::new();
    let mut emit = |name: &str, csv_write: &dyn Fn(&Path) -> Result<(), ReportError>, json_value: serde_json::Value| {
        let c = tables.join(format!("{name}.csv"));
        csv_write(&c)?;
        let j = tables.join(format!("{name}.json"));
        write_json(&j, &json_value)?;
        written.push(c);
        written.push(j);
        Ok::<_, ReportError>(())
    };

    emit(
        "hit_rates",
        &|p| write_csv(p, HIT_RATES_SCHEMA, &report.hit_rates, HIT_RATE_HEADER),
        json!({"schema": HIT_RATES_SCHEMA, "rows": report.hit_rates, "reference": report.reference}),
    )?;
    emit(
        "error_shares",
        &|p| write_csv(p, ERROR_SHARES_SCHEMA, &report.error_shares, ERROR_SHARE_HEADER),
        json!({"schema": ERROR_SHARES_SCHEMA, "rows": report.error_shares}),
    )?;
    if !report.sensitivity.is_empty() {
        emit(
            "grid_sensitivity",
            &|p| write_csv(p, GRID_SENSITIVITY_SCHEMA, &report.sensitivity, &[]),
            json!({"schema": GRID_SENSITIVITY_SCHEMA, "rows": report.sensitivity}),
        )?;
    }
    emit(
        "reference_values",
        &|p| {
            write_csv(
                p,
                REFERENCE_SCHEMA,
                &report.reference,
                &["key", "description", "macro_hit_rate_percent", "provenance"],
            )
        },
        json!({"schema": REFERENCE_SCHEMA, "rows": report.reference}),
    )?;
    Ok(written)
}
