//! Human review worksheets for zero-overlap misses.
//!
//! Without a plausibility atlas, complete misses on frontal views are
//! exported for a reader to label as position or anatomy errors. At most
//! `cap` misses per (backend, grid, pathology) are sampled; the labelled
//! proportions are then scaled up to the full miss count.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::ErrorCategory;
use crate::corpus::Pathology;
use crate::rng;

pub const WORKSHEET_SCHEMA: &str = "gridloc.review_worksheet.v1";

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("worksheet io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("worksheet csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("worksheet row {row} ({image_id}, {pathology}) has no category")]
    Unlabeled {
        row: usize,
        image_id: String,
        pathology: String,
    },
    #[error("worksheet row {row} has category {category:?}; only position_error and anatomy_error are allowed")]
    BadLabel { row: usize, category: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRow {
    pub backend_id: String,
    pub grid: String,
    pub image_id: String,
    pub pathology: Pathology,
    pub predicted_cell: String,
    pub rendered_image: String,
    #[serde(default)]
    pub category: String,
}

pub type ReviewKey = (String, String, Pathology);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReviewCounts {
    pub position: u64,
    pub anatomy: u64,
}

/// All rows when at most `cap`; otherwise a seeded uniform sample of `cap`
/// rows, kept in their original order.
pub fn sample_for_review(misses: &[ReviewRow], cap: usize, seed: u64) -> Vec<ReviewRow> {
    if misses.len() <= cap {
        return misses.to_vec();
    }
    let mut rng = rng::seeded(seed);
    let mut picked = sample(&mut rng, misses.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| misses[i].clone()).collect()
}

pub fn write_worksheet(path: &Path, rows: &[ReviewRow]) -> Result<(), ReviewError> {
    let io = |source| ReviewError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut file = std::fs::File::create(path).map_err(io)?;
    writeln!(file, "# schema: {WORKSHEET_SCHEMA}").map_err(io)?;
    let mut w = csv::Writer::from_writer(file);
    if rows.is_empty() {
        w.write_record([
            "backend_id",
            "grid",
            "image_id",
            "pathology",
            "predicted_cell",
            "rendered_image",
            "category",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_worksheet(path: &Path) -> Result<Vec<ReviewRow>, ReviewError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    r.deserialize().map(|row| row.map_err(ReviewError::from)).collect()
}

/// Tallies reviewer labels per (backend, grid, pathology). Every row must
/// carry `position_error` or `anatomy_error`.
pub fn ingest_review(rows: &[ReviewRow]) -> Result<BTreeMap<ReviewKey, ReviewCounts>, ReviewError> {
    let mut out: BTreeMap<ReviewKey, ReviewCounts> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        let label = row.category.trim();
        if label.is_empty() {
            return Err(ReviewError::Unlabeled {
                row: i + 1,
                image_id: row.image_id.clone(),
                pathology: row.pathology.to_string(),
            });
        }
        let entry = out
            .entry((row.backend_id.clone(), row.grid.clone(), row.pathology))
            .or_default();
        match label.to_ascii_lowercase().as_str() {
            l if l == ErrorCategory::PositionError.as_str() || l == "position" => entry.position += 1,
            l if l == ErrorCategory::AnatomyError.as_str() || l == "anatomy" => entry.anatomy += 1,
            _ => {
                return Err(ReviewError::BadLabel {
                    row: i + 1,
                    category: label.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Estimated (position, anatomy) counts over `population` misses, from the
/// reviewed subsample's proportions. `None` when nothing was reviewed.
pub fn extrapolate_proportions(reviewed: &ReviewCounts, population: f64) -> Option<(f64, f64)> {
    let n = reviewed.position + reviewed.anatomy;
    if n == 0 {
        return None;
    }
    let position = population * reviewed.position as f64 / n as f64;
    Some((position, population - position))
}
