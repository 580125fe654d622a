//! Heatmaps over the average image and result tables.

mod tables;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::canvas::{encode_png, CanonicalImage, CanvasError, Channels, GridCell, GridSpec};
use crate::corpus::Pathology;
use crate::querier::QueryRecord;
use crate::scorer::{OverlapGrid, ScoringConfig};

pub use tables::{
    emit_tables, macro_row, reference_values, sensitivity_rows, ErrorShareRow, EvalReport, HitRateRow, ReferenceValue,
    SensitivityRow, ERROR_SHARES_SCHEMA, GRID_SENSITIVITY_SCHEMA, HIT_RATES_SCHEMA, MACRO_LABEL, REFERENCE_SCHEMA,
};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("inputs mix grid layouts {0} and {1}")]
    MixedSpecs(GridSpec, GridSpec),
    #[error("prediction heatmap inputs mix {0} and {1}")]
    MixedPathologies(Pathology, Pathology),
    #[error("cannot average an empty image list")]
    NoImages,
    #[error("images have different sides ({0} and {1})")]
    MixedSides(u32, u32),
    #[error(transparent)]
    Canvas(#[from] CanvasError),
    #[error("writing {path}: {message}")]
    Write { path: String, message: String },
}

/// Per-cell tallies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCountGrid {
    spec: GridSpec,
    counts: Vec<u64>,
}

impl CellCountGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        Self {
            spec,
            counts: vec![0; spec.cell_count() as usize],
        }
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn count(&self, cell: GridCell) -> u64 {
        self.counts[self.spec.index_of(cell)]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn max(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn increment(&mut self, cell: GridCell, by: u64) {
        let i = self.spec.index_of(cell);
        self.counts[i] += by;
    }

    /// Counts over their sum, row-major; all zeros when nothing was counted.
    pub fn normalized(&self) -> Vec<f64> {
        let t = self.total();
        if t == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / t as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionHeatmap {
    pub grid: CellCountGrid,
    /// Included records without a usable cell.
    pub unparseable: usize,
    /// Records dropped by the frontal-only filter.
    pub skipped_lateral: usize,
}

pub fn prediction_heatmap(
    records: &[QueryRecord],
    spec: GridSpec,
    frontal_only: bool,
) -> Result<PredictionHeatmap, ReportError> {
    let mut grid = CellCountGrid::zeros(spec);
    let mut unparseable = 0;
    let mut skipped_lateral = 0;
    let mut pathology = None;
    for r in records {
        if r.task.grid != spec {
            return Err(ReportError::MixedSpecs(spec, r.task.grid));
        }
        match pathology {
            Some(p) if p != r.task.pathology => return Err(ReportError::MixedPathologies(p, r.task.pathology)),
            _ => pathology = Some(r.task.pathology),
        }
        if frontal_only && !r.task.view.is_frontal() {
            skipped_lateral += 1;
            continue;
        }
        match r.parse_result.cell().filter(|&c| spec.contains(c)) {
            Some(c) => grid.increment(c, 1),
            None => unparseable += 1,
        }
    }
    Ok(PredictionHeatmap {
        grid,
        unparseable,
        skipped_lateral,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruthMode {
    /// One count per hit-eligible cell per image.
    #[default]
    EligibleCells,
    /// Mask pixels per cell, summed over images.
    PixelFrequency,
}

pub fn ground_truth_heatmap(
    grids: &[OverlapGrid],
    cfg: &ScoringConfig,
    mode: GroundTruthMode,
) -> Result<CellCountGrid, ReportError> {
    let Some(first) = grids.first() else {
        return Err(ReportError::NoImages);
    };
    let spec = first.spec();
    let mut out = CellCountGrid::zeros(spec);
    for g in grids {
        if g.spec() != spec {
            return Err(ReportError::MixedSpecs(spec, g.spec()));
        }
        match mode {
            GroundTruthMode::EligibleCells => {
                for c in g.eligible_cells(cfg) {
                    out.increment(c, 1);
                }
            }
            GroundTruthMode::PixelFrequency => {
                for c in spec.cells() {
                    out.increment(c, g.count(c));
                }
            }
        }
    }
    Ok(out)
}

/// Per-pixel mean, rounded half up. Mixed gray and colour inputs are
/// averaged in RGB.
pub fn average_image(images: &[CanonicalImage]) -> Result<CanonicalImage, ReportError> {
    let Some(first) = images.first() else {
        return Err(ReportError::NoImages);
    };
    let side = first.side();
    if let Some(bad) = images.iter().find(|i| i.side() != side) {
        return Err(ReportError::MixedSides(side, bad.side()));
    }
    let channels = if images.iter().all(|i| i.channels() == Channels::Gray) {
        Channels::Gray
    } else {
        Channels::Rgb
    };
    let len = side as usize * side as usize * channels.count();
    let mut acc = vec![0u64; len];
    for img in images {
        if channels == Channels::Gray || img.channels() == Channels::Rgb {
            acc.iter_mut().zip(img.data()).for_each(|(a, &v)| *a += v as u64);
        } else {
            acc.iter_mut()
                .zip(img.to_rgb().as_raw())
                .for_each(|(a, &v)| *a += v as u64);
        }
    }
    let n = images.len() as u64;
    let data = acc.into_iter().map(|s| ((s + n / 2) / n) as u8).collect();
    Ok(CanonicalImage::new(side, channels, data).expect("buffer sized for side and channels"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapStyle {
    pub low_color: [u8; 3],
    pub high_color: [u8; 3],
    /// Opacity of the hottest cell, out of 255.
    pub max_alpha: u8,
    pub legend_height: u32,
}

impl Default for HeatmapStyle {
    fn default() -> Self {
        Self {
            low_color: [0, 64, 255],
            high_color: [255, 32, 0],
            max_alpha: 170,
            legend_height: 12,
        }
    }
}

fn lerp(a: u8, b: u8, num: u64, den: u64) -> u8 {
    let (a, b) = (a as i64, b as i64);
    let d = (b - a) * num as i64;
    let half = den as i64 / 2;
    let step = if d >= 0 {
        (d + half) / den as i64
    } else {
        (d - half) / den as i64
    };
    (a + step) as u8
}

fn ramp(style: &HeatmapStyle, num: u64, den: u64) -> [u8; 3] {
    std::array::from_fn(|k| lerp(style.low_color[k], style.high_color[k], num, den))
}

/// Tints each nonzero cell with the ramp colour at `count / max`, at
/// opacity proportional to the same ratio, and appends a legend strip
/// running from the low to the high colour.
pub fn render_heatmap_rgb(
    grid: &CellCountGrid,
    background: &CanonicalImage,
    style: &HeatmapStyle,
) -> Result<RgbImage, ReportError> {
    let spec = grid.spec();
    let side = spec.canvas_side();
    if background.side() != side {
        return Err(CanvasError::SideMismatch {
            got: background.side(),
            expected: side,
        }
        .into());
    }
    let base = background.to_rgb();
    let mut out = RgbImage::new(side, side + style.legend_height);
    for (x, y, p) in base.enumerate_pixels() {
        out.put_pixel(x, y, *p);
    }
    let max = grid.max();
    if max > 0 {
        for cell in spec.cells() {
            let c = grid.count(cell);
            if c == 0 {
                continue;
            }
            let color = ramp(style, c, max);
            let alpha = (style.max_alpha as u64 * c + max / 2) / max;
            let r = spec.cell_rect(cell)?;
            for y in r.row_start..=r.row_end {
                for x in r.col_start..=r.col_end {
                    let bg = out.get_pixel(x, y).0;
                    let px = std::array::from_fn(|k| {
                        ((bg[k] as u64 * (255 - alpha) + color[k] as u64 * alpha + 127) / 255) as u8
                    });
                    out.put_pixel(x, y, Rgb(px));
                }
            }
        }
    }
    let den = (side - 1).max(1) as u64;
    for x in 0..side {
        let color = Rgb(ramp(style, x as u64, den));
        for y in side..side + style.legend_height {
            out.put_pixel(x, y, color);
        }
    }
    Ok(out)
}

pub fn render_heatmap_overlay(
    grid: &CellCountGrid,
    background: &CanonicalImage,
    style: &HeatmapStyle,
) -> Result<Vec<u8>, ReportError> {
    render_heatmap_rgb(grid, background, style).map(|img| encode_png(&img))
}
