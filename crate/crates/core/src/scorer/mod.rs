//! Cell-overlap scoring: projecting masks onto the grid, hit/miss judgement,
//! the analytic random baseline, and the miss taxonomy.

mod review;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::canvas::{CanvasError, GridCell, GridSpec};
use crate::corpus::{BinaryMask, CorpusError, Pathology, ViewPosition};

pub use review::{
    extrapolate_proportions, ingest_review, read_worksheet, sample_for_review, write_worksheet, ReviewCounts,
    ReviewError, ReviewKey, ReviewRow, WORKSHEET_SCHEMA,
};

#[derive(Debug, thiserror::Error)]
pub enum ScoreError {
    #[error("mask is empty in the canonical frame")]
    EmptyMask,
    #[error("mask is {width}x{height} but the grid canvas is {side}x{side}")]
    DimensionMismatch { width: u32, height: u32, side: u32 },
    #[error("no outcomes left to average after applying the unparseable policy")]
    EmptyDenominator,
    #[error("no overlap grids supplied")]
    NoGrids,
    #[error(transparent)]
    Canvas(#[from] CanvasError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnparseablePolicy {
    #[default]
    CountAsMiss,
    Exclude,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub threshold: f64,
    pub fallback_enabled: bool,
    pub unparseable_policy: UnparseablePolicy,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            fallback_enabled: true,
            unparseable_policy: UnparseablePolicy::CountAsMiss,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.threshold > 0.0 && self.threshold <= 1.0 {
            Ok(())
        } else {
            Err(format!("threshold {} outside (0, 1]", self.threshold))
        }
    }
}

/// Per-cell mask coverage: exact foreground pixel counts over cell areas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapGrid {
    spec: GridSpec,
    counts: Vec<u64>,
    areas: Vec<u64>,
    fallback_active: bool,
}

impl OverlapGrid {
    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn fraction(&self, cell: GridCell) -> f64 {
        let i = self.spec.index_of(cell);
        self.counts[i] as f64 / self.areas[i] as f64
    }

    pub fn count(&self, cell: GridCell) -> u64 {
        self.counts[self.spec.index_of(cell)]
    }

    pub fn fractions(&self) -> impl Iterator<Item = (GridCell, f64)> + '_ {
        self.spec.cells().map(move |c| (c, self.fraction(c)))
    }

    /// True iff no cell reaches the threshold (the mask is never empty here).
    pub fn fallback_active(&self) -> bool {
        self.fallback_active
    }

    /// Cells a prediction could hit: those at or above the threshold, or,
    /// when the fallback applies, every cell with any overlap.
    pub fn eligible_cells(&self, cfg: &ScoringConfig) -> Vec<GridCell> {
        if self.fallback_active && cfg.fallback_enabled {
            self.spec.cells().filter(|&c| self.count(c) > 0).collect()
        } else {
            self.spec
                .cells()
                .filter(|&c| self.fraction(c) >= cfg.threshold)
                .collect()
        }
    }

    /// Cell with the largest overlap fraction; ties go to the first in
    /// row-major order.
    pub fn best_cell(&self) -> GridCell {
        let mut best = GridCell::new(0, 0);
        let mut best_f = f64::NEG_INFINITY;
        for (c, f) in self.fractions() {
            if f > best_f {
                best = c;
                best_f = f;
            }
        }
        best
    }
}

/// Counts mask pixels per cell.
pub fn overlap_fractions(mask: &BinaryMask, spec: GridSpec, cfg: &ScoringConfig) -> Result<OverlapGrid, ScoreError> {
    let side = spec.canvas_side();
    if mask.width() != side || mask.height() != side {
        return Err(ScoreError::DimensionMismatch {
            width: mask.width(),
            height: mask.height(),
            side,
        });
    }
    if mask.is_empty() {
        return Err(ScoreError::EmptyMask);
    }
    let mut counts = Vec::with_capacity(spec.cell_count() as usize);
    let mut areas = Vec::with_capacity(spec.cell_count() as usize);
    for cell in spec.cells() {
        let r = spec.cell_rect(cell)?;
        counts.push(mask.count_in(r.row_start, r.row_end, r.col_start, r.col_end));
        areas.push(r.area());
    }
    let fallback_active = counts
        .iter()
        .zip(&areas)
        .all(|(&c, &a)| (c as f64 / a as f64) < cfg.threshold);
    Ok(OverlapGrid {
        spec,
        counts,
        areas,
        fallback_active,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    FullHit,
    FallbackHit,
    Miss,
    Unparseable,
}

impl Verdict {
    pub fn is_hit(self) -> bool {
        matches!(self, Verdict::FullHit | Verdict::FallbackHit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitOutcome {
    pub verdict: Verdict,
    pub cell_fraction: f64,
    pub fallback_active: bool,
}

/// Judges one prediction. `None` stands for a response that did not parse.
pub fn judge(prediction: Option<GridCell>, grid: &OverlapGrid, cfg: &ScoringConfig) -> HitOutcome {
    let fallback_active = grid.fallback_active();
    let Some(cell) = prediction.filter(|&c| grid.spec.contains(c)) else {
        return HitOutcome {
            verdict: Verdict::Unparseable,
            cell_fraction: 0.0,
            fallback_active,
        };
    };
    let f = grid.fraction(cell);
    let verdict = if f >= cfg.threshold {
        Verdict::FullHit
    } else if cfg.fallback_enabled && fallback_active && grid.count(cell) > 0 {
        Verdict::FallbackHit
    } else {
        Verdict::Miss
    };
    HitOutcome {
        verdict,
        cell_fraction: f,
        fallback_active,
    }
}

/// Expected hit rate of a uniformly random cell: the mean over images of
/// eligible cells / total cells.
pub fn random_baseline(grids: &[OverlapGrid], cfg: &ScoringConfig) -> Result<f64, ScoreError> {
    if grids.is_empty() {
        return Err(ScoreError::NoGrids);
    }
    let total: f64 = grids
        .iter()
        .map(|g| g.eligible_cells(cfg).len() as f64 / g.spec.cell_count() as f64)
        .sum();
    Ok(total / grids.len() as f64)
}

pub fn hit_rate(outcomes: &[HitOutcome], policy: UnparseablePolicy) -> Result<f64, ScoreError> {
    let hits = outcomes.iter().filter(|o| o.verdict.is_hit()).count();
    let denominator = match policy {
        UnparseablePolicy::CountAsMiss => outcomes.len(),
        UnparseablePolicy::Exclude => outcomes.iter().filter(|o| o.verdict != Verdict::Unparseable).count(),
    };
    if denominator == 0 {
        return Err(ScoreError::EmptyDenominator);
    }
    Ok(hits as f64 / denominator as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    FullHit,
    PartialHit,
    PositionError,
    AnatomyError,
    NeedsReview,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::FullHit => "full_hit",
            ErrorCategory::PartialHit => "partial_hit",
            ErrorCategory::PositionError => "position_error",
            ErrorCategory::AnatomyError => "anatomy_error",
            ErrorCategory::NeedsReview => "needs_review",
        }
    }
}

/// Canonical-frame masks of anatomically plausible regions, per finding, for
/// frontal views.
#[derive(Debug, Clone, Default)]
pub struct PlausibilityAtlas {
    masks: BTreeMap<Pathology, BinaryMask>,
}

impl PlausibilityAtlas {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, pathology: Pathology, mask: BinaryMask) {
        self.masks.insert(pathology, mask);
    }

    pub fn get(&self, pathology: Pathology) -> Option<&BinaryMask> {
        self.masks.get(&pathology)
    }

    /// Reads `<dir>/<pathology slug>.png` for each finding present; every
    /// mask must be `canvas_side` square.
    pub fn load_dir(dir: &Path, canvas_side: u32) -> Result<Self, ScoreError> {
        let mut atlas = Self::new();
        for p in Pathology::ALL {
            let path = dir.join(format!("{}.png", p.slug()));
            if !path.is_file() {
                continue;
            }
            let mask = crate::corpus::read_mask_png(&path)?;
            if mask.width() != canvas_side || mask.height() != canvas_side {
                return Err(ScoreError::DimensionMismatch {
                    width: mask.width(),
                    height: mask.height(),
                    side: canvas_side,
                });
            }
            atlas.insert(p, mask);
        }
        Ok(atlas)
    }
}

/// Assigns a miss category. Only frontal views are analysed; lateral views
/// come back as `NeedsReview`, as do zero-overlap misses without an atlas
/// entry for the finding.
pub fn categorize(
    outcome: &HitOutcome,
    prediction: GridCell,
    spec: GridSpec,
    atlas: Option<&PlausibilityAtlas>,
    pathology: Pathology,
    view: ViewPosition,
) -> Result<ErrorCategory, ScoreError> {
    if !view.is_frontal() {
        return Ok(ErrorCategory::NeedsReview);
    }
    if outcome.verdict.is_hit() {
        return Ok(ErrorCategory::FullHit);
    }
    if outcome.cell_fraction > 0.0 {
        return Ok(ErrorCategory::PartialHit);
    }
    let Some(region) = atlas.and_then(|a| a.get(pathology)) else {
        return Ok(ErrorCategory::NeedsReview);
    };
    let r = spec.cell_rect(prediction)?;
    Ok(if region.count_in(r.row_start, r.row_end, r.col_start, r.col_end) > 0 {
        ErrorCategory::PositionError
    } else {
        ErrorCategory::AnatomyError
    })
}

/// Category counts for one (backend, grid, pathology) over parseable frontal
/// predictions. Position/anatomy counts may be fractional after
/// extrapolation from a reviewed subsample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CategoryBreakdown {
    pub full_hit: f64,
    pub partial_hit: f64,
    pub position_error: f64,
    pub anatomy_error: f64,
    pub needs_review: f64,
    /// Hits that only counted through the any-overlap fallback; included in
    /// `full_hit`.
    pub fallback_hits: u64,
}

impl CategoryBreakdown {
    pub fn add(&mut self, category: ErrorCategory) {
        match category {
            ErrorCategory::FullHit => self.full_hit += 1.0,
            ErrorCategory::PartialHit => self.partial_hit += 1.0,
            ErrorCategory::PositionError => self.position_error += 1.0,
            ErrorCategory::AnatomyError => self.anatomy_error += 1.0,
            ErrorCategory::NeedsReview => self.needs_review += 1.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.full_hit + self.partial_hit + self.position_error + self.anatomy_error + self.needs_review
    }

    /// Replaces the unreviewed complete misses with estimates scaled from a
    /// reviewed subsample.
    pub fn apply_review(&mut self, reviewed: &ReviewCounts) {
        if self.needs_review == 0.0 {
            return;
        }
        let population = self.needs_review;
        if let Some((pos, ana)) = extrapolate_proportions(reviewed, population) {
            self.position_error += pos;
            self.anatomy_error += ana;
            self.needs_review = 0.0;
        }
    }

    /// Shares in the order full, partial, position, anatomy, needs_review.
    pub fn shares(&self) -> Option<[f64; 5]> {
        let t = self.total();
        (t > 0.0).then(|| {
            [
                self.full_hit / t,
                self.partial_hit / t,
                self.position_error / t,
                self.anatomy_error / t,
                self.needs_review / t,
            ]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FrontalSubtype;

    const FRONTAL: ViewPosition = ViewPosition::Frontal(FrontalSubtype::Unknown);

    fn spec8() -> GridSpec {
        GridSpec::square(8).unwrap()
    }

    fn cfg() -> ScoringConfig {
        ScoringConfig::default()
    }

    /// Mask covering `rows x cols` pixels at the top-left of a cell.
    fn patch(cell: GridCell, w: u32, h: u32) -> BinaryMask {
        let r = spec8().cell_rect(cell).unwrap();
        BinaryMask::from_fn(256, 256, |x, y| {
            x >= r.col_start && x < r.col_start + w && y >= r.row_start && y < r.row_start + h
        })
    }

    #[test]
    fn full_mask_fractions() {
        let g = overlap_fractions(&BinaryMask::filled(256, 256), spec8(), &cfg()).unwrap();
        assert!(g.fractions().all(|(_, f)| f == 1.0));
        assert!(!g.fallback_active());
    }

    #[test]
    fn left_half_fractions() {
        let m = BinaryMask::from_fn(256, 256, |x, _| x < 128);
        let g = overlap_fractions(&m, spec8(), &cfg()).unwrap();
        for (c, f) in g.fractions() {
            assert_eq!(f, if c.col < 4 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn empty_and_misfit_masks_are_errors() {
        assert!(matches!(
            overlap_fractions(&BinaryMask::empty(256, 256), spec8(), &cfg()),
            Err(ScoreError::EmptyMask)
        ));
        assert!(matches!(
            overlap_fractions(&BinaryMask::filled(128, 128), spec8(), &cfg()),
            Err(ScoreError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn judge_examples() {
        // 0.6 coverage: 32 x 20 = 640 of 1024 pixels is 0.625.
        let c = GridCell::new(2, 3);
        let g = overlap_fractions(&patch(c, 32, 20), spec8(), &cfg()).unwrap();
        assert_eq!(judge(Some(c), &g, &cfg()).verdict, Verdict::FullHit);

        // Tiny mask: no cell reaches 0.5, any overlap counts.
        let g = overlap_fractions(&patch(c, 3, 3), spec8(), &cfg()).unwrap();
        assert!(g.fallback_active());
        let o = judge(Some(c), &g, &cfg());
        assert_eq!(o.verdict, Verdict::FallbackHit);
        assert!(o.cell_fraction > 0.0 && o.cell_fraction < 0.01);
        assert_eq!(judge(Some(GridCell::new(0, 0)), &g, &cfg()).verdict, Verdict::Miss);

        // One cell at 0.8 somewhere else, prediction at 0.3 -> miss.
        let a = GridCell::new(1, 1);
        let b = GridCell::new(5, 5);
        let mut m = patch(a, 32, 26);
        let pb = patch(b, 32, 10);
        for y in 0..256 {
            for x in 0..256 {
                if pb.get(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        let g = overlap_fractions(&m, spec8(), &cfg()).unwrap();
        assert!((g.fraction(a) - 0.8125).abs() < 1e-12);
        let o = judge(Some(b), &g, &cfg());
        assert_eq!(o.verdict, Verdict::Miss);
        assert!((o.cell_fraction - 0.3125).abs() < 1e-12);

        assert_eq!(judge(None, &g, &cfg()).verdict, Verdict::Unparseable);
    }

    #[test]
    fn exactly_half_is_a_hit() {
        let c = GridCell::new(0, 0);
        let g = overlap_fractions(&patch(c, 32, 16), spec8(), &cfg()).unwrap();
        assert_eq!(g.fraction(c), 0.5);
        assert_eq!(judge(Some(c), &g, &cfg()).verdict, Verdict::FullHit);
    }

    #[test]
    fn fallback_can_be_disabled() {
        let c = GridCell::new(0, 0);
        let g = overlap_fractions(&patch(c, 3, 3), spec8(), &cfg()).unwrap();
        let strict = ScoringConfig {
            fallback_enabled: false,
            ..cfg()
        };
        assert_eq!(judge(Some(c), &g, &strict).verdict, Verdict::Miss);
        assert_eq!(random_baseline(&[g], &strict).unwrap(), 0.0);
    }

    #[test]
    fn baseline_examples() {
        // Eight full cells in row 0.
        let m = BinaryMask::from_fn(256, 256, |_, y| y < 32);
        let g = overlap_fractions(&m, spec8(), &cfg()).unwrap();
        assert_eq!(random_baseline(&[g], &cfg()).unwrap(), 0.125);

        // Fallback image touching three cells.
        let m = BinaryMask::from_fn(256, 256, |x, y| (y == 40) && (x == 5 || x == 40 || x == 70));
        let g = overlap_fractions(&m, spec8(), &cfg()).unwrap();
        assert!(g.fallback_active());
        assert_eq!(random_baseline(&[g], &cfg()).unwrap(), 3.0 / 64.0);
        assert!(matches!(random_baseline(&[], &cfg()), Err(ScoreError::NoGrids)));
    }

    fn outcome(v: Verdict) -> HitOutcome {
        HitOutcome {
            verdict: v,
            cell_fraction: 0.0,
            fallback_active: false,
        }
    }

    #[test]
    fn hit_rate_examples() {
        use Verdict::*;
        let all: Vec<_> = [FullHit, FullHit].map(outcome).to_vec();
        assert_eq!(hit_rate(&all, UnparseablePolicy::CountAsMiss).unwrap(), 1.0);
        let mixed: Vec<_> = [FullHit, Miss, FallbackHit, Miss].map(outcome).to_vec();
        assert_eq!(hit_rate(&mixed, UnparseablePolicy::CountAsMiss).unwrap(), 0.5);
        let unp: Vec<_> = [FullHit, FullHit, FullHit, Unparseable].map(outcome).to_vec();
        assert_eq!(hit_rate(&unp, UnparseablePolicy::CountAsMiss).unwrap(), 0.75);
        assert_eq!(hit_rate(&unp, UnparseablePolicy::Exclude).unwrap(), 1.0);
        let only_bad = vec![outcome(Unparseable)];
        assert!(hit_rate(&only_bad, UnparseablePolicy::Exclude).is_err());
        assert!(hit_rate(&[], UnparseablePolicy::CountAsMiss).is_err());
    }

    fn lung_atlas() -> PlausibilityAtlas {
        // Lungs: rows 64..192, excluding the top 64 rows where the shoulders are.
        let mut atlas = PlausibilityAtlas::new();
        atlas.insert(
            Pathology::Pneumothorax,
            BinaryMask::from_fn(256, 256, |_, y| (64..192).contains(&y)),
        );
        atlas
    }

    #[test]
    fn categorize_examples() {
        let spec = spec8();
        let truth = patch(GridCell::new(3, 1), 32, 32);
        let g = overlap_fractions(&truth, spec, &cfg()).unwrap();
        let atlas = lung_atlas();

        let partial = HitOutcome {
            verdict: Verdict::Miss,
            cell_fraction: 0.2,
            fallback_active: false,
        };
        assert_eq!(
            categorize(
                &partial,
                GridCell::new(3, 2),
                spec,
                Some(&atlas),
                Pathology::Pneumothorax,
                FRONTAL
            )
            .unwrap(),
            ErrorCategory::PartialHit
        );

        let in_lung = GridCell::new(4, 6);
        let o = judge(Some(in_lung), &g, &cfg());
        assert_eq!(
            categorize(&o, in_lung, spec, Some(&atlas), Pathology::Pneumothorax, FRONTAL).unwrap(),
            ErrorCategory::PositionError
        );

        let shoulder = GridCell::new(0, 7);
        let o = judge(Some(shoulder), &g, &cfg());
        assert_eq!(
            categorize(&o, shoulder, spec, Some(&atlas), Pathology::Pneumothorax, FRONTAL).unwrap(),
            ErrorCategory::AnatomyError
        );
        assert_eq!(
            categorize(&o, shoulder, spec, None, Pathology::Pneumothorax, FRONTAL).unwrap(),
            ErrorCategory::NeedsReview
        );
        assert_eq!(
            categorize(
                &o,
                shoulder,
                spec,
                Some(&atlas),
                Pathology::Pneumothorax,
                ViewPosition::Lateral
            )
            .unwrap(),
            ErrorCategory::NeedsReview
        );

        let hit = judge(Some(GridCell::new(3, 1)), &g, &cfg());
        assert_eq!(
            categorize(&hit, GridCell::new(3, 1), spec, None, Pathology::Pneumothorax, FRONTAL).unwrap(),
            ErrorCategory::FullHit
        );
    }

    #[test]
    fn breakdown_with_review() {
        let mut b = CategoryBreakdown {
            full_hit: 10.0,
            partial_hit: 5.0,
            needs_review: 120.0,
            ..Default::default()
        };
        b.apply_review(&ReviewCounts {
            position: 30,
            anatomy: 20,
        });
        assert_eq!((b.position_error, b.anatomy_error, b.needs_review), (72.0, 48.0, 0.0));
        let s = b.shares().unwrap();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
