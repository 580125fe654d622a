//! Canonical frame, grid geometry and cell labels.
//!
//! Rows are labelled with letters top to bottom (A..Z, AA..ZZ), columns with
//! numbers left to right starting at 1, so "C5" is row 2, column 4.

mod font;
mod image;
mod render;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub(crate) use self::image::central_crop;
pub use self::image::{preprocess, read_canonical, transform_mask, CanonicalImage, Channels};
pub use render::{encode_png, render_grid, render_grid_rgb, GridStyle};

/// Largest row count expressible with one- or two-letter labels.
pub const MAX_ROWS: u32 = 26 + 26 * 26;

pub const DEFAULT_CANVAS_SIDE: u32 = 256;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CanvasError {
    #[error("invalid grid {rows}x{cols} on a {side}px canvas: {reason}")]
    InvalidGrid {
        rows: u32,
        cols: u32,
        side: u32,
        reason: &'static str,
    },
    #[error("cell ({row}, {col}) outside {rows}x{cols} grid")]
    CellOutOfRange { row: u32, col: u32, rows: u32, cols: u32 },
    #[error("label {label:?} outside {rows}x{cols} grid")]
    LabelOutOfRange { label: String, rows: u32, cols: u32 },
    #[error("malformed cell label {0:?}")]
    MalformedLabel(String),
    #[error("image has zero size")]
    EmptyImage,
    #[error("cannot read image: {0}")]
    Unreadable(String),
    #[error("mask is {got_width}x{got_height}, expected {width}x{height}")]
    MaskDimensions {
        got_width: u32,
        got_height: u32,
        width: u32,
        height: u32,
    },
    #[error("label {label:?} does not fit in a {width}x{height} cell")]
    LabelDoesNotFit { label: String, width: u32, height: u32 },
    #[error("image side {got} does not match grid canvas side {expected}")]
    SideMismatch { got: u32, expected: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawGridSpec")]
pub struct GridSpec {
    rows: u32,
    cols: u32,
    canvas_side: u32,
}

#[derive(Deserialize)]
struct RawGridSpec {
    rows: u32,
    cols: u32,
    #[serde(default = "default_side")]
    canvas_side: u32,
}

fn default_side() -> u32 {
    DEFAULT_CANVAS_SIDE
}

impl TryFrom<RawGridSpec> for GridSpec {
    type Error = CanvasError;

    fn try_from(raw: RawGridSpec) -> Result<Self, Self::Error> {
        GridSpec::new(raw.rows, raw.cols, raw.canvas_side)
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            rows: 8,
            cols: 8,
            canvas_side: DEFAULT_CANVAS_SIDE,
        }
    }
}

impl GridSpec {
    pub fn new(rows: u32, cols: u32, canvas_side: u32) -> Result<Self, CanvasError> {
        let invalid = |reason| CanvasError::InvalidGrid {
            rows,
            cols,
            side: canvas_side,
            reason,
        };
        if rows == 0 || cols == 0 {
            return Err(invalid("rows and cols must be at least 1"));
        }
        if rows > MAX_ROWS {
            return Err(invalid("rows exceed the two-letter label range"));
        }
        if canvas_side < rows || canvas_side < cols {
            return Err(invalid("canvas side smaller than the grid"));
        }
        Ok(Self {
            rows,
            cols,
            canvas_side,
        })
    }

    pub fn square(n: u32) -> Result<Self, CanvasError> {
        Self::new(n, n, DEFAULT_CANVAS_SIDE)
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn canvas_side(&self) -> u32 {
        self.canvas_side
    }

    pub fn cell_count(&self) -> u32 {
        self.rows * self.cols
    }

    /// Cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = GridCell> + '_ {
        (0..self.rows).flat_map(move |row| (0..self.cols).map(move |col| GridCell { row, col }))
    }

    pub fn contains(&self, cell: GridCell) -> bool {
        cell.row < self.rows && cell.col < self.cols
    }

    fn check(&self, cell: GridCell) -> Result<(), CanvasError> {
        if self.contains(cell) {
            Ok(())
        } else {
            Err(CanvasError::CellOutOfRange {
                row: cell.row,
                col: cell.col,
                rows: self.rows,
                cols: self.cols,
            })
        }
    }

    /// Row-major flat index.
    pub fn index_of(&self, cell: GridCell) -> usize {
        cell.row as usize * self.cols as usize + cell.col as usize
    }

    pub fn cell_at_index(&self, index: usize) -> GridCell {
        GridCell {
            row: (index / self.cols as usize) as u32,
            col: (index % self.cols as usize) as u32,
        }
    }

    /// Cell covering canonical pixel `(x, y)`.
    pub fn cell_containing(&self, x: u32, y: u32) -> Option<GridCell> {
        if x >= self.canvas_side || y >= self.canvas_side {
            return None;
        }
        // Inverse of floor(i * side / n): the largest i with start(i) <= p.
        let locate = |p: u32, n: u32| {
            let i = ((p as u64 + 1) * n as u64 - 1) / self.canvas_side as u64;
            i as u32
        };
        Some(GridCell {
            row: locate(y, self.rows),
            col: locate(x, self.cols),
        })
    }

    fn bound(&self, i: u32, n: u32) -> u32 {
        (i as u64 * self.canvas_side as u64 / n as u64) as u32
    }

    /// Inclusive pixel bounds of a cell. Boundaries are floor-based so the
    /// cells tile the canvas for any grid size.
    pub fn cell_rect(&self, cell: GridCell) -> Result<PixelRect, CanvasError> {
        self.check(cell)?;
        Ok(PixelRect {
            row_start: self.bound(cell.row, self.rows),
            row_end: self.bound(cell.row + 1, self.rows) - 1,
            col_start: self.bound(cell.col, self.cols),
            col_end: self.bound(cell.col + 1, self.cols) - 1,
        })
    }

    pub fn label_of(&self, cell: GridCell) -> Result<String, CanvasError> {
        self.check(cell)?;
        Ok(format!("{}{}", row_letters(cell.row), cell.col + 1))
    }

    /// Case-insensitive inverse of [`GridSpec::label_of`].
    pub fn cell_of(&self, label: &str) -> Result<GridCell, CanvasError> {
        let label = label.trim();
        let split = label.find(|c: char| !c.is_ascii_alphabetic()).unwrap_or(label.len());
        let (letters, digits) = label.split_at(split);
        let malformed = || CanvasError::MalformedLabel(label.to_string());
        if letters.is_empty() || letters.len() > 2 || digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(malformed());
        }
        let row = letters_to_row(letters);
        let col = digits.parse::<u64>().ok().filter(|&n| n >= 1).ok_or_else(malformed)? - 1;
        let out_of_range = || CanvasError::LabelOutOfRange {
            label: label.to_string(),
            rows: self.rows,
            cols: self.cols,
        };
        if row >= self.rows || col >= self.cols as u64 {
            return Err(out_of_range());
        }
        Ok(GridCell { row, col: col as u32 })
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)?;
        if self.canvas_side != DEFAULT_CANVAS_SIDE {
            write!(f, "@{}", self.canvas_side)?;
        }
        Ok(())
    }
}

/// Parses `ROWSxCOLS` with an optional `@SIDE` suffix, e.g. `8x8` or `16x16@512`.
impl FromStr for GridSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (dims, side) = match s.split_once('@') {
            Some((d, side)) => (d, side.parse::<u32>().map_err(|_| format!("bad canvas side in {s:?}"))?),
            None => (s, DEFAULT_CANVAS_SIDE),
        };
        let (r, c) = dims
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("grid {s:?} is not of the form ROWSxCOLS"))?;
        let rows = r.trim().parse().map_err(|_| format!("bad rows in {s:?}"))?;
        let cols = c.trim().parse().map_err(|_| format!("bad cols in {s:?}"))?;
        GridSpec::new(rows, cols, side).map_err(|e| e.to_string())
    }
}

fn row_letters(row: u32) -> String {
    if row < 26 {
        ((b'A' + row as u8) as char).to_string()
    } else {
        let r = row - 26;
        let hi = (b'A' + (r / 26) as u8) as char;
        let lo = (b'A' + (r % 26) as u8) as char;
        format!("{hi}{lo}")
    }
}

fn letters_to_row(letters: &str) -> u32 {
    let v: Vec<u32> = letters
        .bytes()
        .map(|b| (b.to_ascii_uppercase() - b'A') as u32)
        .collect();
    match v.as_slice() {
        [a] => *a,
        [hi, lo] => 26 + hi * 26 + lo,
        _ => unreachable!("caller checks label length"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridCell {
    pub row: u32,
    pub col: u32,
}

impl GridCell {
    pub const fn new(row: u32, col: u32) -> Self {
        Self { row, col }
    }
}

/// Inclusive pixel bounds on the canonical canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub row_start: u32,
    pub row_end: u32,
    pub col_start: u32,
    pub col_end: u32,
}

impl PixelRect {
    pub fn width(&self) -> u32 {
        self.col_end - self.col_start + 1
    }

    pub fn height(&self) -> u32 {
        self.row_end - self.row_start + 1
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.col_start..=self.col_end).contains(&x) && (self.row_start..=self.row_end).contains(&y)
    }

    pub fn is_strictly_interior(&self, x: u32, y: u32) -> bool {
        x > self.col_start && x < self.col_end && y > self.row_start && y < self.row_end
    }
}
