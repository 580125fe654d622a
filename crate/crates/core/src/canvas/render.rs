use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ImageEncoder, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::font;
use super::{CanonicalImage, CanvasError, GridSpec};

/// Overlay styling. `label_scale: None` picks the largest of 2 or 1 that
/// fits every label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridStyle {
    pub line_color: [u8; 3],
    pub label_color: [u8; 3],
    pub label_scale: Option<u32>,
}

impl Default for GridStyle {
    fn default() -> Self {
        Self {
            line_color: [255, 255, 0],
            label_color: [255, 64, 64],
            label_scale: None,
        }
    }
}

/// Labels start two pixels in from the cell's top-left corner, clear of the
/// grid line, and must end before the cell's last row and column.
const LABEL_INSET: u32 = 2;

fn fits(spec: &GridSpec, scale: u32) -> Result<(), CanvasError> {
    for cell in spec.cells() {
        let rect = spec.cell_rect(cell)?;
        let label = spec.label_of(cell)?;
        let (tw, th) = font::text_extent(&label, scale);
        let room_w = rect.width().saturating_sub(LABEL_INSET + 1);
        let room_h = rect.height().saturating_sub(LABEL_INSET + 1);
        if tw > room_w || th > room_h {
            return Err(CanvasError::LabelDoesNotFit {
                label,
                width: rect.width(),
                height: rect.height(),
            });
        }
    }
    Ok(())
}

fn choose_scale(spec: &GridSpec, style: &GridStyle) -> Result<u32, CanvasError> {
    match style.label_scale {
        Some(s) => fits(spec, s.max(1)).map(|_| s.max(1)),
        None => fits(spec, 2).map(|_| 2).or_else(|_| fits(spec, 1).map(|_| 1)),
    }
}

/// Draws 1-pixel lines on every cell boundary (each cell's first row and
/// column, plus the canvas's last row and column) and each cell's label in
/// its top-left corner.
pub fn render_grid_rgb(img: &CanonicalImage, spec: &GridSpec, style: &GridStyle) -> Result<RgbImage, CanvasError> {
    if img.side() != spec.canvas_side() {
        return Err(CanvasError::SideMismatch {
            got: img.side(),
            expected: spec.canvas_side(),
        });
    }
    let scale = choose_scale(spec, style)?;
    let side = spec.canvas_side();
    let mut out = img.to_rgb();
    let line = Rgb(style.line_color);

    let mut boundaries_y: Vec<u32> = (0..spec.rows())
        .map(|r| spec.cell_rect(super::GridCell::new(r, 0)).map(|rect| rect.row_start))
        .collect::<Result<_, _>>()?;
    boundaries_y.push(side - 1);
    let mut boundaries_x: Vec<u32> = (0..spec.cols())
        .map(|c| spec.cell_rect(super::GridCell::new(0, c)).map(|rect| rect.col_start))
        .collect::<Result<_, _>>()?;
    boundaries_x.push(side - 1);

    for &y in &boundaries_y {
        for x in 0..side {
            out.put_pixel(x, y, line);
        }
    }
    for &x in &boundaries_x {
        for y in 0..side {
            out.put_pixel(x, y, line);
        }
    }

    let label_px = Rgb(style.label_color);
    for cell in spec.cells() {
        let rect = spec.cell_rect(cell)?;
        let label = spec.label_of(cell)?;
        let (ox, oy) = (rect.col_start + LABEL_INSET, rect.row_start + LABEL_INSET);
        font::for_each_pixel(&label, scale, |dx, dy| out.put_pixel(ox + dx, oy + dy, label_px));
    }
    Ok(out)
}

/// Lossless PNG bytes with fixed encoder settings, so identical pixels give
/// identical bytes.
pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = Vec::new();
    PngEncoder::new_with_quality(&mut buf, CompressionType::Default, FilterType::Adaptive)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .expect("in-memory PNG encoding does not fail");
    buf
}

pub fn render_grid(img: &CanonicalImage, spec: &GridSpec, style: &GridStyle) -> Result<Vec<u8>, CanvasError> {
    render_grid_rgb(img, spec, style).map(|rgb| encode_png(&rgb))
}
