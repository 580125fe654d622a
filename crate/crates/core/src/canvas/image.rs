use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use super::CanvasError;
use crate::corpus::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channels {
    Gray,
    Rgb,
}

impl Channels {
    pub fn count(self) -> usize {
        match self {
            Channels::Gray => 1,
            Channels::Rgb => 3,
        }
    }
}

/// Square 8-bit image in the canonical frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonicalImage {
    side: u32,
    channels: Channels,
    data: Vec<u8>,
}

impl CanonicalImage {
    pub fn new(side: u32, channels: Channels, data: Vec<u8>) -> Option<Self> {
        (data.len() == side as usize * side as usize * channels.count()).then_some(Self { side, channels, data })
    }

    pub fn uniform_gray(side: u32, level: u8) -> Self {
        Self {
            side,
            channels: Channels::Gray,
            data: vec![level; side as usize * side as usize],
        }
    }

    pub fn side(&self) -> u32 {
        self.side
    }

    pub fn channels(&self) -> Channels {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn to_rgb(&self) -> RgbImage {
        match self.channels {
            Channels::Rgb => {
                RgbImage::from_raw(self.side, self.side, self.data.clone()).expect("buffer matches dimensions")
            }
            Channels::Gray => {
                let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
                RgbImage::from_raw(self.side, self.side, data).expect("buffer matches dimensions")
            }
        }
    }

    pub fn from_gray(img: GrayImage) -> Option<Self> {
        let (w, h) = img.dimensions();
        (w == h).then(|| Self {
            side: w,
            channels: Channels::Gray,
            data: img.into_raw(),
        })
    }
}

/// Source coordinate of output sample `dst` for bilinear sampling, with pixel
/// centres aligned and edges clamped.
fn bilinear_source(dst: u32, src_len: u32, dst_len: u32) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len as usize - 1);
    (i0, i1, s - i0 as f64)
}

/// Central square crop of side `min(w, h)`: returns `(x0, y0, side)`.
pub(crate) fn central_crop(width: u32, height: u32) -> (u32, u32, u32) {
    let side = width.min(height);
    ((width - side) / 2, (height - side) / 2, side)
}

/// Centre-crops to a square and resamples bilinearly to `canvas_side`.
/// Colour inputs stay RGB; everything else becomes 8-bit grayscale.
pub fn preprocess(image: &DynamicImage, canvas_side: u32) -> Result<CanonicalImage, CanvasError> {
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 || canvas_side == 0 {
        return Err(CanvasError::EmptyImage);
    }
    let (channels, src) = if image.color().has_color() {
        (Channels::Rgb, image.to_rgb8().into_raw())
    } else {
        (Channels::Gray, image.to_luma8().into_raw())
    };
    let nc = channels.count();
    let (x0, y0, side) = central_crop(w, h);
    let n = canvas_side;
    let xs: Vec<_> = (0..n).map(|x| bilinear_source(x, side, n)).collect();
    let mut data = Vec::with_capacity(n as usize * n as usize * nc);
    let at = |x: usize, y: usize, c: usize| src[((y + y0 as usize) * w as usize + x + x0 as usize) * nc + c] as f64;
    for y in 0..n {
        let (y_lo, y_hi, fy) = bilinear_source(y, side, n);
        for &(x_lo, x_hi, fx) in &xs {
            for c in 0..nc {
                let top = at(x_lo, y_lo, c) * (1.0 - fx) + at(x_hi, y_lo, c) * fx;
                let bottom = at(x_lo, y_hi, c) * (1.0 - fx) + at(x_hi, y_hi, c) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                data.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(CanonicalImage {
        side: n,
        channels,
        data,
    })
}

pub fn read_canonical(path: &Path, canvas_side: u32) -> Result<CanonicalImage, CanvasError> {
    let img = image::open(path).map_err(|e| CanvasError::Unreadable(format!("{}: {e}", path.display())))?;
    preprocess(&img, canvas_side)
}

/// Applies the same central crop as [`preprocess`], then nearest-neighbour
/// resampling so the result stays binary.
pub fn transform_mask(
    mask: &BinaryMask,
    native_width: u32,
    native_height: u32,
    canvas_side: u32,
) -> Result<BinaryMask, CanvasError> {
    if mask.width() != native_width || mask.height() != native_height {
        return Err(CanvasError::MaskDimensions {
            got_width: mask.width(),
            got_height: mask.height(),
            width: native_width,
            height: native_height,
        });
    }
    if native_width == 0 || native_height == 0 || canvas_side == 0 {
        return Err(CanvasError::EmptyImage);
    }
    let (x0, y0, side) = central_crop(native_width, native_height);
    let n = canvas_side as u64;
    let nearest = |dst: u32| (((2 * dst as u64 + 1) * side as u64) / (2 * n)) as u32;
    let cols: Vec<u32> = (0..canvas_side).map(|x| nearest(x) + x0).collect();
    let rows: Vec<u32> = (0..canvas_side).map(|y| nearest(y) + y0).collect();
    Ok(BinaryMask::from_fn(canvas_side, canvas_side, |x, y| {
        mask.get(cols[x as usize], rows[y as usize])
    }))
}
