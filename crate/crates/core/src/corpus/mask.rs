//! Binary segmentation masks and their column-major run-length encoding.
//!
//! Runs alternate background/foreground starting with background, scanning
//! each column top to bottom before moving right. This is the layout used by
//! COCO-style annotation files, including the compressed string form.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MaskError {
    #[error("run lengths sum to {sum}, expected {expected} ({width}x{height})")]
    CountMismatch {
        sum: u64,
        expected: u64,
        width: u32,
        height: u32,
    },
    #[error("mask has {got} pixels, expected {expected}")]
    BitCount { got: usize, expected: usize },
    #[error("mask dimensions must be positive, got {width}x{height}")]
    ZeroSize { width: u32, height: u32 },
    #[error("malformed compressed run-length string: {0}")]
    BadCompressed(String),
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, MaskError> {
        let expected = width as usize * height as usize;
        if bits.len() != expected {
            return Err(MaskError::BitCount {
                got: bits.len(),
                expected,
            });
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn filled(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = value;
    }

    pub fn count_ones(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Foreground pixels inside the inclusive rectangle.
    pub fn count_in(&self, row_start: u32, row_end: u32, col_start: u32, col_end: u32) -> u64 {
        let w = self.width as usize;
        (row_start..=row_end)
            .map(|y| {
                let base = y as usize * w;
                self.bits[base + col_start as usize..=base + col_end as usize]
                    .iter()
                    .filter(|&&b| b)
                    .count() as u64
            })
            .sum()
    }
}

/// Column-major, background-first run-length encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn validate(&self) -> Result<(), MaskError> {
        let sum: u64 = self.counts.iter().map(|&c| c as u64).sum();
        let expected = self.width as u64 * self.height as u64;
        if sum != expected {
            return Err(MaskError::CountMismatch {
                sum,
                expected,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    /// Equivalent run list without zero-length interior or trailing runs.
    /// A leading zero is kept only when the mask starts with foreground.
    pub fn canonical(&self) -> RleMask {
        let mut out: Vec<u32> = Vec::with_capacity(self.counts.len());
        // Parity of `out.len()` tracks the value of the next run to push.
        for (i, &c) in self.counts.iter().enumerate() {
            let value_is_fg = i % 2 == 1;
            if c == 0 {
                continue;
            }
            let next_is_fg = out.len() % 2 == 1;
            if value_is_fg == next_is_fg {
                out.push(c);
            } else if let Some(last) = out.last_mut() {
                *last += c;
            } else {
                // Foreground first: emit an explicit empty background run.
                out.push(0);
                out.push(c);
            }
        }
        if out.is_empty() {
            out.push(0);
        }
        RleMask {
            width: self.width,
            height: self.height,
            counts: out,
        }
    }

    /// Parses the COCO compressed string form (LEB128-like, 6 bits per char,
    /// delta-coded against the run two positions back).
    pub fn from_compressed(width: u32, height: u32, s: &str) -> Result<Self, MaskError> {
        let bytes = s.as_bytes();
        let mut counts: Vec<i64> = Vec::new();
        let mut p = 0usize;
        while p < bytes.len() {
            let mut x: i64 = 0;
            let mut k = 0u32;
            let mut more = true;
            while more {
                let Some(&b) = bytes.get(p) else {
                    return Err(MaskError::BadCompressed("truncated run".into()));
                };
                if !(48..48 + 64).contains(&b) {
                    return Err(MaskError::BadCompressed(format!(
                        "byte {b:#x} at offset {p} out of alphabet"
                    )));
                }
                if k > 12 {
                    return Err(MaskError::BadCompressed("run length overflow".into()));
                }
                let c = (b - 48) as i64;
                x |= (c & 0x1f) << (5 * k);
                more = c & 0x20 != 0;
                p += 1;
                k += 1;
                if !more && (c & 0x10) != 0 {
                    x |= -1i64 << (5 * k);
                }
            }
            if counts.len() > 2 {
                x += counts[counts.len() - 2];
            }
            counts.push(x);
        }
        let counts = counts
            .into_iter()
            .map(|c| u32::try_from(c).map_err(|_| MaskError::BadCompressed(format!("negative run {c}"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RleMask { width, height, counts })
    }

    /// Inverse of [`RleMask::from_compressed`].
    pub fn to_compressed(&self) -> String {
        let mut s = String::new();
        for i in 0..self.counts.len() {
            let mut x = self.counts[i] as i64;
            if i > 2 {
                x -= self.counts[i - 2] as i64;
            }
            let mut more = true;
            while more {
                let mut c = x & 0x1f;
                x >>= 5;
                more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
                if more {
                    c |= 0x20;
                }
                s.push((c as u8 + 48) as char);
            }
        }
        s
    }
}

pub fn decode_rle(rle: &RleMask) -> Result<BinaryMask, MaskError> {
    if rle.width == 0 || rle.height == 0 {
        return Err(MaskError::ZeroSize {
            width: rle.width,
            height: rle.height,
        });
    }
    rle.validate()?;
    let (w, h) = (rle.width as usize, rle.height as usize);
    let mut bits = vec![false; w * h];
    let mut idx = 0usize;
    for (i, &c) in rle.counts.iter().enumerate() {
        let c = c as usize;
        if i % 2 == 1 {
            for k in idx..idx + c {
                let (col, row) = (k / h, k % h);
                bits[row * w + col] = true;
            }
        }
        idx += c;
    }
    BinaryMask::new(rle.width, rle.height, bits)
}

pub fn encode_rle(mask: &BinaryMask) -> RleMask {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for col in 0..w {
        for row in 0..h {
            let v = mask.bits[row * w + col];
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleMask {
        width: mask.width,
        height: mask.height,
        counts,
    }
}
