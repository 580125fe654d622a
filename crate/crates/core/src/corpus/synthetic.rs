//! Seeded synthetic corpora in the directory/index format, for offline
//! end-to-end runs and tests.
//!
//! Each image is a grayscale gradient with a brighter body ellipse; each
//! finding is one or two elliptical blobs placed inside a finding-specific
//! region of the central crop. A matching plausibility atlas (the region,
//! dilated) is written alongside.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{CorpusError, Pathology, Split, SYNTHETIC_INDEX_SCHEMA};
use crate::canvas::central_crop;
use crate::corpus::BinaryMask;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub images: usize,
    /// Findings per image, clamped to 1..=9.
    pub pathologies_per_image: usize,
    pub lateral_fraction: f64,
    /// Share of blobs drawn tiny enough that no cell reaches the overlap
    /// threshold.
    pub small_mask_fraction: f64,
    pub min_side: u32,
    pub max_side: u32,
    pub split: Split,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            images: 40,
            pathologies_per_image: 3,
            lateral_fraction: 0.15,
            small_mask_fraction: 0.05,
            min_side: 280,
            max_side: 420,
            split: Split::Test,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub index_path: PathBuf,
    pub atlas_dir: PathBuf,
}

/// Region of the central crop, as fractions `(x0, x1, y0, y1)`, where a
/// finding is drawn.
pub fn region(p: Pathology) -> (f64, f64, f64, f64) {
    match p {
        Pathology::Atelectasis => (0.15, 0.85, 0.45, 0.80),
        Pathology::Cardiomegaly => (0.38, 0.62, 0.45, 0.70),
        Pathology::Consolidation => (0.15, 0.85, 0.25, 0.80),
        Pathology::Edema => (0.20, 0.80, 0.30, 0.75),
        Pathology::EnlargedCardiomediastinum => (0.40, 0.60, 0.25, 0.60),
        Pathology::LungLesion => (0.15, 0.85, 0.20, 0.80),
        Pathology::LungOpacity => (0.15, 0.85, 0.20, 0.85),
        Pathology::PleuralEffusion => (0.10, 0.90, 0.65, 0.90),
        Pathology::Pneumothorax => (0.10, 0.90, 0.10, 0.45),
    }
}

const ATLAS_MARGIN: f64 = 0.08;

/// Plausible-region mask in the canonical frame.
pub fn atlas_mask(p: Pathology, canvas_side: u32) -> BinaryMask {
    let (x0, x1, y0, y1) = region(p);
    let s = canvas_side as f64;
    let lo = |v: f64| ((v - ATLAS_MARGIN).max(0.0) * s).floor() as u32;
    let hi = |v: f64| ((v + ATLAS_MARGIN).min(1.0) * s).ceil() as u32;
    let (ax0, ax1, ay0, ay1) = (lo(x0), hi(x1), lo(y0), hi(y1));
    BinaryMask::from_fn(canvas_side, canvas_side, |x, y| {
        x >= ax0 && x < ax1 && y >= ay0 && y < ay1
    })
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn save_gray(img: &GrayImage, path: &Path) -> Result<(), CorpusError> {
    img.save(path).map_err(|e| CorpusError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Blob {
    fn contains(&self, x: u32, y: u32) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Writes images, masks, `index.json` and `atlas/<pathology>.png` under `dir`.
pub fn generate(spec: &SyntheticSpec, dir: &Path, canvas_side: u32) -> Result<SyntheticCorpus, CorpusError> {
    for sub in ["images", "masks", "atlas"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| io_err(&dir.join(sub), e))?;
    }
    let per_image = spec.pathologies_per_image.clamp(1, Pathology::ALL.len());
    let min_side = spec.min_side.max(16);
    let max_side = spec.max_side.max(min_side);
    let mut rng = rng::seeded(spec.seed);
    let mut entries = Vec::with_capacity(spec.images);

    for i in 0..spec.images {
        let image_id = format!("syn{i:05}");
        let w = rng.random_range(min_side..=max_side);
        let h = rng.random_range(min_side..=max_side);
        let lateral = rng.random_bool(spec.lateral_fraction.clamp(0.0, 1.0));
        let (cx0, cy0, side) = central_crop(w, h);

        let mut chosen: Vec<Pathology> = sample(&mut rng, Pathology::ALL.len(), per_image)
            .into_iter()
            .map(|k| Pathology::ALL[k])
            .collect();
        chosen.sort();

        let base: u8 = rng.random_range(30..70);
        let mut img = GrayImage::from_fn(w, h, |x, y| {
            let g = base as u32 + (y * 40 / h) + (x * 20 / w);
            let bx = (x as f64 - w as f64 / 2.0) / (w as f64 * 0.38);
            let by = (y as f64 - h as f64 * 0.55) / (h as f64 * 0.42);
            let body = if bx * bx + by * by <= 1.0 { 60 } else { 0 };
            Luma([(g + body).min(255) as u8])
        });

        let mut masks = serde_json::Map::new();
        for p in &chosen {
            let (rx0, rx1, ry0, ry1) = region(*p);
            let n_blobs = if rng.random_bool(0.25) { 2 } else { 1 };
            let mut blobs = Vec::with_capacity(n_blobs);
            for _ in 0..n_blobs {
                let small = rng.random_bool(spec.small_mask_fraction.clamp(0.0, 1.0));
                let s = side as f64;
                let (rx, ry) = if small {
                    (rng.random_range(3.0..6.0), rng.random_range(3.0..6.0))
                } else {
                    (rng.random_range(0.04..0.16) * s, rng.random_range(0.04..0.16) * s)
                };
                blobs.push(Blob {
                    cx: cx0 as f64 + rng.random_range(rx0..rx1) * s,
                    cy: cy0 as f64 + rng.random_range(ry0..ry1) * s,
                    rx,
                    ry,
                });
            }
            let mask = GrayImage::from_fn(w, h, |x, y| {
                Luma([if blobs.iter().any(|b| b.contains(x, y)) { 255 } else { 0 }])
            });
            for (x, y, px) in mask.enumerate_pixels() {
                if px.0[0] != 0 {
                    let v = img.get_pixel(x, y).0[0];
                    img.put_pixel(x, y, Luma([v.saturating_add(35)]));
                }
            }
            let rel = format!("masks/{image_id}_{}.png", p.slug());
            save_gray(&mask, &dir.join(&rel))?;
            masks.insert(p.display_name().to_string(), json!(rel));
        }

        let rel_img = format!("images/{image_id}.png");
        save_gray(&img, &dir.join(&rel_img))?;
        entries.push(json!({
            "image_id": image_id,
            "patient_id": format!("pt{:05}", i / 2),
            "split": spec.split.to_string(),
            "view": if lateral { "lateral" } else { "frontal" },
            "image": rel_img,
            "masks": masks,
        }));
    }

    let index = json!({ "schema": SYNTHETIC_INDEX_SCHEMA, "images": entries });
    let index_path = dir.join("index.json");
    let text = serde_json::to_string_pretty(&index).expect("json values serialize");
    std::fs::write(&index_path, text).map_err(|e| io_err(&index_path, e))?;

    let atlas_dir = dir.join("atlas");
    for p in Pathology::ALL {
        let m = atlas_mask(p, canvas_side);
        let img = GrayImage::from_fn(canvas_side, canvas_side, |x, y| {
            Luma([if m.get(x, y) { 255 } else { 0 }])
        });
        save_gray(&img, &atlas_dir.join(format!("{}.png", p.slug())))?;
    }

    Ok(SyntheticCorpus { index_path, atlas_dir })
}
