use std::collections::BTreeMap;
use std::fmt;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;

use super::mask::{decode_rle, BinaryMask, RleMask};
use super::{
    AnnotationSet, ClassName, CorpusError, FrontalSubtype, IngestWarning, Pathology, RadiographRecord, Split,
    ViewPosition,
};

pub const MANIFEST_SCHEMA: &str = "gridloc.manifest.v1";
pub const SYNTHETIC_INDEX_SCHEMA: &str = "gridloc.synthetic_index.v1";

/// JSON object kept as an ordered list of pairs so duplicate keys survive
/// parsing and can be reported.
#[derive(Debug)]
struct Pairs<V>(Vec<(String, V)>);

impl<'de, V: Deserialize<'de>> Deserialize<'de> for Pairs<V> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct PairsVisitor<V>(PhantomData<V>);

        impl<'de, V: Deserialize<'de>> Visitor<'de> for PairsVisitor<V> {
            type Value = Pairs<V>;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, V>()? {
                    out.push((k, v));
                }
                Ok(Pairs(out))
            }
        }

        deserializer.deserialize_map(PairsVisitor(PhantomData))
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Counts {
    Runs(Vec<u32>),
    Compressed(String),
}

/// `size` is `[height, width]`, following the COCO convention.
#[derive(Debug, Deserialize)]
struct RleEntry {
    size: [u32; 2],
    counts: Counts,
}

#[derive(Debug, Deserialize)]
struct RecordEntry {
    image_id: String,
    patient_id: Option<String>,
    split: Option<String>,
    view: Option<String>,
    image_path: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    #[serde(default)]
    schema: Option<String>,
    #[serde(default)]
    split: Option<String>,
    #[serde(default)]
    records: Vec<RecordEntry>,
    annotations: Pairs<Pairs<RleEntry>>,
}

fn malformed(path: &Path, message: impl Into<String>) -> CorpusError {
    CorpusError::Malformed {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn image_dimensions(image_id: &str, path: &Path) -> Result<(u32, u32), CorpusError> {
    if !path.is_file() {
        return Err(CorpusError::MissingImage {
            image_id: image_id.to_string(),
            path: path.to_path_buf(),
        });
    }
    image::image_dimensions(path).map_err(|e| CorpusError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Metadata derived from a CheXpert-style id such as
/// `patient64541_study1_view1_frontal`.
fn derive_from_id(image_id: &str) -> (String, ViewPosition, PathBuf) {
    let parts: Vec<&str> = image_id.splitn(3, '_').collect();
    let view = if image_id.to_ascii_lowercase().contains("lateral") {
        ViewPosition::Lateral
    } else {
        ViewPosition::Frontal(FrontalSubtype::Unknown)
    };
    match parts.as_slice() {
        [patient, study, view_part] => (
            patient.to_string(),
            view,
            PathBuf::from(patient).join(study).join(format!("{view_part}.jpg")),
        ),
        _ => (image_id.to_string(), view, PathBuf::from(format!("{image_id}.jpg"))),
    }
}

/// Resolves an image reference, falling back to a `.png` sibling when the
/// `.jpg` default does not exist.
fn resolve_image(root: &Path, rel: &Path) -> PathBuf {
    let p = root.join(rel);
    if !p.exists() && p.extension().is_some_and(|e| e == "jpg") {
        let alt = p.with_extension("png");
        if alt.exists() {
            return alt;
        }
    }
    p
}

/// Loads a JSON run-length manifest.
///
/// Two shapes are accepted: the bare published shape, an object mapping
/// image id to an object of class name to `{size: [h, w], counts}`, and an
/// envelope `{schema, split, records, annotations}` where `annotations` has
/// the bare shape and `records` optionally pins per-image metadata. `counts`
/// may be a list of column-major run lengths or the COCO compressed string.
/// Images without a record entry get their patient, view and relative path
/// from the id. `default_split` applies where neither the record nor the
/// envelope names one.
pub fn load_manifest(
    manifest_path: &Path,
    images_root: &Path,
    default_split: Split,
) -> Result<AnnotationSet, CorpusError> {
    let text = read_text(manifest_path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(manifest_path, e.to_string()))?;
    let envelope = if value.get("annotations").is_some() {
        serde_json::from_str::<Envelope>(&text).map_err(|e| malformed(manifest_path, e.to_string()))?
    } else {
        let annotations = serde_json::from_str::<Pairs<Pairs<RleEntry>>>(&text)
            .map_err(|e| malformed(manifest_path, e.to_string()))?;
        Envelope {
            schema: None,
            split: None,
            records: Vec::new(),
            annotations,
        }
    };
    if let Some(schema) = &envelope.schema {
        if schema != MANIFEST_SCHEMA {
            return Err(malformed(
                manifest_path,
                format!("unsupported schema {schema:?}, expected {MANIFEST_SCHEMA:?}"),
            ));
        }
    }
    let default_split = match &envelope.split {
        Some(s) => s.parse().map_err(|e: String| malformed(manifest_path, e))?,
        None => default_split,
    };

    let mut overrides: BTreeMap<String, RecordEntry> = BTreeMap::new();
    for r in envelope.records {
        let id = r.image_id.clone();
        if overrides.insert(id.clone(), r).is_some() {
            return Err(CorpusError::DuplicateImage(id));
        }
    }

    let mut records = Vec::new();
    let mut masks = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut seen_images = BTreeMap::new();

    for (image_id, classes) in envelope.annotations.0 {
        if seen_images.insert(image_id.clone(), ()).is_some() {
            return Err(CorpusError::DuplicateImage(image_id));
        }
        let (derived_patient, derived_view, derived_path) = derive_from_id(&image_id);
        let over = overrides.remove(&image_id);
        let patient_id = over
            .as_ref()
            .and_then(|o| o.patient_id.clone())
            .unwrap_or(derived_patient);
        let view = match over.as_ref().and_then(|o| o.view.as_deref()) {
            Some(v) => v.parse().map_err(|e: String| malformed(manifest_path, e))?,
            None => derived_view,
        };
        let split = match over.as_ref().and_then(|o| o.split.as_deref()) {
            Some(s) => s.parse().map_err(|e: String| malformed(manifest_path, e))?,
            None => default_split,
        };
        let rel = over.as_ref().and_then(|o| o.image_path.clone()).unwrap_or(derived_path);
        let image_path = resolve_image(images_root, &rel);
        let (native_width, native_height) = image_dimensions(&image_id, &image_path)?;

        for (class, entry) in classes.0 {
            let pathology = match Pathology::classify(&class) {
                ClassName::Known(p) => p,
                ClassName::SupportDevices => {
                    let w = IngestWarning::SupportDevicesSkipped {
                        image_id: image_id.clone(),
                    };
                    log::warn!("{w}");
                    warnings.push(w);
                    continue;
                }
                ClassName::Unknown(name) => {
                    let w = IngestWarning::UnknownPathology {
                        image_id: image_id.clone(),
                        name,
                    };
                    log::warn!("{w}");
                    warnings.push(w);
                    continue;
                }
            };
            let [height, width] = entry.size;
            let rle_err = |source| CorpusError::Rle {
                image_id: image_id.clone(),
                pathology: pathology.to_string(),
                source,
            };
            let rle = match entry.counts {
                Counts::Runs(counts) => RleMask { width, height, counts },
                Counts::Compressed(s) => RleMask::from_compressed(width, height, &s).map_err(rle_err)?,
            };
            let mask = decode_rle(&rle).map_err(rle_err)?;
            if (width, height) != (native_width, native_height) {
                return Err(CorpusError::DimensionMismatch {
                    image_id: image_id.clone(),
                    pathology: pathology.to_string(),
                    mask_width: width,
                    mask_height: height,
                    image_width: native_width,
                    image_height: native_height,
                });
            }
            if masks.insert((image_id.clone(), pathology), mask).is_some() {
                return Err(CorpusError::DuplicateMask {
                    image_id: image_id.clone(),
                    pathology: pathology.to_string(),
                });
            }
        }

        records.push(RadiographRecord {
            image_id,
            patient_id,
            split,
            view,
            image_path,
            native_width,
            native_height,
        });
    }
    if let Some(id) = overrides.keys().next() {
        return Err(malformed(
            manifest_path,
            format!("record {id} has no annotations entry"),
        ));
    }

    AnnotationSet::new(records, masks, warnings)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    image_id: String,
    #[serde(default)]
    patient_id: Option<String>,
    split: String,
    view: String,
    image: PathBuf,
    masks: Pairs<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    schema: String,
    images: Vec<IndexEntry>,
}

pub fn read_mask_png(path: &Path) -> Result<BinaryMask, CorpusError> {
    let img = image::open(path).map_err(|e| CorpusError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    let bits = luma.as_raw().iter().map(|&v| v != 0).collect();
    Ok(BinaryMask::new(w, h, bits).expect("buffer matches dimensions"))
}

/// Loads the directory-based synthetic format: an index JSON listing image
/// path, view, split and per-pathology mask image paths, all relative to the
/// index file's directory. Mask images are read as single channel; any
/// nonzero sample is foreground.
pub fn load_synthetic_index(index_path: &Path) -> Result<AnnotationSet, CorpusError> {
    let text = read_text(index_path)?;
    let index: Index = serde_json::from_str(&text).map_err(|e| malformed(index_path, e.to_string()))?;
    if index.schema != SYNTHETIC_INDEX_SCHEMA {
        return Err(malformed(
            index_path,
            format!(
                "unsupported schema {:?}, expected {SYNTHETIC_INDEX_SCHEMA:?}",
                index.schema
            ),
        ));
    }
    let root = index_path.parent().unwrap_or(Path::new("."));

    let mut records = Vec::new();
    let mut masks = BTreeMap::new();
    let mut warnings = Vec::new();
    for entry in index.images {
        let image_path = root.join(&entry.image);
        let (native_width, native_height) = image_dimensions(&entry.image_id, &image_path)?;
        let view = entry.view.parse().map_err(|e: String| malformed(index_path, e))?;
        let split = entry.split.parse().map_err(|e: String| malformed(index_path, e))?;
        for (class, mask_rel) in entry.masks.0 {
            let pathology = match Pathology::classify(&class) {
                ClassName::Known(p) => p,
                ClassName::SupportDevices => {
                    let w = IngestWarning::SupportDevicesSkipped {
                        image_id: entry.image_id.clone(),
                    };
                    log::warn!("{w}");
                    warnings.push(w);
                    continue;
                }
                ClassName::Unknown(name) => {
                    let w = IngestWarning::UnknownPathology {
                        image_id: entry.image_id.clone(),
                        name,
                    };
                    log::warn!("{w}");
                    warnings.push(w);
                    continue;
                }
            };
            let mask_path = root.join(&mask_rel);
            if !mask_path.is_file() {
                return Err(CorpusError::Io {
                    path: mask_path,
                    source: std::io::Error::from(std::io::ErrorKind::NotFound),
                });
            }
            let mask = read_mask_png(&mask_path)?;
            if masks.insert((entry.image_id.clone(), pathology), mask).is_some() {
                return Err(CorpusError::DuplicateMask {
                    image_id: entry.image_id.clone(),
                    pathology: pathology.to_string(),
                });
            }
        }
        records.push(RadiographRecord {
            patient_id: entry.patient_id.unwrap_or_else(|| entry.image_id.clone()),
            image_id: entry.image_id,
            split,
            view,
            image_path,
            native_width,
            native_height,
        });
    }
    AnnotationSet::new(records, masks, warnings)
}
