//! Annotated radiograph corpora: records, per-finding masks, and task
//! selection.

mod manifest;
pub mod mask;
mod pathology;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::canvas::GridSpec;
pub use manifest::{load_manifest, load_synthetic_index, read_mask_png, MANIFEST_SCHEMA, SYNTHETIC_INDEX_SCHEMA};
pub use mask::{decode_rle, encode_rle, BinaryMask, MaskError, RleMask};
pub use pathology::{ClassName, ParsePathologyError, Pathology};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed document {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("invalid mask for ({image_id}, {pathology}): {source}")]
    Rle {
        image_id: String,
        pathology: String,
        #[source]
        source: MaskError,
    },
    #[error("image file for {image_id} not found at {path}")]
    MissingImage { image_id: String, path: PathBuf },
    #[error("cannot read image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error(
        "mask for ({image_id}, {pathology}) is {mask_width}x{mask_height} but the image is {image_width}x{image_height}"
    )]
    DimensionMismatch {
        image_id: String,
        pathology: String,
        mask_width: u32,
        mask_height: u32,
        image_width: u32,
        image_height: u32,
    },
    #[error("duplicate mask entry for ({image_id}, {pathology})")]
    DuplicateMask { image_id: String, pathology: String },
    #[error("duplicate image id {0}")]
    DuplicateImage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "validation" | "val" | "valid" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrontalSubtype {
    Ap,
    Pa,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "subtype", rename_all = "lowercase")]
pub enum ViewPosition {
    Frontal(FrontalSubtype),
    Lateral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Frontal,
    Lateral,
}

impl ViewPosition {
    pub fn kind(self) -> ViewKind {
        match self {
            ViewPosition::Frontal(_) => ViewKind::Frontal,
            ViewPosition::Lateral => ViewKind::Lateral,
        }
    }

    pub fn is_frontal(self) -> bool {
        self.kind() == ViewKind::Frontal
    }

    /// The word substituted into prompts.
    pub fn word(self) -> &'static str {
        match self {
            ViewPosition::Frontal(_) => "frontal",
            ViewPosition::Lateral => "lateral",
        }
    }
}

impl FromStr for ViewPosition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "frontal" => Ok(ViewPosition::Frontal(FrontalSubtype::Unknown)),
            "ap" => Ok(ViewPosition::Frontal(FrontalSubtype::Ap)),
            "pa" => Ok(ViewPosition::Frontal(FrontalSubtype::Pa)),
            "lateral" | "ll" | "lat" => Ok(ViewPosition::Lateral),
            other => Err(format!("unknown view position {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadiographRecord {
    pub image_id: String,
    pub patient_id: String,
    pub split: Split,
    pub view: ViewPosition,
    pub image_path: PathBuf,
    pub native_width: u32,
    pub native_height: u32,
}

/// Non-fatal ingestion diagnostics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum IngestWarning {
    SupportDevicesSkipped { image_id: String },
    UnknownPathology { image_id: String, name: String },
}

impl fmt::Display for IngestWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IngestWarning::SupportDevicesSkipped { image_id } => {
                write!(f, "{image_id}: skipping Support Devices annotation")
            }
            IngestWarning::UnknownPathology { image_id, name } => {
                write!(f, "{image_id}: skipping unknown class {name:?}")
            }
        }
    }
}

/// A validated corpus. Immutable after loading.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    records: Vec<RadiographRecord>,
    index: BTreeMap<String, usize>,
    masks: BTreeMap<(String, Pathology), BinaryMask>,
    warnings: Vec<IngestWarning>,
}

impl AnnotationSet {
    /// Builds a set, checking id uniqueness and mask/record consistency.
    pub fn new(
        records: Vec<RadiographRecord>,
        masks: BTreeMap<(String, Pathology), BinaryMask>,
        warnings: Vec<IngestWarning>,
    ) -> Result<Self, CorpusError> {
        let mut index = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.image_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateImage(r.image_id.clone()));
            }
        }
        for ((image_id, pathology), mask) in &masks {
            let Some(&i) = index.get(image_id) else {
                return Err(CorpusError::Malformed {
                    path: PathBuf::new(),
                    message: format!("mask references unknown image {image_id}"),
                });
            };
            let r = &records[i];
            if mask.width() != r.native_width || mask.height() != r.native_height {
                return Err(CorpusError::DimensionMismatch {
                    image_id: image_id.clone(),
                    pathology: pathology.to_string(),
                    mask_width: mask.width(),
                    mask_height: mask.height(),
                    image_width: r.native_width,
                    image_height: r.native_height,
                });
            }
        }
        Ok(Self {
            records,
            index,
            masks,
            warnings,
        })
    }

    pub fn records(&self) -> &[RadiographRecord] {
        &self.records
    }

    pub fn record(&self, image_id: &str) -> Option<&RadiographRecord> {
        self.index.get(image_id).map(|&i| &self.records[i])
    }

    pub fn mask(&self, image_id: &str, pathology: Pathology) -> Option<&BinaryMask> {
        self.masks.get(&(image_id.to_string(), pathology))
    }

    pub fn masks(&self) -> impl Iterator<Item = (&str, Pathology, &BinaryMask)> {
        self.masks.iter().map(|((id, p), m)| (id.as_str(), *p, m))
    }

    pub fn mask_count(&self) -> usize {
        self.masks.len()
    }

    pub fn warnings(&self) -> &[IngestWarning] {
        &self.warnings
    }
}

/// One (image, pathology) localization query under a grid layout.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocalizationTask {
    pub image_id: String,
    pub pathology: Pathology,
    pub view: ViewPosition,
    pub grid: GridSpec,
}

#[derive(Debug, Clone, Default)]
pub struct TaskFilter {
    pub split: Option<Split>,
    pub view: Option<ViewKind>,
    pub pathologies: Option<Vec<Pathology>>,
}

/// One task per (image, pathology) mask passing the filters, ordered by image
/// id and then pathology name.
pub fn select_tasks(set: &AnnotationSet, filter: &TaskFilter, grid: GridSpec) -> Vec<LocalizationTask> {
    // BTreeMap keys are already (image_id, pathology) ordered, and pathology
    // order is alphabetical by display name.
    set.masks
        .keys()
        .filter_map(|(image_id, pathology)| {
            let record = set.record(image_id)?;
            if filter.split.is_some_and(|s| s != record.split) {
                return None;
            }
            if filter.view.is_some_and(|v| v != record.view.kind()) {
                return None;
            }
            if let Some(ps) = &filter.pathologies {
                if !ps.contains(pathology) {
                    return None;
                }
            }
            Some(LocalizationTask {
                image_id: image_id.clone(),
                pathology: *pathology,
                view: record.view,
                grid,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, view: ViewPosition) -> RadiographRecord {
        RadiographRecord {
            image_id: id.into(),
            patient_id: "p".into(),
            split: Split::Test,
            view,
            image_path: PathBuf::from(format!("{id}.png")),
            native_width: 4,
            native_height: 4,
        }
    }

    fn set(ids: &[(&str, ViewPosition, &[Pathology])]) -> AnnotationSet {
        let records = ids.iter().map(|(id, v, _)| record(id, *v)).collect();
        let mut masks = BTreeMap::new();
        for (id, _, ps) in ids {
            for p in *ps {
                masks.insert((id.to_string(), *p), BinaryMask::filled(4, 4));
            }
        }
        AnnotationSet::new(records, masks, vec![]).unwrap()
    }

    const FRONTAL: ViewPosition = ViewPosition::Frontal(FrontalSubtype::Unknown);

    #[test]
    fn one_task_per_present_pathology() {
        let s = set(&[(
            "img1",
            FRONTAL,
            &[Pathology::Edema, Pathology::Cardiomegaly, Pathology::LungOpacity],
        )]);
        let tasks = select_tasks(&s, &TaskFilter::default(), GridSpec::default());
        assert_eq!(tasks.len(), 3);
        let ps: Vec<_> = tasks.iter().map(|t| t.pathology).collect();
        assert_eq!(
            ps,
            vec![Pathology::Cardiomegaly, Pathology::Edema, Pathology::LungOpacity]
        );
    }

    #[test]
    fn frontal_filter_on_lateral_corpus_is_empty() {
        let s = set(&[("a", ViewPosition::Lateral, &[Pathology::Edema])]);
        let filter = TaskFilter {
            view: Some(ViewKind::Frontal),
            ..Default::default()
        };
        assert!(select_tasks(&s, &filter, GridSpec::default()).is_empty());
    }

    #[test]
    fn four_by_two_gives_eight_ordered_tasks() {
        let two = &[Pathology::Pneumothorax, Pathology::Atelectasis][..];
        let s = set(&[
            ("d", FRONTAL, two),
            ("b", ViewPosition::Lateral, two),
            ("a", FRONTAL, two),
            ("c", FRONTAL, two),
        ]);
        let tasks = select_tasks(&s, &TaskFilter::default(), GridSpec::default());
        let keys: Vec<_> = tasks
            .iter()
            .map(|t| format!("{}:{}", t.image_id, t.pathology.slug()))
            .collect();
        assert_eq!(
            keys,
            [
                "a:atelectasis",
                "a:pneumothorax",
                "b:atelectasis",
                "b:pneumothorax",
                "c:atelectasis",
                "c:pneumothorax",
                "d:atelectasis",
                "d:pneumothorax"
            ]
        );
    }

    #[test]
    fn pathology_filter_applies() {
        let s = set(&[("a", FRONTAL, &[Pathology::Edema, Pathology::Cardiomegaly])]);
        let filter = TaskFilter {
            pathologies: Some(vec![Pathology::Edema]),
            ..Default::default()
        };
        let tasks = select_tasks(&s, &filter, GridSpec::default());
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].pathology, Pathology::Edema);
    }

    #[test]
    fn rejects_mask_with_wrong_dimensions() {
        let mut masks = BTreeMap::new();
        masks.insert(("a".to_string(), Pathology::Edema), BinaryMask::filled(3, 4));
        let err = AnnotationSet::new(vec![record("a", FRONTAL)], masks, vec![]).unwrap_err();
        assert!(matches!(err, CorpusError::DimensionMismatch { .. }));
    }

    #[test]
    fn view_parsing_defaults_to_unknown_frontal() {
        assert_eq!("Frontal".parse::<ViewPosition>().unwrap(), FRONTAL);
        assert_eq!(
            "PA".parse::<ViewPosition>().unwrap(),
            ViewPosition::Frontal(FrontalSubtype::Pa)
        );
        assert_eq!("lateral".parse::<ViewPosition>().unwrap(), ViewPosition::Lateral);
    }
}
