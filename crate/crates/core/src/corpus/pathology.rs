use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// The nine localizable finding classes. Support devices are not a pathology
/// and are rejected at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pathology {
    Atelectasis,
    Cardiomegaly,
    Consolidation,
    Edema,
    EnlargedCardiomediastinum,
    LungLesion,
    LungOpacity,
    PleuralEffusion,
    Pneumothorax,
}

/// Outcome of resolving a free-form class name from an annotation file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClassName {
    Known(Pathology),
    SupportDevices,
    Unknown(String),
}

impl Pathology {
    pub const ALL: [Pathology; 9] = [
        Pathology::Atelectasis,
        Pathology::Cardiomegaly,
        Pathology::Consolidation,
        Pathology::Edema,
        Pathology::EnlargedCardiomediastinum,
        Pathology::LungLesion,
        Pathology::LungOpacity,
        Pathology::PleuralEffusion,
        Pathology::Pneumothorax,
    ];

    /// Human-readable name, as substituted into prompts and reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Pathology::Atelectasis => "Atelectasis",
            Pathology::Cardiomegaly => "Cardiomegaly",
            Pathology::Consolidation => "Consolidation",
            Pathology::Edema => "Edema",
            Pathology::EnlargedCardiomediastinum => "Enlarged Cardiomediastinum",
            Pathology::LungLesion => "Lung Lesion",
            Pathology::LungOpacity => "Lung Opacity",
            Pathology::PleuralEffusion => "Pleural Effusion",
            Pathology::Pneumothorax => "Pneumothorax",
        }
    }

    /// Lower-case identifier used for file names.
    pub fn slug(self) -> &'static str {
        match self {
            Pathology::Atelectasis => "atelectasis",
            Pathology::Cardiomegaly => "cardiomegaly",
            Pathology::Consolidation => "consolidation",
            Pathology::Edema => "edema",
            Pathology::EnlargedCardiomediastinum => "enlarged_cardiomediastinum",
            Pathology::LungLesion => "lung_lesion",
            Pathology::LungOpacity => "lung_opacity",
            Pathology::PleuralEffusion => "pleural_effusion",
            Pathology::Pneumothorax => "pneumothorax",
        }
    }

    /// Resolves a class name leniently: case, spaces, underscores and hyphens
    /// are ignored, so "Pleural Effusion", "pleural_effusion" and
    /// "PleuralEffusion" all resolve to the same class.
    pub fn classify(name: &str) -> ClassName {
        let key: String = name
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        if key == "supportdevices" || key == "supportdevice" {
            return ClassName::SupportDevices;
        }
        Pathology::ALL
            .iter()
            .copied()
            .find(|p| p.slug().replace('_', "") == key)
            .map(ClassName::Known)
            .unwrap_or_else(|| ClassName::Unknown(name.to_string()))
    }
}

impl fmt::Display for Pathology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("not a localizable pathology: {0:?}")]
pub struct ParsePathologyError(pub String);

impl FromStr for Pathology {
    type Err = ParsePathologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match Pathology::classify(s) {
            ClassName::Known(p) => Ok(p),
            _ => Err(ParsePathologyError(s.to_string())),
        }
    }
}

impl Serialize for Pathology {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.display_name())
    }
}

impl<'de> Deserialize<'de> for Pathology {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
