//! Dataset directory layout:
//!
//! ```text
//! <root>/dataset.json
//! <root>/imagesTr/<case>.nii.gz   <root>/landmarksTr/<case>.json
//! <root>/imagesTs/<case>.nii.gz   <root>/landmarksTs/<case>.json
//! ```
//!
//! `dataset.json` is `{name, modality: "CT"|"other", classes: [str], biometry?: [[name, A, B]]}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LandmarkSet;
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "other")]
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub modality: Modality,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub biometry: Option<Vec<[String; 3]>>,
}

impl DatasetDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("dataset declares no landmark classes".into()));
        }
        let mut sorted = self.classes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.classes.len() {
            return Err(Error::Config("dataset class list has duplicates".into()));
        }
        for [m, a, b] in self.biometry.iter().flatten() {
            for n in [a, b] {
                if !self.classes.contains(n) {
                    return Err(Error::Config(format!("biometry {m} references unknown class {n}")));
                }
            }
        }
        Ok(())
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }
}

/// One case: an image on disk and, for training/evaluation, its landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub image_path: PathBuf,
    pub landmarks: Option<LandmarkSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn images_dir(self) -> &'static str {
        match self {
            Split::Train => "imagesTr",
            Split::Test => "imagesTs",
        }
    }

    pub fn landmarks_dir(self) -> &'static str {
        match self {
            Split::Train => "landmarksTr",
            Split::Test => "landmarksTs",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub descriptor: DatasetDescriptor,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let descriptor: DatasetDescriptor = io::read_json(&root.join("dataset.json"))?;
        descriptor.validate()?;
        Ok(Dataset { root: root.to_path_buf(), descriptor })
    }

    pub fn classes(&self) -> &[String] {
        &self.descriptor.classes
    }

    /// Cases of a split, sorted by id. Landmark files are optional per case.
    pub fn cases(&self, split: Split) -> Result<Vec<CaseRecord>> {
        list_cases(&self.root.join(split.images_dir()), &self.root.join(split.landmarks_dir()))
    }
}

pub fn list_cases(images_dir: &Path, landmarks_dir: &Path) -> Result<Vec<CaseRecord>> {
    if !images_dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut cases = Vec::new();
    let entries = fs::read_dir(images_dir).map_err(|e| Error::io(images_dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(images_dir, e))?.path();
        let Some(stem) = io::volume_stem(&path) else { continue };
        if stem.starts_with(".tmp-") {
            continue;
        }
        let lm_path = landmarks_dir.join(format!("{stem}.json"));
        let landmarks = if lm_path.is_file() { Some(io::landmarks::read(&lm_path)?) } else { None };
        cases.push(CaseRecord { case_id: stem, image_path: path, landmarks });
    }
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_json_schema() {
        let json = r#"{"name": "toy", "modality": "CT", "classes": ["a", "b"], "biometry": [["len", "a", "b"]]}"#;
        let d: DatasetDescriptor = serde_json::from_str(json).unwrap();
        assert_eq!(d.modality, Modality::Ct);
        d.validate().unwrap();
        let other: DatasetDescriptor =
            serde_json::from_str(r#"{"name": "x", "modality": "other", "classes": ["a"]}"#).unwrap();
        assert_eq!(other.modality, Modality::Other);
        assert!(!serde_json::to_string(&other).unwrap().contains("biometry"));
    }

    #[test]
    fn descriptor_rejects_bad_biometry() {
        let d = DatasetDescriptor {
            name: "x".into(),
            modality: Modality::Other,
            classes: vec!["a".into()],
            biometry: Some(vec![["m".into(), "a".into(), "zz".into()]]),
        };
        assert!(d.validate().is_err());
    }
}
