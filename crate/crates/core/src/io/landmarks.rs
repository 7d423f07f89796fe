//! Per-case landmark files:
//! `{"case_id": str, "landmarks": [{"name": str, "position_mm": [x, y, z]}, ...]}`.
//!
//! Prediction files use the same schema with an extra optional `confidence` per landmark.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LandmarkSet, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkEntry {
    pub name: String,
    pub position_mm: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkFile {
    pub case_id: String,
    pub landmarks: Vec<LandmarkEntry>,
}

impl LandmarkFile {
    pub fn from_set(set: &LandmarkSet, confidences: Option<&[f64]>) -> Self {
        LandmarkFile {
            case_id: set.case_id.clone(),
            landmarks: set
                .iter()
                .enumerate()
                .map(|(i, (name, p))| LandmarkEntry {
                    name: name.to_string(),
                    position_mm: p,
                    confidence: confidences.map(|c| c[i]),
                })
                .collect(),
        }
    }

    pub fn to_set(&self) -> Result<LandmarkSet> {
        LandmarkSet::new(
            self.case_id.clone(),
            self.landmarks.iter().map(|l| l.name.clone()).collect(),
            self.landmarks.iter().map(|l| l.position_mm).collect(),
        )
    }
}

pub fn read(path: &Path) -> Result<LandmarkSet> {
    let file: LandmarkFile = super::read_json(path)?;
    if file.case_id.is_empty() {
        return Err(Error::format(path, "empty case_id"));
    }
    file.to_set()
}

pub fn write(path: &Path, set: &LandmarkSet, confidences: Option<&[f64]>) -> Result<()> {
    super::write_json(path, &LandmarkFile::from_set(set, confidences))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_documented_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"case_id": "c7", "landmarks": [{"name": "L1", "position_mm": [10.0, 20.0, 30.0]}]}"#)
            .unwrap();
        let set = read(&p).unwrap();
        assert_eq!(set.case_id, "c7");
        assert_eq!(set.position("L1"), Some([10.0, 20.0, 30.0]));

        write(&p, &set, Some(&[0.75])).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"confidence\": 0.75"));
        assert_eq!(read(&p).unwrap(), set);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(
            &p,
            r#"{"case_id": "c", "landmarks": [{"name": "A", "position_mm": [0,0,0]}, {"name": "A", "position_mm": [1,1,1]}]}"#,
        )
        .unwrap();
        assert!(read(&p).is_err());
    }
}
