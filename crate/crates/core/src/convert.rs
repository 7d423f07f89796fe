//! Converters from generic landmark layouts to the internal dataset format.
//!
//! The input directory holds one image per case (`<case>.nii.gz`, `.nii` or `.raw`) and one
//! coordinate file with the same stem, either side by side or under `images/` and
//! `landmarks/` subdirectories. Coordinate files:
//!
//! * `csv_points`: `<case>.csv`, rows `name, x, y, z`; a non-numeric first row is a header.
//! * `fcsv_points`: `<case>.fcsv`, 3D Slicer markups; `#` lines are comments, columns 1-3 are
//!   x, y, z and column 11 is the label.
//! * `coordinate_json`: `<case>.json`, either `{"name": [x, y, z], ...}` or the internal
//!   landmark schema.
//!
//! Positions are world mm. With `ras_to_lps` the first two coordinates are negated.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetDescriptor, Modality, Split};
use crate::error::{Error, Result};
use crate::geometry::{LandmarkSet, Vec3};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointFormat {
    CsvPoints,
    FcsvPoints,
    CoordinateJson,
}

impl PointFormat {
    pub fn extension(self) -> &'static str {
        match self {
            PointFormat::CsvPoints => "csv",
            PointFormat::FcsvPoints => "fcsv",
            PointFormat::CoordinateJson => "json",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv_points" => Ok(PointFormat::CsvPoints),
            "fcsv_points" => Ok(PointFormat::FcsvPoints),
            "coordinate_json" => Ok(PointFormat::CoordinateJson),
            _ => Err(Error::Config(format!("unknown point format {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvertOptions {
    pub format: PointFormat,
    pub name: String,
    pub modality: Modality,
    pub ras_to_lps: bool,
}

/// One dropped or renamed entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub case_id: String,
    pub action: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionLog {
    pub format: PointFormat,
    pub ras_to_lps: bool,
    pub cases: Vec<String>,
    pub classes: Vec<String>,
    pub entries: Vec<LogEntry>,
}

/// Raw named points parsed from one coordinate file, in file order.
pub type RawPoints = Vec<(String, Vec3)>;

fn parse_f64(s: &str, path: &Path, line: usize) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::format(path, format!("line {line}: {s:?} is not a number")))
}

pub fn parse_csv_points(path: &Path) -> Result<RawPoints> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if rec.len() < 4 {
            return Err(Error::format(path, format!("line {}: expected name,x,y,z", i + 1)));
        }
        if i == 0 && rec[1].parse::<f64>().is_err() {
            continue;
        }
        let p = [parse_f64(&rec[1], path, i + 1)?, parse_f64(&rec[2], path, i + 1)?, parse_f64(&rec[3], path, i + 1)?];
        out.push((rec[0].to_string(), p));
    }
    Ok(out)
}

pub fn parse_fcsv_points(path: &Path) -> Result<RawPoints> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        if rec.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        if rec.len() < 12 {
            return Err(Error::format(path, format!("row {}: {} columns, fcsv needs ≥ 12", i + 1, rec.len())));
        }
        let p = [parse_f64(&rec[1], path, i + 1)?, parse_f64(&rec[2], path, i + 1)?, parse_f64(&rec[3], path, i + 1)?];
        out.push((rec[11].to_string(), p));
    }
    Ok(out)
}

pub fn parse_coordinate_json(path: &Path) -> Result<RawPoints> {
    let value: serde_json::Value = io::read_json(path)?;
    if value.get("landmarks").is_some() {
        let file: io::landmarks::LandmarkFile = serde_json::from_value(value).map_err(|e| Error::json(path, e))?;
        return Ok(file.landmarks.into_iter().map(|l| (l.name, l.position_mm)).collect());
    }
    let map: serde_json::Map<String, serde_json::Value> =
        serde_json::from_value(value).map_err(|e| Error::json(path, e))?;
    map.into_iter()
        .map(|(k, v)| {
            let p: Vec3 = serde_json::from_value(v).map_err(|e| Error::json(path, e))?;
            Ok((k, p))
        })
        .collect()
}

pub fn parse_points(path: &Path, format: PointFormat) -> Result<RawPoints> {
    match format {
        PointFormat::CsvPoints => parse_csv_points(path),
        PointFormat::FcsvPoints => parse_fcsv_points(path),
        PointFormat::CoordinateJson => parse_coordinate_json(path),
    }
}

/// Trims and replaces inner whitespace so names are stable identifiers.
fn normalize_name(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join("_")
}

/// Cleans raw points into a landmark set, logging what changed.
pub fn clean_points(case_id: &str, raw: RawPoints, ras_to_lps: bool, log: &mut Vec<LogEntry>) -> Result<LandmarkSet> {
    let mut set = LandmarkSet::empty(case_id);
    for (name, mut p) in raw {
        let clean = normalize_name(&name);
        let entry = |action: &str, detail: String| LogEntry { case_id: case_id.into(), action: action.into(), detail };
        if clean.is_empty() {
            log.push(entry("dropped", format!("unnamed point at {p:?}")));
            continue;
        }
        if clean != name {
            log.push(entry("renamed", format!("{name:?} → {clean:?}")));
        }
        if p.iter().any(|v| !v.is_finite()) {
            log.push(entry("dropped", format!("{clean}: non-finite position {p:?}")));
            continue;
        }
        if set.position(&clean).is_some() {
            log.push(entry("dropped", format!("{clean}: duplicate, kept the first")));
            continue;
        }
        if ras_to_lps {
            p[0] = -p[0];
            p[1] = -p[1];
        }
        set.push(clean, p);
    }
    Ok(set)
}

fn subdir_or(dir: &Path, sub: &str) -> PathBuf {
    let d = dir.join(sub);
    if d.is_dir() {
        d
    } else {
        dir.to_path_buf()
    }
}

/// Class list as the union of names in first-seen order; errors if any case lacks one.
pub fn unify_classes(sets: &[LandmarkSet]) -> Result<Vec<String>> {
    let mut classes: Vec<String> = Vec::new();
    for s in sets {
        for (n, _) in s.iter() {
            if !classes.iter().any(|c| c == n) {
                classes.push(n.to_string());
            }
        }
    }
    let diffs: Vec<String> = sets
        .iter()
        .filter_map(|s| {
            let missing: Vec<&str> = classes.iter().filter(|c| s.position(c).is_none()).map(String::as_str).collect();
            (!missing.is_empty()).then(|| format!("{}: missing {}", s.case_id, missing.join(", ")))
        })
        .collect();
    if !diffs.is_empty() {
        return Err(Error::Conversion(format!("inconsistent class lists across cases\n  {}", diffs.join("\n  "))));
    }
    Ok(classes)
}

pub fn convert_dataset(input: &Path, opts: &ConvertOptions, output: &Path) -> Result<ConversionLog> {
    if !input.is_dir() {
        return Err(Error::Conversion(format!("{} is not a directory", input.display())));
    }
    let images_dir = subdir_or(input, "images");
    let points_dir = subdir_or(input, "landmarks");
    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    for e in fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))? {
        let path = e.map_err(|e| Error::io(&images_dir, e))?.path();
        if let Some(stem) = io::volume_stem(&path) {
            images.insert(stem, path);
        }
    }
    if images.is_empty() {
        return Err(Error::Conversion(format!("no images found in {}", images_dir.display())));
    }
    let ext = opts.format.extension();
    let mut entries = Vec::new();
    let mut sets = Vec::new();
    for case_id in images.keys() {
        let pts = points_dir.join(format!("{case_id}.{ext}"));
        if !pts.is_file() {
            return Err(Error::Conversion(format!("case {case_id}: no coordinate file {}", pts.display())));
        }
        let raw = parse_points(&pts, opts.format)?;
        sets.push(clean_points(case_id, raw, opts.ras_to_lps, &mut entries)?);
    }
    let classes = unify_classes(&sets)?;
    // Reorder every case to the shared class order.
    let sets: Vec<LandmarkSet> = sets
        .into_iter()
        .map(|s| {
            let pos = classes.iter().map(|c| s.position(c).expect("unified")).collect();
            LandmarkSet::new(s.case_id.clone(), classes.clone(), pos)
        })
        .collect::<Result<_>>()?;

    let descriptor = DatasetDescriptor {
        name: opts.name.clone(),
        modality: opts.modality,
        classes: classes.clone(),
        biometry: None,
    };
    descriptor.validate()?;
    for (set, (case_id, img)) in sets.iter().zip(&images) {
        let vol = io::read_volume(img)?;
        io::write_volume(&output.join(Split::Train.images_dir()).join(format!("{case_id}.nii.gz")), &vol)?;
        io::landmarks::write(&output.join(Split::Train.landmarks_dir()).join(format!("{case_id}.json")), set, None)?;
    }
    io::write_json(&output.join("dataset.json"), &descriptor)?;
    let log = ConversionLog {
        format: opts.format,
        ras_to_lps: opts.ras_to_lps,
        cases: images.keys().cloned().collect(),
        classes,
        entries,
    };
    io::write_json(&output.join("conversion_log.json"), &log)?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Geometry, Volume3D};

    fn opts(format: PointFormat, ras: bool) -> ConvertOptions {
        ConvertOptions { format, name: "conv".into(), modality: Modality::Other, ras_to_lps: ras }
    }

    fn image(dir: &Path, case: &str) {
        io::write_volume(&dir.join(format!("{case}.nii.gz")), &Volume3D::filled(Geometry::unit([4, 4, 4]), 1.0))
            .unwrap();
    }

    #[test]
    fn csv_row_maps_to_landmark() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "name,x,y,z\nL1, 10.0, 20.0, 30.0\n").unwrap();
        assert_eq!(parse_csv_points(&p).unwrap(), vec![("L1".to_string(), [10.0, 20.0, 30.0])]);
        fs::write(&p, "L1, 10.0, 20.0, 30.0\nL2,1,2,3\n").unwrap();
        assert_eq!(parse_csv_points(&p).unwrap().len(), 2);
        fs::write(&p, "L1, 10.0, 20.0\n").unwrap();
        assert!(parse_csv_points(&p).is_err());
    }

    const FCSV: &str = "# Markups fiducial file version = 4.11\n\
# CoordinateSystem = 0\n\
# columns = id,x,y,z,ow,ox,oy,oz,vis,sel,lock,label,desc,associatedNodeID\n\
vtkMRMLMarkupsFiducialNode_0,12.5,-3.0,40.25,0,0,0,1,1,1,0,AC,,\n\
vtkMRMLMarkupsFiducialNode_1,-7.0,8.0,-1.5,0,0,0,1,1,1,0,PC,,\n";

    #[test]
    fn fcsv_sign_flip() {
        let dir = tempfile::tempdir().unwrap();
        let inp = dir.path().join("in");
        fs::create_dir(&inp).unwrap();
        image(&inp, "s1");
        fs::write(inp.join("s1.fcsv"), FCSV).unwrap();
        let out = dir.path().join("out");
        convert_dataset(&inp, &opts(PointFormat::FcsvPoints, true), &out).unwrap();
        let lm = io::landmarks::read(&out.join("landmarksTr/s1.json")).unwrap();
        assert_eq!(lm.position("AC"), Some([-12.5, 3.0, 40.25]));
        assert_eq!(lm.position("PC"), Some([7.0, -8.0, -1.5]));
        let out2 = dir.path().join("out2");
        convert_dataset(&inp, &opts(PointFormat::FcsvPoints, false), &out2).unwrap();
        let lm = io::landmarks::read(&out2.join("landmarksTr/s1.json")).unwrap();
        assert_eq!(lm.position("AC"), Some([12.5, -3.0, 40.25]));
    }

    #[test]
    fn json_and_subdirectories() {
        let dir = tempfile::tempdir().unwrap();
        let inp = dir.path();
        fs::create_dir_all(inp.join("images")).unwrap();
        fs::create_dir_all(inp.join("landmarks")).unwrap();
        image(&inp.join("images"), "b");
        image(&inp.join("images"), "a");
        fs::write(inp.join("landmarks/a.json"), r#"{"x": [1,2,3], "y": [4,5,6]}"#).unwrap();
        fs::write(
            inp.join("landmarks/b.json"),
            r#"{"case_id": "b", "landmarks": [{"name": "y", "position_mm": [0,0,0]}, {"name": "x", "position_mm": [1,1,1]}]}"#,
        )
        .unwrap();
        let out = dir.path().join("out");
        let log = convert_dataset(inp, &opts(PointFormat::CoordinateJson, false), &out).unwrap();
        assert_eq!(log.classes, vec!["x", "y"]);
        let ds = crate::dataset::Dataset::open(&out).unwrap();
        let cases = ds.cases(Split::Train).unwrap();
        assert_eq!(cases.len(), 2);
        assert_eq!(cases[1].landmarks.as_ref().unwrap().names, vec!["x", "y"]);
        assert!(out.join("conversion_log.json").is_file());
    }

    #[test]
    fn inconsistent_classes_report_per_case_diff() {
        let dir = tempfile::tempdir().unwrap();
        let inp = dir.path();
        for (c, body) in [("c1", "A,0,0,0\nB,1,1,1\n"), ("c2", "A,0,0,0\n"), ("c3", "B,0,0,0\n")] {
            image(inp, c);
            fs::write(inp.join(format!("{c}.csv")), body).unwrap();
        }
        match convert_dataset(inp, &opts(PointFormat::CsvPoints, false), &dir.path().join("o")) {
            Err(Error::Conversion(m)) => {
                assert!(m.contains("c2: missing B"), "{m}");
                assert!(m.contains("c3: missing A"), "{m}");
                assert!(!m.contains("c1"), "{m}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            convert_dataset(dir.path(), &opts(PointFormat::CsvPoints, false), &dir.path().join("o")),
            Err(Error::Conversion(_))
        ));
    }

    #[test]
    fn cleaning_logs_renames_and_drops() {
        let mut log = Vec::new();
        let raw = vec![
            (" left eye ".to_string(), [1.0, 2.0, 3.0]),
            ("left_eye".to_string(), [9.0, 9.0, 9.0]),
            ("".to_string(), [0.0; 3]),
            ("nan".to_string(), [f64::NAN, 0.0, 0.0]),
        ];
        let set = clean_points("c", raw, false, &mut log).unwrap();
        assert_eq!(set.names, vec!["left_eye"]);
        assert_eq!(set.position("left_eye"), Some([1.0, 2.0, 3.0]));
        let actions: Vec<&str> = log.iter().map(|e| e.action.as_str()).collect();
        assert_eq!(actions, vec!["renamed", "dropped", "dropped", "dropped"]);
    }
}
