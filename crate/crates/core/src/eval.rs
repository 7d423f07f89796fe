//! Radial errors, success detection rates, biometry errors and pooled reports.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{distance, LandmarkSet};
use crate::io;

pub const DEFAULT_THRESHOLDS: [f64; 3] = [2.0, 3.0, 4.0];

/// `(measurement, landmark A, landmark B)` triples.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BiometrySpec(pub Vec<[String; 3]>);

impl BiometrySpec {
    pub fn validate(&self, classes: &[String]) -> Result<()> {
        for [m, a, b] in &self.0 {
            for n in [a, b] {
                if !classes.contains(n) {
                    return Err(Error::Evaluation(format!("biometry {m}: unknown landmark {n}")));
                }
            }
        }
        Ok(())
    }
}

fn symmetric_difference(gt: &LandmarkSet, pred: &LandmarkSet) -> (Vec<String>, Vec<String>) {
    let g: BTreeSet<&str> = gt.names.iter().map(String::as_str).collect();
    let p: BTreeSet<&str> = pred.names.iter().map(String::as_str).collect();
    (g.difference(&p).map(|s| s.to_string()).collect(), p.difference(&g).map(|s| s.to_string()).collect())
}

/// Euclidean error per landmark name, in ground-truth order.
pub fn radial_errors(gt: &LandmarkSet, pred: &LandmarkSet) -> Result<Vec<(String, f64)>> {
    let (only_gt, only_pred) = symmetric_difference(gt, pred);
    if !only_gt.is_empty() || !only_pred.is_empty() {
        return Err(Error::Evaluation(format!(
            "case {}: landmark names differ; only in ground truth: {only_gt:?}; only in prediction: {only_pred:?}",
            gt.case_id
        )));
    }
    Ok(gt
        .iter()
        .map(|(name, g)| (name.to_string(), distance(g, pred.position(name).expect("checked above"))))
        .collect())
}

/// Percentage of errors `≤ t` for each threshold.
pub fn sdr(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::Evaluation("no errors to compute SDR over".into()));
    }
    if let Some(t) = thresholds.iter().find(|&&t| !(t > 0.0)) {
        return Err(Error::Evaluation(format!("threshold {t} must be positive")));
    }
    let n = errors.len() as f64;
    Ok(thresholds.iter().map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / n * 100.0).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiometryError {
    pub measurement: String,
    pub gt_length: f64,
    pub pred_length: f64,
    pub abs_error: f64,
}

pub fn biometry_error(gt: &LandmarkSet, pred: &LandmarkSet, spec: &BiometrySpec) -> Result<Vec<BiometryError>> {
    let get = |set: &LandmarkSet, m: &str, n: &str, which: &str| {
        set.position(n).ok_or_else(|| {
            Error::Evaluation(format!("case {}: biometry {m} needs {n}, missing from {which}", set.case_id))
        })
    };
    spec.0
        .iter()
        .map(|[m, a, b]| {
            let gl = distance(get(gt, m, a, "ground truth")?, get(gt, m, b, "ground truth")?);
            let pl = distance(get(pred, m, a, "prediction")?, get(pred, m, b, "prediction")?);
            Ok(BiometryError { measurement: m.clone(), gt_length: gl, pred_length: pl, abs_error: (pl - gl).abs() })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkError {
    pub name: String,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEvaluation {
    pub case_id: String,
    pub errors: Vec<LandmarkError>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub biometry: Vec<BiometryError>,
}

pub fn evaluate_case(
    gt: &LandmarkSet,
    pred: &LandmarkSet,
    biometry: Option<&BiometrySpec>,
    scale: f64,
) -> Result<CaseEvaluation> {
    let errors =
        radial_errors(gt, pred)?.into_iter().map(|(name, e)| LandmarkError { name, error: e / scale }).collect();
    let biometry = match biometry {
        Some(spec) => biometry_error(gt, pred, spec)?
            .into_iter()
            .map(|b| BiometryError {
                gt_length: b.gt_length / scale,
                pred_length: b.pred_length / scale,
                abs_error: b.abs_error / scale,
                ..b
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(CaseEvaluation { case_id: gt.case_id.clone(), errors, biometry })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub name: String,
    pub count: usize,
    pub mre: f64,
    pub std: f64,
    pub sdr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiometryStats {
    pub measurement: String,
    pub count: usize,
    pub mean_abs_error: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `"mm"`, or `"voxel"` when errors were divided by a voxel size.
    pub unit: String,
    pub thresholds: Vec<f64>,
    pub case_count: usize,
    pub landmark_count: usize,
    pub mre: f64,
    pub std: f64,
    pub sdr: Vec<f64>,
    pub per_class: Vec<GroupStats>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub biometry: Vec<BiometryStats>,
    pub cases: Vec<CaseEvaluation>,
}

/// Pools every landmark instance over all cases (micro aggregation).
pub fn aggregate_report(
    cases: Vec<CaseEvaluation>,
    classes: &[String],
    thresholds: &[f64],
    unit: &str,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Evaluation("no cases to aggregate".into()));
    }
    let all: Vec<f64> = cases.iter().flat_map(|c| c.errors.iter().map(|e| e.error)).collect();
    let (mre, std) = mean_std(&all);
    let sdr_all = sdr(&all, thresholds)?;
    let mut per_class = Vec::with_capacity(classes.len());
    for name in classes {
        let errs: Vec<f64> =
            cases.iter().flat_map(|c| c.errors.iter().filter(|e| &e.name == name).map(|e| e.error)).collect();
        let (m, s) = mean_std(&errs);
        let sd = if errs.is_empty() { vec![f64::NAN; thresholds.len()] } else { sdr(&errs, thresholds)? };
        per_class.push(GroupStats { name: name.clone(), count: errs.len(), mre: m, std: s, sdr: sd });
    }
    let mut names: Vec<String> = Vec::new();
    for c in &cases {
        for b in &c.biometry {
            if !names.contains(&b.measurement) {
                names.push(b.measurement.clone());
            }
        }
    }
    let biometry = names
        .into_iter()
        .map(|m| {
            let v: Vec<f64> = cases
                .iter()
                .flat_map(|c| c.biometry.iter().filter(|b| b.measurement == m).map(|b| b.abs_error))
                .collect();
            let (mean, std) = mean_std(&v);
            BiometryStats { measurement: m, count: v.len(), mean_abs_error: mean, std }
        })
        .collect();
    Ok(EvalReport {
        unit: unit.to_string(),
        thresholds: thresholds.to_vec(),
        case_count: cases.len(),
        landmark_count: all.len(),
        mre,
        std,
        sdr: sdr_all,
        per_class,
        biometry,
        cases,
    })
}

/// Loads every `*.json` landmark file in a directory, keyed and sorted by case id.
pub fn read_landmark_dir(dir: &Path) -> Result<Vec<LandmarkSet>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            out.push(io::landmarks::read(&path)?);
        }
    }
    out.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(out)
}

/// Matches ground-truth and prediction files by case id and builds the report.
///
/// `voxel_size` divides every distance so thresholds and errors are in voxels.
pub fn evaluate_dirs(
    gt_dir: &Path,
    pred_dir: &Path,
    thresholds: &[f64],
    biometry: Option<&BiometrySpec>,
    voxel_size: Option<f64>,
) -> Result<EvalReport> {
    let gt = read_landmark_dir(gt_dir)?;
    let pred = read_landmark_dir(pred_dir)?;
    let gt_ids: BTreeSet<&str> = gt.iter().map(|s| s.case_id.as_str()).collect();
    let pred_ids: BTreeSet<&str> = pred.iter().map(|s| s.case_id.as_str()).collect();
    if gt_ids != pred_ids {
        let a: Vec<_> = gt_ids.difference(&pred_ids).collect();
        let b: Vec<_> = pred_ids.difference(&gt_ids).collect();
        return Err(Error::Evaluation(format!(
            "case sets differ; only in ground truth: {a:?}; only in predictions: {b:?}"
        )));
    }
    if gt.is_empty() {
        return Err(Error::Evaluation(format!("no landmark files in {}", gt_dir.display())));
    }
    let scale = voxel_size.unwrap_or(1.0);
    let cases = gt.iter().zip(&pred).map(|(g, p)| evaluate_case(g, p, biometry, scale)).collect::<Result<Vec<_>>>()?;
    let mut classes: Vec<String> = Vec::new();
    for g in &gt {
        for n in &g.names {
            if !classes.contains(n) {
                classes.push(n.clone());
            }
        }
    }
    aggregate_report(cases, &classes, thresholds, if voxel_size.is_some() { "voxel" } else { "mm" })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(id: &str, pts: &[(&str, [f64; 3])]) -> LandmarkSet {
        LandmarkSet::new(id, pts.iter().map(|p| p.0.to_string()).collect(), pts.iter().map(|p| p.1).collect()).unwrap()
    }

    #[test]
    fn radial_examples() {
        let g = set("c", &[("a", [0.0; 3]), ("b", [1.0, 1.0, 1.0])]);
        assert!(radial_errors(&g, &g).unwrap().iter().all(|e| e.1 == 0.0));
        let p = set("c", &[("b", [1.0, 1.0, 1.0]), ("a", [3.0, 4.0, 0.0])]);
        assert_eq!(radial_errors(&g, &p).unwrap(), vec![("a".into(), 5.0), ("b".into(), 0.0)]);
        let q = set("c", &[("a", [0.0; 3]), ("z", [0.0; 3])]);
        match radial_errors(&g, &q) {
            Err(Error::Evaluation(m)) => assert!(m.contains("\"b\"") && m.contains("\"z\"")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sdr_examples() {
        let s = sdr(&[1.0, 2.5, 3.5], &[2.0, 3.0, 4.0]).unwrap();
        assert_eq!(format!("{:.2} {:.2} {:.2}", s[0], s[1], s[2]), "33.33 66.67 100.00");
        assert_eq!(sdr(&[2.0], &[2.0]).unwrap(), vec![100.0]);
        assert_eq!(sdr(&[0.0, 0.0], &[2.0, 3.0]).unwrap(), vec![100.0, 100.0]);
        assert!(sdr(&[], &[2.0]).is_err());
        assert!(sdr(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn biometry_examples() {
        let spec = BiometrySpec(vec![["len".into(), "a".into(), "b".into()]]);
        let g = set("c", &[("a", [0.0; 3]), ("b", [10.0, 0.0, 0.0])]);
        let shifted = set("c", &[("a", [5.0, -2.0, 7.0]), ("b", [15.0, -2.0, 7.0])]);
        assert_eq!(biometry_error(&g, &shifted, &spec).unwrap()[0].abs_error, 0.0);
        let longer = set("c", &[("a", [0.0; 3]), ("b", [12.0, 0.0, 0.0])]);
        assert_eq!(biometry_error(&g, &longer, &spec).unwrap()[0].abs_error, 2.0);
        let outward = set("c", &[("a", [-1.0, 0.0, 0.0]), ("b", [11.0, 0.0, 0.0])]);
        assert_eq!(biometry_error(&g, &outward, &spec).unwrap()[0].abs_error, 2.0);
        assert!(radial_errors(&g, &outward).unwrap().iter().all(|e| e.1 == 1.0));
        let bad = BiometrySpec(vec![["len".into(), "a".into(), "q".into()]]);
        assert!(biometry_error(&g, &g, &bad).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let case = |id: &str, e: &[f64]| CaseEvaluation {
            case_id: id.into(),
            errors: e.iter().enumerate().map(|(i, &x)| LandmarkError { name: format!("l{i}"), error: x }).collect(),
            biometry: vec![],
        };
        let r = aggregate_report(vec![case("a", &[0.0]), case("b", &[2.0])], &["l0".into()], &[2.0], "mm").unwrap();
        assert_eq!((r.mre, r.std), (1.0, 1.0));
        let two = aggregate_report(vec![case("a", &[1.0, 3.0])], &["l0".into(), "l1".into()], &[2.0], "mm").unwrap();
        assert_eq!(two.mre, 2.0);
        assert_eq!(two.per_class.len(), 2);
        assert_eq!(two.per_class[1].mre, 3.0);
        assert!(aggregate_report(vec![], &[], &[2.0], "mm").is_err());
    }

    proptest! {
        #[test]
        fn sdr_monotone_and_errors_symmetric(
            pts in prop::collection::vec(([-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0], [-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0]), 1..12)
        ) {
            let names: Vec<String> = (0..pts.len()).map(|i| format!("l{i}")).collect();
            let g = LandmarkSet::new("c", names.clone(), pts.iter().map(|p| p.0).collect()).unwrap();
            let p = LandmarkSet::new("c", names, pts.iter().map(|p| [p.0[0] + p.1[0], p.0[1] + p.1[1], p.0[2] + p.1[2]]).collect()).unwrap();
            let e1: Vec<f64> = radial_errors(&g, &p).unwrap().into_iter().map(|e| e.1).collect();
            let e2: Vec<f64> = radial_errors(&p, &g).unwrap().into_iter().map(|e| e.1).collect();
            prop_assert_eq!(&e1, &e2);
            let s = sdr(&e1, &[0.5, 1.0, 2.0, 4.0, 8.0, 1e9]).unwrap();
            prop_assert!(s.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(s[5], 100.0);
        }
    }
}
