//! Resampling to the plan spacing, intensity normalisation, and label re-encoding.

use std::path::{Path, PathBuf};

use crate::codec::{encode_label_map, LabelMap, DEFAULT_CUBE_RADIUS};
use crate::dataset::CaseRecord;
use crate::error::{Error, Result};
use crate::geometry::{resample_volume, Interpolation, LandmarkSet, Volume3D};
use crate::io;
use crate::plan::{CtStats, Normalization, Plan};

/// Training-ready case at plan spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedCase {
    pub case_id: String,
    pub image: Volume3D,
    pub labels: LabelMap,
    /// Original world-space landmarks, kept for validation.
    pub landmarks: LandmarkSet,
}

pub fn normalize_intensity(v: &Volume3D, scheme: Normalization, ct: Option<&CtStats>) -> Result<Volume3D> {
    let mut out = v.clone();
    match scheme {
        Normalization::CtClipZscore => {
            let s = ct.ok_or_else(|| Error::Preprocessing("ct_clip_zscore needs CT statistics".into()))?;
            let std = if s.std > 0.0 {
                s.std
            } else {
                log::warn!("CT std is 0, dividing by 1");
                1.0
            };
            for x in &mut out.data {
                let c = (*x as f64).clamp(s.clip_low, s.clip_high);
                *x = ((c - s.mean) / std) as f32;
            }
        }
        Normalization::Zscore => {
            let n = v.data.len() as f64;
            let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = v.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
            let std = if var > 0.0 {
                var.sqrt()
            } else {
                log::warn!("constant volume, dividing by 1");
                1.0
            };
            for x in &mut out.data {
                *x = ((*x as f64 - mean) / std) as f32;
            }
        }
    }
    Ok(out)
}

pub fn preprocess_image(image: &Volume3D, plan: &Plan) -> Result<Volume3D> {
    let resampled = resample_volume(image, plan.target_spacing, Interpolation::Linear)?;
    normalize_intensity(&resampled, plan.normalization, plan.ct_stats.as_ref())
}

pub fn preprocess_case(case: &CaseRecord, plan: &Plan) -> Result<PreprocessedCase> {
    let raw = io::read_volume(&case.image_path)?;
    let landmarks = case
        .landmarks
        .clone()
        .ok_or_else(|| Error::Preprocessing(format!("case {} has no landmark file", case.case_id)))?;
    preprocess_volume(&case.case_id, &raw, &landmarks, plan)
}

pub fn preprocess_volume(
    case_id: &str,
    raw: &Volume3D,
    landmarks: &LandmarkSet,
    plan: &Plan,
) -> Result<PreprocessedCase> {
    let image = preprocess_image(raw, plan)?;
    // Re-encode from world coordinates on the resampled grid.
    let encoded =
        encode_label_map(&image.geometry, landmarks, &plan.classes, DEFAULT_CUBE_RADIUS).map_err(|e| match e {
            Error::Encoding(m) => Error::Preprocessing(m),
            other => other,
        })?;
    Ok(PreprocessedCase { case_id: case_id.to_string(), image, labels: encoded.map, landmarks: landmarks.clone() })
}

pub fn cache_paths(dir: &Path, case_id: &str) -> [PathBuf; 3] {
    [
        dir.join(format!("{case_id}_image.nii.gz")),
        dir.join(format!("{case_id}_labels.nii.gz")),
        dir.join(format!("{case_id}_landmarks.json")),
    ]
}

pub fn write_cached(dir: &Path, case: &PreprocessedCase) -> Result<()> {
    let [img, lab, lm] = cache_paths(dir, &case.case_id);
    io::write_volume(&img, &case.image)?;
    io::write_volume(&lab, &case.labels.volume)?;
    io::landmarks::write(&lm, &case.landmarks, None)
}

pub fn read_cached(dir: &Path, case_id: &str, classes: &[String]) -> Result<PreprocessedCase> {
    let [img, lab, lm] = cache_paths(dir, case_id);
    let image = io::read_volume(&img)?;
    let label_volume = io::read_volume(&lab)?;
    if label_volume.geometry.shape != image.geometry.shape {
        return Err(Error::format(&lab, "label map shape differs from image"));
    }
    let mut labels = LabelMap::empty(image.geometry.clone(), classes);
    labels.volume.data = label_volume.data;
    Ok(PreprocessedCase { case_id: case_id.to_string(), image, labels, landmarks: io::landmarks::read(&lm)? })
}

pub fn is_cached(dir: &Path, case_id: &str) -> bool {
    cache_paths(dir, case_id).iter().all(|p| p.is_file())
}

/// Preprocesses every case into `dir`, skipping ones already cached unless `force`.
pub fn preprocess_all(cases: &[CaseRecord], plan: &Plan, dir: &Path, force: bool) -> Result<usize> {
    let mut written = 0;
    for case in cases {
        if !force && is_cached(dir, &case.case_id) {
            continue;
        }
        let pre = preprocess_case(case, plan)?;
        write_cached(dir, &pre)?;
        written += 1;
        log::info!("preprocessed {} → {:?}", case.case_id, pre.image.shape());
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::decode_label_centroids;
    use crate::geometry::Geometry;
    use crate::plan::{LossKind, LrSchedule};

    fn plan(spacing: [f64; 3], classes: &[&str]) -> Plan {
        Plan {
            dataset_name: "t".into(),
            classes: classes.iter().map(|s| s.to_string()).collect(),
            target_spacing: spacing,
            normalization: Normalization::Zscore,
            ct_stats: None,
            median_shape: [16; 3],
            patch_size: [16; 3],
            batch_size: 2,
            num_pool_per_axis: [2; 3],
            base_channels: 4,
            max_channels: 8,
            edt_radius_voxels: 15,
            loss: LossKind::BceTopk,
            topk_percent: 20.0,
            epochs: 1,
            iterations_per_epoch: 1,
            learning_rate: LrSchedule::default(),
            oversample_foreground_fraction: 0.5,
            fold_count: 5,
        }
    }

    #[test]
    fn zscore_examples() {
        let g = Geometry::unit([2, 2, 2]);
        let c = normalize_intensity(&Volume3D::filled(g.clone(), 7.0), Normalization::Zscore, None).unwrap();
        assert!(c.data.iter().all(|&x| x == 0.0));
        let v = Volume3D::new(g, vec![1.0, 2.0, 3.0, 4.0, 10.0, -3.0, 0.5, 8.0]).unwrap();
        let z = normalize_intensity(&v, Normalization::Zscore, None).unwrap();
        let n = z.data.len() as f64;
        let m = z.data.iter().map(|&x| x as f64).sum::<f64>() / n;
        let s = (z.data.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!(m.abs() < 1e-6);
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ct_clip_then_zscore() {
        let g = Geometry::unit([3, 1, 1]);
        let v = Volume3D::new(g, vec![-1000.0, 0.0, 3000.0]).unwrap();
        let stats = CtStats { clip_low: -100.0, clip_high: 1000.0, mean: 0.0, std: 1.0 };
        let out = normalize_intensity(&v, Normalization::CtClipZscore, Some(&stats)).unwrap();
        assert_eq!(out.data, vec![-100.0, 0.0, 1000.0]);
        let stats = CtStats { clip_low: -100.0, clip_high: 1000.0, mean: 100.0, std: 0.0 };
        let out = normalize_intensity(&v, Normalization::CtClipZscore, Some(&stats)).unwrap();
        assert_eq!(out.data, vec![-200.0, -100.0, 900.0]);
    }

    #[test]
    fn reencodes_landmarks_on_resampled_grid() {
        let raw = Volume3D::filled(Geometry::unit([20, 20, 20]), 1.0);
        let lm = LandmarkSet::new("c", vec!["a".into()], vec![[10.0, 10.0, 10.0]]).unwrap();
        let pre = preprocess_volume("c", &raw, &lm, &plan([2.0; 3], &["a"])).unwrap();
        assert_eq!(pre.image.shape(), [10, 10, 10]);
        assert_eq!(pre.labels.volume.get(5, 5, 5), 1.0);
        assert_eq!(pre.labels.volume.get(4, 4, 4), 1.0);
        assert_eq!(pre.labels.volume.get(3, 5, 5), 0.0);
        let dec = decode_label_centroids(&pre.labels, "c");
        assert_eq!(dec.landmarks.position("a"), Some([10.0, 10.0, 10.0]));
    }

    #[test]
    fn identity_spacing_only_normalizes() {
        let g = Geometry::unit([4, 4, 4]);
        let raw = Volume3D::new(g, (0..64).map(|i| i as f32).collect()).unwrap();
        let lm = LandmarkSet::new("c", vec!["a".into()], vec![[2.0, 2.0, 2.0]]).unwrap();
        let pre = preprocess_volume("c", &raw, &lm, &plan([1.0; 3], &["a"])).unwrap();
        assert_eq!(pre.image, normalize_intensity(&raw, Normalization::Zscore, None).unwrap());
        assert_eq!(pre.labels.volume.get(2, 2, 2), 1.0);
    }

    #[test]
    fn out_of_grid_landmark_is_named() {
        let raw = Volume3D::filled(Geometry::unit([8, 8, 8]), 1.0);
        let lm = LandmarkSet::new("c", vec!["far".into()], vec![[50.0, 1.0, 1.0]]).unwrap();
        match preprocess_volume("c", &raw, &lm, &plan([1.0; 3], &["far"])) {
            Err(Error::Preprocessing(m)) => assert!(m.contains("far")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cache_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let raw = Volume3D::new(Geometry::unit([6, 6, 6]), (0..216).map(|i| (i % 17) as f32).collect()).unwrap();
        let lm = LandmarkSet::new("c1", vec!["a".into(), "b".into()], vec![[1.0, 1.0, 1.0], [4.0, 4.0, 4.0]]).unwrap();
        let p = plan([1.0; 3], &["a", "b"]);
        let pre = preprocess_volume("c1", &raw, &lm, &p).unwrap();
        write_cached(dir.path(), &pre).unwrap();
        assert!(is_cached(dir.path(), "c1"));
        let back = read_cached(dir.path(), "c1", &p.classes).unwrap();
        assert_eq!(back.image.data, pre.image.data);
        assert_eq!(back.labels.volume.data, pre.labels.volume.data);
        assert_eq!(back.landmarks, pre.landmarks);
    }
}
