//! Dataset fingerprints and the experiment plan derived from them.
//!
//! The plan fixes everything downstream stages need: target spacing, intensity
//! normalization, patch size and U-Net topology, heatmap/loss knobs and the training schedule.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{CaseRecord, DatasetDescriptor, Modality};
use crate::error::{Error, Result};
use crate::geometry::{Shape3, Vec3};
use crate::{io, rng};

pub const MAX_SAMPLES_PER_CASE: usize = 10_000;
pub const PATCH_CAP: usize = 128;
pub const MIN_BOTTLENECK: usize = 8;
pub const MAX_POOLS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityStats {
    pub mean: f64,
    pub std: f64,
    pub percentile_00_5: f64,
    pub percentile_99_5: f64,
    /// Mean/std after clipping to the 0.5/99.5 percentiles.
    pub clipped_mean: f64,
    pub clipped_std: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub dataset_name: String,
    pub modality: Modality,
    pub classes: Vec<String>,
    pub class_count: usize,
    pub case_ids: Vec<String>,
    pub shapes: Vec<Shape3>,
    pub spacings: Vec<Vec3>,
    pub landmark_counts: Vec<usize>,
    pub intensity: IntensityStats,
    pub seed: u64,
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 100].
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    if t == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * t
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn intensity_stats(samples: &[f64]) -> IntensityStats {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mean, std) = mean_std(sorted.iter().copied());
    let lo = percentile_sorted(&sorted, 0.5);
    let hi = percentile_sorted(&sorted, 99.5);
    let (clipped_mean, clipped_std) = mean_std(sorted.iter().map(|v| v.clamp(lo, hi)));
    IntensityStats {
        mean,
        std,
        percentile_00_5: lo,
        percentile_99_5: hi,
        clipped_mean,
        clipped_std,
        sample_count: samples.len(),
    }
}

/// Up to [`MAX_SAMPLES_PER_CASE`] voxel values; all voxels when the image is smaller.
pub fn sample_intensities(data: &[f32], seed: u64, case_index: usize) -> Vec<f64> {
    if data.len() <= MAX_SAMPLES_PER_CASE {
        return data.iter().map(|&v| v as f64).collect();
    }
    let mut r = rng::indexed_stream(seed, "fingerprint", case_index as u64);
    (0..MAX_SAMPLES_PER_CASE).map(|_| data[r.gen_range(0..data.len())] as f64).collect()
}

pub fn compute_fingerprint(cases: &[CaseRecord], descriptor: &DatasetDescriptor, seed: u64) -> Result<Fingerprint> {
    if cases.is_empty() {
        return Err(Error::Config("fingerprinting needs at least one training case".into()));
    }
    let mut shapes = Vec::with_capacity(cases.len());
    let mut spacings = Vec::with_capacity(cases.len());
    let mut landmark_counts = Vec::with_capacity(cases.len());
    let mut samples = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let v = io::read_volume(&case.image_path).map_err(|e| match e {
            Error::Io { path, source } => Error::Io { path: path.join(format!("(case {})", case.case_id)), source },
            other => {
                Error::Format { path: case.image_path.clone(), message: format!("case {}: {other}", case.case_id) }
            }
        })?;
        shapes.push(v.geometry.shape);
        spacings.push(v.geometry.spacing);
        landmark_counts.push(case.landmarks.as_ref().map_or(0, |l| l.len()));
        samples.extend(sample_intensities(&v.data, seed, i));
    }
    Ok(Fingerprint {
        dataset_name: descriptor.name.clone(),
        modality: descriptor.modality,
        classes: descriptor.classes.clone(),
        class_count: descriptor.classes.len(),
        case_ids: cases.iter().map(|c| c.case_id.clone()).collect(),
        shapes,
        spacings,
        landmark_counts,
        intensity: intensity_stats(&samples),
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    CtClipZscore,
    Zscore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    BceTopk,
    Mse,
}

/// Dataset-global statistics used by CT normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtStats {
    pub clip_low: f64,
    pub clip_high: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// SGD with Nesterov momentum.
    #[default]
    Sgd,
    /// Adam; `momentum` is β₁.
    Adam,
}

/// Optimizer settings and polynomial learning-rate decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub initial: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            optimizer: OptimizerKind::Sgd,
            initial: 1e-2,
            power: 0.9,
            momentum: 0.99,
            weight_decay: 3e-5,
            grad_clip_norm: 12.0,
        }
    }
}

impl LrSchedule {
    /// `initial · (1 − step/total)^power`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let frac = if total == 0 { 0.0 } else { step as f64 / total as f64 };
        self.initial * (1.0 - frac).max(0.0).powf(self.power)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub dataset_name: String,
    pub classes: Vec<String>,
    pub target_spacing: Vec3,
    pub normalization: Normalization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ct_stats: Option<CtStats>,
    pub median_shape: Shape3,
    pub patch_size: Shape3,
    pub batch_size: usize,
    pub num_pool_per_axis: [usize; 3],
    pub base_channels: usize,
    pub max_channels: usize,
    pub edt_radius_voxels: usize,
    pub loss: LossKind,
    pub topk_percent: f64,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub learning_rate: LrSchedule,
    pub oversample_foreground_fraction: f64,
    pub fold_count: usize,
}

/// Partial plan; any field set here wins over the derived value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanOverrides {
    pub target_spacing: Option<Vec3>,
    pub normalization: Option<Normalization>,
    pub patch_size: Option<Shape3>,
    pub batch_size: Option<usize>,
    pub num_pool_per_axis: Option<[usize; 3]>,
    pub base_channels: Option<usize>,
    pub max_channels: Option<usize>,
    pub edt_radius_voxels: Option<usize>,
    pub loss: Option<LossKind>,
    pub topk_percent: Option<f64>,
    pub epochs: Option<usize>,
    pub iterations_per_epoch: Option<usize>,
    pub learning_rate: Option<LrSchedule>,
    pub oversample_foreground_fraction: Option<f64>,
    pub fold_count: Option<usize>,
}

impl From<&Plan> for PlanOverrides {
    fn from(p: &Plan) -> Self {
        PlanOverrides {
            target_spacing: Some(p.target_spacing),
            normalization: Some(p.normalization),
            patch_size: Some(p.patch_size),
            batch_size: Some(p.batch_size),
            num_pool_per_axis: Some(p.num_pool_per_axis),
            base_channels: Some(p.base_channels),
            max_channels: Some(p.max_channels),
            edt_radius_voxels: Some(p.edt_radius_voxels),
            loss: Some(p.loss),
            topk_percent: Some(p.topk_percent),
            epochs: Some(p.epochs),
            iterations_per_epoch: Some(p.iterations_per_epoch),
            learning_rate: Some(p.learning_rate.clone()),
            oversample_foreground_fraction: Some(p.oversample_foreground_fraction),
            fold_count: Some(p.fold_count),
        }
    }
}

fn median_f64(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Largest `n ≤ MAX_POOLS` with `len / 2^n ≥ MIN_BOTTLENECK`.
pub fn pools_for_length(len: usize) -> usize {
    let mut n = 0;
    while n < MAX_POOLS && len as f64 / 2f64.powi(n as i32 + 1) >= MIN_BOTTLENECK as f64 {
        n += 1;
    }
    n
}

pub fn derive_plan(fp: &Fingerprint, overrides: &PlanOverrides) -> Result<Plan> {
    if fp.shapes.is_empty() || fp.shapes.len() != fp.spacings.len() {
        return Err(Error::Config("fingerprint has no cases".into()));
    }
    let target_spacing = overrides
        .target_spacing
        .unwrap_or_else(|| std::array::from_fn(|a| median_f64(fp.spacings.iter().map(|s| s[a]).collect())));
    if target_spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Config(format!("target spacing {target_spacing:?} must be positive")));
    }
    let median_shape: Shape3 = std::array::from_fn(|a| {
        let resampled = fp
            .shapes
            .iter()
            .zip(&fp.spacings)
            .map(|(sh, sp)| ((sh[a] as f64 * sp[a] / target_spacing[a]).round()).max(1.0))
            .collect();
        median_f64(resampled).floor() as usize
    });

    let (patch_size, num_pool_per_axis) = match (overrides.patch_size, overrides.num_pool_per_axis) {
        (Some(p), Some(n)) => (p, n),
        (Some(p), None) => {
            let n = std::array::from_fn(|a| {
                let mut n = pools_for_length(p[a]);
                while n > 0 && p[a] % (1 << n) != 0 {
                    n -= 1;
                }
                n
            });
            (p, n)
        }
        (None, pools) => {
            let capped: Shape3 = std::array::from_fn(|a| median_shape[a].min(PATCH_CAP));
            let n = pools.unwrap_or_else(|| std::array::from_fn(|a| pools_for_length(capped[a])));
            let p = std::array::from_fn(|a| {
                let step = 1usize << n[a];
                ((capped[a] / step) * step).max(step)
            });
            (p, n)
        }
    };

    let normalization = overrides.normalization.unwrap_or(match fp.modality {
        Modality::Ct => Normalization::CtClipZscore,
        Modality::Other => Normalization::Zscore,
    });
    let ct_stats = (normalization == Normalization::CtClipZscore).then_some(CtStats {
        clip_low: fp.intensity.percentile_00_5,
        clip_high: fp.intensity.percentile_99_5,
        mean: fp.intensity.clipped_mean,
        std: fp.intensity.clipped_std,
    });

    let plan = Plan {
        dataset_name: fp.dataset_name.clone(),
        classes: fp.classes.clone(),
        target_spacing,
        normalization,
        ct_stats,
        median_shape,
        patch_size,
        batch_size: overrides.batch_size.unwrap_or(2),
        num_pool_per_axis,
        base_channels: overrides.base_channels.unwrap_or(16),
        max_channels: overrides.max_channels.unwrap_or(128),
        edt_radius_voxels: overrides.edt_radius_voxels.unwrap_or(15),
        loss: overrides.loss.unwrap_or(LossKind::BceTopk),
        topk_percent: overrides.topk_percent.unwrap_or(20.0),
        epochs: overrides.epochs.unwrap_or(50),
        iterations_per_epoch: overrides.iterations_per_epoch.unwrap_or(50),
        learning_rate: overrides.learning_rate.clone().unwrap_or_default(),
        oversample_foreground_fraction: overrides.oversample_foreground_fraction.unwrap_or(0.5),
        fold_count: overrides.fold_count.unwrap_or(5),
    };
    plan.validate()?;
    Ok(plan)
}

impl Plan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for a in 0..3 {
            let step = 1usize << self.num_pool_per_axis[a].min(31);
            if self.patch_size[a] == 0 || !self.patch_size[a].is_multiple_of(step) {
                return bad(format!(
                    "patch size {:?} not divisible by 2^pools {:?}",
                    self.patch_size, self.num_pool_per_axis
                ));
            }
        }
        if !(self.topk_percent > 0.0 && self.topk_percent <= 100.0) {
            return bad(format!("topk_percent {} outside (0, 100]", self.topk_percent));
        }
        if self.edt_radius_voxels < 1 {
            return bad("edt_radius_voxels must be at least 1".into());
        }
        if self.fold_count < 2 {
            return bad(format!("fold_count {} must be at least 2", self.fold_count));
        }
        if !(0.0..=1.0).contains(&self.oversample_foreground_fraction) {
            return bad("oversample_foreground_fraction must lie in [0, 1]".into());
        }
        if self.batch_size == 0 || self.base_channels == 0 || self.max_channels < self.base_channels {
            return bad("batch_size, base_channels must be positive and max_channels ≥ base_channels".into());
        }
        if self.target_spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return bad("target spacing must be positive".into());
        }
        if self.classes.is_empty() {
            return bad("plan has no landmark classes".into());
        }
        let lr = &self.learning_rate;
        if !(lr.initial > 0.0 && (0.0..1.0).contains(&lr.momentum) && lr.power >= 0.0) {
            return bad("invalid learning-rate schedule".into());
        }
        if self.normalization == Normalization::CtClipZscore && self.ct_stats.is_none() {
            return bad("ct_clip_zscore normalization requires ct_stats".into());
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    /// Short stable identifier of the plan contents.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("plan serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fingerprint(shapes: Vec<Shape3>, spacings: Vec<Vec3>, modality: Modality) -> Fingerprint {
        let n = shapes.len();
        Fingerprint {
            dataset_name: "toy".into(),
            modality,
            classes: vec!["a".into(), "b".into()],
            class_count: 2,
            case_ids: (0..n).map(|i| format!("c{i}")).collect(),
            shapes,
            spacings,
            landmark_counts: vec![2; n],
            intensity: intensity_stats(&[0.0, 1.0, 2.0, 3.0]),
            seed: 0,
        }
    }

    #[test]
    fn median_spacing() {
        let fp = fingerprint(
            vec![[10, 10, 10]; 3],
            vec![[1.0, 1.0, 1.0], [1.0, 1.0, 2.0], [1.0, 1.0, 3.0]],
            Modality::Other,
        );
        let plan = derive_plan(&fp, &PlanOverrides::default()).unwrap();
        assert_eq!(plan.target_spacing, [1.0, 1.0, 2.0]);
        assert_eq!(plan.normalization, Normalization::Zscore);
        assert!(plan.ct_stats.is_none());
    }

    #[test]
    fn patch_and_pools_for_96_96_48() {
        let fp = fingerprint(vec![[96, 96, 48]], vec![[1.0; 3]], Modality::Other);
        let plan = derive_plan(&fp, &PlanOverrides::default()).unwrap();
        assert_eq!(plan.patch_size, [96, 96, 48]);
        assert_eq!(plan.num_pool_per_axis, [3, 3, 2]);
    }

    #[test]
    fn patch_capped_at_128() {
        let fp = fingerprint(vec![[300, 300, 300]], vec![[1.0; 3]], Modality::Ct);
        let plan = derive_plan(&fp, &PlanOverrides::default()).unwrap();
        assert_eq!(plan.patch_size, [128, 128, 128]);
        assert_eq!(plan.num_pool_per_axis, [4, 4, 4]);
        assert_eq!(plan.normalization, Normalization::CtClipZscore);
        assert!(plan.ct_stats.is_some());
    }

    #[test]
    fn halving_rule_by_hand() {
        // len / 2^n ≥ 8: 7→0, 8→0, 16→1, 31→1, 32→2, 64→3, 1000→5 (cap).
        for (len, n) in [(7, 0), (8, 0), (16, 1), (31, 1), (32, 2), (64, 3), (1000, 5)] {
            assert_eq!(pools_for_length(len), n, "len {len}");
        }
    }

    #[test]
    fn non_divisible_median_shape_is_reduced() {
        let fp = fingerprint(vec![[100, 70, 33]], vec![[1.0; 3]], Modality::Other);
        let plan = derive_plan(&fp, &PlanOverrides::default()).unwrap();
        // 100: 3 pools → 96; 70: 3 pools (70/8 = 8.75) → 64; 33: 2 pools → 32.
        assert_eq!(plan.num_pool_per_axis, [3, 3, 2]);
        assert_eq!(plan.patch_size, [96, 64, 32]);
    }

    #[test]
    fn overrides_pass_through_and_are_checked() {
        let fp = fingerprint(vec![[64, 64, 64]], vec![[1.0; 3]], Modality::Other);
        let o = PlanOverrides { topk_percent: Some(100.0), ..Default::default() };
        let plan = derive_plan(&fp, &o).unwrap();
        assert_eq!(plan.loss, LossKind::BceTopk);
        assert_eq!(plan.topk_percent, 100.0);

        let o =
            PlanOverrides { patch_size: Some([32, 32, 32]), num_pool_per_axis: Some([2, 2, 2]), ..Default::default() };
        let plan = derive_plan(&fp, &o).unwrap();
        assert_eq!(plan.patch_size, [32, 32, 32]);
        assert_eq!(plan.num_pool_per_axis, [2, 2, 2]);

        for bad in [
            PlanOverrides { topk_percent: Some(0.0), ..Default::default() },
            PlanOverrides { topk_percent: Some(120.0), ..Default::default() },
            PlanOverrides { edt_radius_voxels: Some(0), ..Default::default() },
            PlanOverrides { fold_count: Some(1), ..Default::default() },
            PlanOverrides { patch_size: Some([30, 32, 32]), num_pool_per_axis: Some([2, 2, 2]), ..Default::default() },
        ] {
            assert!(matches!(derive_plan(&fp, &bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn override_json_rejects_unknown_keys() {
        assert!(serde_json::from_str::<PlanOverrides>(r#"{"epochs": 3}"#).is_ok());
        assert!(serde_json::from_str::<PlanOverrides>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn intensity_stats_constant_and_percentiles() {
        let s = intensity_stats(&[4.0; 10]);
        assert_eq!(s.std, 0.0);
        assert_eq!(s.percentile_00_5, s.percentile_99_5);
        let sorted: Vec<f64> = (0..=100).map(|v| v as f64).collect();
        assert_eq!(percentile_sorted(&sorted, 0.5), 0.5);
        assert_eq!(percentile_sorted(&sorted, 99.5), 99.5);
    }

    #[test]
    fn lr_schedule_decays_polynomially() {
        let lr = LrSchedule::default();
        assert_eq!(lr.lr_at(0, 100), 1e-2);
        assert!((lr.lr_at(50, 100) - 1e-2 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert_eq!(lr.lr_at(100, 100), 0.0);
    }

    proptest! {
        #[test]
        fn derived_plans_are_valid_and_idempotent(
            shapes in proptest::collection::vec(proptest::array::uniform3(4usize..400), 1..6),
            sp in proptest::array::uniform3(0.3f64..4.0),
            ct in any::<bool>(),
        ) {
            let n = shapes.len();
            let fp = fingerprint(shapes, vec![sp; n], if ct { Modality::Ct } else { Modality::Other });
            let plan = derive_plan(&fp, &PlanOverrides::default()).unwrap();
            plan.validate().unwrap();
            prop_assert!(plan.patch_size.iter().all(|&p| p <= PATCH_CAP));
            prop_assert_eq!(&derive_plan(&fp, &PlanOverrides::default()).unwrap(), &plan);
            prop_assert_eq!(&derive_plan(&fp, &PlanOverrides::from(&plan)).unwrap(), &plan);
            let json = serde_json::to_string(&plan).unwrap();
            prop_assert_eq!(&serde_json::from_str::<Plan>(&json).unwrap(), &plan);
        }
    }
}
