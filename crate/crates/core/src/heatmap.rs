//! Heatmap targets built from label patches, and the BCE-TopK / MSE training losses.
//!
//! Arrays here are channel-major: `data[c * V + v]` with voxels x-fastest.

use crate::error::{Error, Result};
use crate::geometry::{Shape3, Vec3};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTarget {
    pub shape: Shape3,
    pub channels: Vec<f32>,
    /// Continuous voxel-space centroid per class; `None` when the class is not in the patch.
    pub centers: Vec<Option<Vec3>>,
    pub radius_voxels: usize,
}

impl HeatmapTarget {
    pub fn class_count(&self) -> usize {
        self.centers.len()
    }

    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let v = self.voxels();
        &self.channels[c * v..(c + 1) * v]
    }
}

/// Linear distance profile: 1 at the centre, 0 at and beyond `radius`.
pub fn edt_profile(distance: f64, radius: f64) -> f64 {
    ((radius - distance) / radius).max(0.0)
}

/// Per-class centroids of a label patch (label `i + 1` ↔ class `i`).
pub fn label_centroids(labels: &[f32], shape: Shape3, class_count: usize) -> Vec<Option<Vec3>> {
    let mut sums = vec![[0.0f64; 3]; class_count];
    let mut counts = vec![0usize; class_count];
    let (nx, ny) = (shape[0], shape[1]);
    for (i, &l) in labels.iter().enumerate() {
        let l = l.round() as i64;
        if l < 1 || l as usize > class_count {
            continue;
        }
        let c = l as usize - 1;
        let x = i % nx;
        let y = (i / nx) % ny;
        let z = i / (nx * ny);
        sums[c][0] += x as f64;
        sums[c][1] += y as f64;
        sums[c][2] += z as f64;
        counts[c] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| [s[0] / n as f64, s[1] / n as f64, s[2] / n as f64]))
        .collect()
}

pub fn patch_to_heatmap(labels: &[f32], shape: Shape3, class_count: usize, radius: usize) -> Result<HeatmapTarget> {
    let v: usize = shape.iter().product();
    if labels.len() != v {
        return Err(Error::Contract(format!("label patch has {} voxels, shape {shape:?} needs {v}", labels.len())));
    }
    if radius == 0 {
        return Err(Error::Contract("heatmap radius must be ≥ 1".into()));
    }
    let centers = label_centroids(labels, shape, class_count);
    let mut channels = vec![0.0f32; class_count * v];
    let r = radius as f64;
    for (c, center) in centers.iter().enumerate() {
        let Some(center) = center else { continue };
        let out = &mut channels[c * v..(c + 1) * v];
        // Only voxels within the radius can be non-zero.
        let lo: [i64; 3] = std::array::from_fn(|a| ((center[a] - r).ceil() as i64).max(0));
        let hi: [i64; 3] = std::array::from_fn(|a| ((center[a] + r).floor() as i64).min(shape[a] as i64 - 1));
        if (0..3).any(|a| hi[a] < lo[a]) {
            continue;
        }
        let (lo, hi) = (lo.map(|v| v as usize), hi.map(|v| v as usize));
        for z in lo[2]..=hi[2] {
            let dz = z as f64 - center[2];
            for y in lo[1]..=hi[1] {
                let dy = y as f64 - center[1];
                let row = shape[0] * (y + shape[1] * z);
                for x in lo[0]..=hi[0] {
                    let dx = x as f64 - center[0];
                    let d = (dx * dx + dy * dy + dz * dz).sqrt();
                    out[row + x] = edt_profile(d, r) as f32;
                }
            }
        }
    }
    Ok(HeatmapTarget { shape, channels, centers, radius_voxels: radius })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-element BCE on the clamped sigmoid.
pub fn bce_elementwise(logit: f64, target: f64) -> f64 {
    let p = sigmoid(logit).clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// `∂ℓ/∂logit`; zero where the clamp is active.
pub fn bce_elementwise_grad(logit: f64, target: f64) -> f64 {
    let p = sigmoid(logit);
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        0.0
    } else {
        p - target
    }
}

fn check_shapes(logits: &[f32], target: &HeatmapTarget) -> Result<()> {
    if logits.len() != target.channels.len() {
        return Err(Error::Contract(format!(
            "logits hold {} values but the target has {} ({} channels × {:?})",
            logits.len(),
            target.channels.len(),
            target.class_count(),
            target.shape
        )));
    }
    Ok(())
}

/// Number of elements kept by a top-k percentage of `n`.
pub fn topk_count(n: usize, topk_percent: f64) -> usize {
    ((topk_percent * n as f64 / 100.0).ceil() as usize).clamp(1, n.max(1))
}

/// Mean of the `k` largest values, and the indices that were selected.
pub fn topk_mean(values: &[f64], k: usize) -> (f64, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        idx.truncate(k);
    }
    idx.sort_unstable();
    let sum: f64 = idx.iter().map(|&i| values[i]).sum();
    (sum / k as f64, idx)
}

pub fn bce_elementwise_all(logits: &[f32], target: &HeatmapTarget) -> Result<Vec<f64>> {
    check_shapes(logits, target)?;
    Ok(logits.iter().zip(&target.channels).map(|(&z, &t)| bce_elementwise(z as f64, t as f64)).collect())
}

pub fn bce_topk_loss(logits: &[f32], target: &HeatmapTarget, topk_percent: f64) -> Result<f64> {
    Ok(bce_topk_loss_and_grad(logits, target, topk_percent)?.0)
}

/// Loss and `∂loss/∂logits` (zero outside the selected top-k set).
pub fn bce_topk_loss_and_grad(logits: &[f32], target: &HeatmapTarget, topk_percent: f64) -> Result<(f64, Vec<f32>)> {
    if !(topk_percent > 0.0 && topk_percent <= 100.0) {
        return Err(Error::Contract(format!("topk_percent {topk_percent} outside (0, 100]")));
    }
    let losses = bce_elementwise_all(logits, target)?;
    if losses.is_empty() {
        return Err(Error::Contract("empty patch".into()));
    }
    let k = topk_count(losses.len(), topk_percent);
    let (loss, selected) = topk_mean(&losses, k);
    let mut grad = vec![0.0f32; logits.len()];
    for i in selected {
        grad[i] = (bce_elementwise_grad(logits[i] as f64, target.channels[i] as f64) / k as f64) as f32;
    }
    Ok((loss, grad))
}

pub fn mse_loss(logits: &[f32], target: &HeatmapTarget) -> Result<f64> {
    Ok(mse_loss_and_grad(logits, target)?.0)
}

pub fn mse_loss_and_grad(logits: &[f32], target: &HeatmapTarget) -> Result<(f64, Vec<f32>)> {
    check_shapes(logits, target)?;
    if logits.is_empty() {
        return Err(Error::Contract("empty patch".into()));
    }
    let n = logits.len() as f64;
    let mut sum = 0.0;
    let grad = logits
        .iter()
        .zip(&target.channels)
        .map(|(&z, &t)| {
            let p = sigmoid(z as f64);
            let d = p - t as f64;
            sum += d * d;
            (2.0 * d * p * (1.0 - p) / n) as f32
        })
        .collect();
    Ok((sum / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube_patch(shape: Shape3, centers: &[[usize; 3]]) -> Vec<f32> {
        let mut labels = vec![0.0f32; shape.iter().product()];
        for (c, ctr) in centers.iter().enumerate() {
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let p = [ctr[0] as i64 + dx, ctr[1] as i64 + dy, ctr[2] as i64 + dz];
                        if (0..3).all(|a| p[a] >= 0 && p[a] < shape[a] as i64) {
                            let i = p[0] as usize + shape[0] * (p[1] as usize + shape[1] * p[2] as usize);
                            labels[i] = (c + 1) as f32;
                        }
                    }
                }
            }
        }
        labels
    }

    #[test]
    fn profile_examples() {
        assert_eq!(edt_profile(0.0, 15.0), 1.0);
        assert_eq!(edt_profile(15.0, 15.0), 0.0);
        assert_eq!(edt_profile(7.5, 15.0), 0.5);
        assert_eq!(edt_profile(20.0, 15.0), 0.0);
    }

    #[test]
    fn heatmap_peaks_at_cube_centre_and_absent_classes_are_zero() {
        let shape = [20, 20, 20];
        let labels = cube_patch(shape, &[[5, 6, 7]]);
        let t = patch_to_heatmap(&labels, shape, 2, 15).unwrap();
        assert_eq!(t.centers[0], Some([5.0, 6.0, 7.0]));
        assert_eq!(t.centers[1], None);
        let ch = t.channel(0);
        assert_eq!(ch[5 + 20 * (6 + 20 * 7)], 1.0);
        assert!(t.channel(1).iter().all(|&v| v == 0.0));
        let max = ch.iter().cloned().fold(f32::MIN, f32::max);
        assert_eq!(max, 1.0);
        // Voxel at distance exactly 15 along x is zero; 7.5 cannot land on the grid, use 3 → 0.8.
        assert_eq!(ch[5 + 20 * (6 + 20 * 10)], 0.8);
    }

    #[test]
    fn heatmap_is_translation_equivariant() {
        let shape = [24, 24, 24];
        let a = patch_to_heatmap(&cube_patch(shape, &[[8, 8, 8]]), shape, 1, 5).unwrap();
        let b = patch_to_heatmap(&cube_patch(shape, &[[10, 9, 8]]), shape, 1, 5).unwrap();
        for z in 0..24 {
            for y in 0..23 {
                for x in 0..22 {
                    let i = x + 24 * (y + 24 * z);
                    let j = (x + 2) + 24 * ((y + 1) + 24 * z);
                    assert_eq!(a.channels[i], b.channels[j]);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let t = patch_to_heatmap(&[0.0; 8], [2, 2, 2], 1, 3).unwrap();
        assert!(matches!(bce_topk_loss(&[0.0; 7], &t, 20.0), Err(Error::Contract(_))));
        assert!(matches!(mse_loss(&[0.0; 9], &t), Err(Error::Contract(_))));
        assert!(matches!(patch_to_heatmap(&[0.0; 7], [2, 2, 2], 1, 3), Err(Error::Contract(_))));
    }

    fn target_from(values: Vec<f32>) -> HeatmapTarget {
        let n = values.len();
        HeatmapTarget { shape: [n, 1, 1], channels: values, centers: vec![None], radius_voxels: 1 }
    }

    #[test]
    fn near_perfect_logits_have_tiny_loss() {
        let t = target_from(vec![1.0, 0.0, 0.0, 1.0, 0.0]);
        let z: Vec<f32> = t.channels.iter().map(|&v| if v == 1.0 { 20.0 } else { -20.0 }).collect();
        for k in [1.0, 20.0, 50.0, 100.0] {
            assert!(bce_topk_loss(&z, &t, k).unwrap() < 1e-6);
        }
    }

    #[test]
    fn topk_by_hand() {
        let (m, sel) = topk_mean(&[0.9, 0.5, 0.1, 0.05, 0.01], topk_count(5, 20.0));
        assert_eq!(m, 0.9);
        assert_eq!(sel, vec![0]);
        assert_eq!(topk_count(5, 20.0), 1);
        assert_eq!(topk_count(7, 20.0), 2);
        assert_eq!(topk_count(7, 100.0), 7);
    }

    #[test]
    fn topk_100_equals_mean_bce() {
        let t = target_from(vec![0.3, 0.0, 1.0, 0.7]);
        let z = [0.4f32, -2.0, 1.5, -0.1];
        let mean: f64 =
            z.iter().zip(&t.channels).map(|(&a, &b)| bce_elementwise(a as f64, b as f64)).sum::<f64>() / 4.0;
        assert!((bce_topk_loss(&z, &t, 100.0).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn mse_examples() {
        let t = target_from(vec![0.0; 4]);
        assert!((mse_loss(&[0.0; 4], &t).unwrap() - 0.25).abs() < 1e-15);
        let t1 = target_from(vec![1.0]);
        assert!((mse_loss(&[0.0], &t1).unwrap() - 0.25).abs() < 1e-15);
        let t2 = target_from(vec![1.0, 0.0]);
        assert!(mse_loss(&[60.0, -60.0], &t2).unwrap() < 1e-10);
    }

    proptest! {
        #[test]
        fn heatmap_values_in_unit_interval(cx in 0usize..12, cy in 0usize..12, cz in 0usize..12, r in 1usize..20) {
            let shape = [12, 12, 12];
            let t = patch_to_heatmap(&cube_patch(shape, &[[cx, cy, cz]]), shape, 1, r).unwrap();
            prop_assert!(t.channels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn bce_topk_is_permutation_invariant(vals in prop::collection::vec((-5.0f32..5.0, 0.0f32..1.0), 2..60), k in 1.0f64..100.0, rot in 0usize..60) {
            let (z, t): (Vec<f32>, Vec<f32>) = vals.iter().cloned().unzip();
            let a = bce_topk_loss(&z, &target_from(t.clone()), k).unwrap();
            let r = rot % z.len();
            let mut z2 = z.clone();
            let mut t2 = t;
            z2.rotate_left(r);
            t2.rotate_left(r);
            let b = bce_topk_loss(&z2, &target_from(t2), k).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
