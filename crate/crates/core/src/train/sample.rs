//! Patch sampling with foreground oversampling.

use rand::Rng;

use crate::geometry::Shape3;
use crate::preprocess::PreprocessedCase;

/// A preprocessed case with its foreground voxels indexed for fast centring.
#[derive(Debug, Clone)]
pub struct TrainCase {
    pub case: PreprocessedCase,
    pub foreground: Vec<usize>,
}

impl TrainCase {
    pub fn new(case: PreprocessedCase) -> Self {
        let foreground = case.labels.volume.data.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i).collect();
        TrainCase { case, foreground }
    }
}

/// Aligned image and label crops, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub shape: Shape3,
    pub image: Vec<f32>,
    pub labels: Vec<f32>,
}

/// Start of a `patch`-long window on an axis of length `dim` that contains `centre`.
fn centred_start(centre: usize, dim: usize, patch: usize) -> usize {
    if dim <= patch {
        return 0;
    }
    centre.saturating_sub(patch / 2).min(dim - patch)
}

/// Crops a patch. With probability `oversample` it is centred on a random foreground voxel,
/// otherwise its position is uniform. Axes shorter than the patch are zero-padded at the end.
pub fn sample_patch<R: Rng>(tc: &TrainCase, patch: Shape3, oversample: f64, rng: &mut R) -> PatchPair {
    let geom = &tc.case.image.geometry;
    let dims = geom.shape;
    let force = rng.gen_bool(oversample.clamp(0.0, 1.0));
    let start: [usize; 3] = if force && !tc.foreground.is_empty() {
        let c = geom.unravel(tc.foreground[rng.gen_range(0..tc.foreground.len())]);
        std::array::from_fn(|a| centred_start(c[a], dims[a], patch[a]))
    } else {
        std::array::from_fn(|a| if dims[a] > patch[a] { rng.gen_range(0..=dims[a] - patch[a]) } else { 0 })
    };
    crop(tc, start, patch)
}

pub fn crop(tc: &TrainCase, start: [usize; 3], patch: Shape3) -> PatchPair {
    let dims = tc.case.image.geometry.shape;
    let n: usize = patch.iter().product();
    let mut image = vec![0.0f32; n];
    let mut labels = vec![0.0f32; n];
    let len_x = patch[0].min(dims[0] - start[0]);
    for z in 0..patch[2].min(dims[2] - start[2]) {
        for y in 0..patch[1].min(dims[1] - start[1]) {
            let src = start[0] + dims[0] * ((start[1] + y) + dims[1] * (start[2] + z));
            let dst = patch[0] * (y + patch[1] * z);
            image[dst..dst + len_x].copy_from_slice(&tc.case.image.data[src..src + len_x]);
            labels[dst..dst + len_x].copy_from_slice(&tc.case.labels.volume.data[src..src + len_x]);
        }
    }
    PatchPair { shape: patch, image, labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode_label_map;
    use crate::geometry::{Geometry, LandmarkSet, Volume3D};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn case(shape: Shape3, points: &[[f64; 3]]) -> TrainCase {
        let g = Geometry::unit(shape);
        let names: Vec<String> = (0..points.len()).map(|i| format!("p{i}")).collect();
        let lm = LandmarkSet::new("c", names.clone(), points.to_vec()).unwrap();
        let enc = encode_label_map(&g, &lm, &names, 1).unwrap();
        let n = g.voxel_count();
        let image = Volume3D::new(g, (0..n).map(|i| i as f32).collect()).unwrap();
        TrainCase::new(PreprocessedCase { case_id: "c".into(), image, labels: enc.map, landmarks: lm })
    }

    #[test]
    fn forced_centring_always_hits_foreground() {
        let tc = case([40, 30, 20], &[[2.0, 28.0, 10.0], [35.0, 3.0, 18.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let p = sample_patch(&tc, [8, 8, 8], 1.0, &mut rng);
            assert!(p.labels.iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn background_patch_is_legal() {
        let tc = case([40, 40, 40], &[[2.0, 2.0, 2.0]]);
        let p = crop(&tc, [20, 20, 20], [8, 8, 8]);
        assert!(p.labels.iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seen_bg = (0..50).any(|_| sample_patch(&tc, [8, 8, 8], 0.0, &mut rng).labels.iter().all(|&v| v == 0.0));
        assert!(seen_bg);
    }

    #[test]
    fn full_volume_patch_is_the_volume() {
        let tc = case([12, 10, 8], &[[5.0, 5.0, 4.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = sample_patch(&tc, [12, 10, 8], 0.5, &mut rng);
        assert_eq!(p.image, tc.case.image.data);
        assert_eq!(p.labels, tc.case.labels.volume.data);
    }

    #[test]
    fn short_axes_are_zero_padded() {
        let tc = case([6, 10, 8], &[[3.0, 5.0, 4.0]]);
        let p = crop(&tc, [0, 1, 0], [8, 8, 8]);
        assert_eq!(p.image[0], tc.case.image.get(0, 1, 0));
        assert_eq!(p.image[5], tc.case.image.get(5, 1, 0));
        assert_eq!(p.image[6], 0.0);
        assert_eq!(p.image[7], 0.0);
    }
}
