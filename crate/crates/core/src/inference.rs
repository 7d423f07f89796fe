//! Sliding-window heatmap prediction and argmax decoding.

use crate::error::{Error, Result};
use crate::geometry::{Geometry, LandmarkSet, Shape3, Volume3D};
use crate::heatmap::sigmoid;
use crate::nn::{Act, UNet};
use crate::plan::Plan;
use crate::preprocess::preprocess_image;

/// Anything that maps an image patch to per-class probabilities of the same shape.
pub trait HeatmapModel {
    fn class_count(&self) -> usize;

    /// `patch` is x-fastest; the result is channel-major `C × V`, values in `[0, 1]`.
    fn predict_patch(&self, patch: &[f32], shape: Shape3) -> Vec<f32>;
}

/// A trained network with its parameters.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub net: UNet,
    pub params: Vec<f32>,
}

impl HeatmapModel for NetworkModel {
    fn class_count(&self) -> usize {
        self.net.output_channels()
    }

    fn predict_patch(&self, patch: &[f32], shape: Shape3) -> Vec<f32> {
        let logits = self.net.forward(&self.params, &Act::from_data(shape, 1, patch.to_vec()));
        logits.to_channel_major().into_iter().map(|z| sigmoid(z as f64) as f32).collect()
    }
}

/// Averages the probabilities of several models, e.g. one per cross-validation fold.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub models: Vec<NetworkModel>,
}

impl HeatmapModel for Ensemble {
    fn class_count(&self) -> usize {
        self.models.first().map_or(0, |m| m.class_count())
    }

    fn predict_patch(&self, patch: &[f32], shape: Shape3) -> Vec<f32> {
        let mut acc: Vec<f64> = Vec::new();
        for m in &self.models {
            let p = m.predict_patch(patch, shape);
            if acc.is_empty() {
                acc = vec![0.0; p.len()];
            }
            acc.iter_mut().zip(&p).for_each(|(a, v)| *a += *v as f64);
        }
        let n = self.models.len().max(1) as f64;
        acc.into_iter().map(|a| (a / n) as f32).collect()
    }
}

/// Multi-channel volume on one grid, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub geometry: Geometry,
    pub channels: Vec<Vec<f32>>,
}

impl Heatmap {
    pub fn channel_volume(&self, c: usize) -> Volume3D {
        Volume3D { geometry: self.geometry.clone(), data: self.channels[c].clone() }
    }
}

/// Tile starts along one axis: stride `patch / 2`, last tile flush with the end.
pub fn tile_starts(dim: usize, patch: usize) -> Vec<usize> {
    if dim <= patch {
        return vec![0];
    }
    let step = (patch / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + patch < dim).collect();
    starts.push(dim - patch);
    starts
}

/// Separable Gaussian importance along one axis, centred on the patch, σ = patch/8.
pub fn gaussian_weights_1d(patch: usize) -> Vec<f64> {
    let sigma = patch as f64 / 8.0;
    let c = (patch as f64 - 1.0) / 2.0;
    (0..patch).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect()
}

pub fn sliding_window_predict<M: HeatmapModel + ?Sized>(model: &M, image: &Volume3D, patch: Shape3) -> Result<Heatmap> {
    let c_count = model.class_count();
    let orig = image.shape();
    if patch.contains(&0) {
        return Err(Error::Contract(format!("patch {patch:?} has an empty axis")));
    }
    // Pad at the high end of each axis that is smaller than the patch.
    let shape: Shape3 = std::array::from_fn(|a| orig[a].max(patch[a]));
    let padded: Vec<f32> = if shape == orig {
        image.data.clone()
    } else {
        let mut d = vec![0.0f32; shape.iter().product()];
        for z in 0..orig[2] {
            for y in 0..orig[1] {
                let src = orig[0] * (y + orig[1] * z);
                let dst = shape[0] * (y + shape[1] * z);
                d[dst..dst + orig[0]].copy_from_slice(&image.data[src..src + orig[0]]);
            }
        }
        d
    };
    let n: usize = shape.iter().product();
    let pv: usize = patch.iter().product();
    let w1: [Vec<f64>; 3] = std::array::from_fn(|a| gaussian_weights_1d(patch[a]));
    let mut weight = vec![0.0f64; pv];
    for z in 0..patch[2] {
        for y in 0..patch[1] {
            for x in 0..patch[0] {
                weight[x + patch[0] * (y + patch[1] * z)] = w1[0][x] * w1[1][y] * w1[2][z];
            }
        }
    }
    let mut acc = vec![0.0f64; c_count * n];
    let mut wsum = vec![0.0f64; n];
    let starts: [Vec<usize>; 3] = std::array::from_fn(|a| tile_starts(shape[a], patch[a]));
    let mut tile = vec![0.0f32; pv];
    for &sz in &starts[2] {
        for &sy in &starts[1] {
            for &sx in &starts[0] {
                for z in 0..patch[2] {
                    for y in 0..patch[1] {
                        let src = sx + shape[0] * ((sy + y) + shape[1] * (sz + z));
                        let dst = patch[0] * (y + patch[1] * z);
                        tile[dst..dst + patch[0]].copy_from_slice(&padded[src..src + patch[0]]);
                    }
                }
                let probs = model.predict_patch(&tile, patch);
                if probs.len() != c_count * pv {
                    return Err(Error::Contract(format!(
                        "model returned {} values for {c_count} channels × {pv} voxels",
                        probs.len()
                    )));
                }
                for z in 0..patch[2] {
                    for y in 0..patch[1] {
                        for x in 0..patch[0] {
                            let p = x + patch[0] * (y + patch[1] * z);
                            let g = (sx + x) + shape[0] * ((sy + y) + shape[1] * (sz + z));
                            let w = weight[p];
                            wsum[g] += w;
                            for c in 0..c_count {
                                acc[c * n + g] += w * probs[c * pv + p] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    let ov: usize = orig.iter().product();
    let mut channels = vec![vec![0.0f32; ov]; c_count];
    for (c, ch) in channels.iter_mut().enumerate() {
        for z in 0..orig[2] {
            for y in 0..orig[1] {
                for x in 0..orig[0] {
                    let g = x + shape[0] * (y + shape[1] * z);
                    ch[x + orig[0] * (y + orig[1] * z)] = (acc[c * n + g] / wsum[g]) as f32;
                }
            }
        }
    }
    Ok(Heatmap { geometry: image.geometry.clone(), channels })
}

/// Lowest linear index attaining the maximum.
pub fn argmax_first(values: &[f32]) -> (usize, f32) {
    let mut best = (0, f32::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    if values.is_empty() {
        (0, 0.0)
    } else {
        best
    }
}

/// One landmark per channel at its argmax voxel, with the peak value as confidence.
pub fn extract_landmarks(heatmap: &Heatmap, classes: &[String], case_id: &str) -> Result<(LandmarkSet, Vec<f64>)> {
    if classes.len() != heatmap.channels.len() {
        return Err(Error::Contract(format!(
            "{} classes for a {}-channel heatmap",
            classes.len(),
            heatmap.channels.len()
        )));
    }
    let mut set = LandmarkSet::empty(case_id);
    let mut conf = Vec::with_capacity(classes.len());
    for (name, ch) in classes.iter().zip(&heatmap.channels) {
        let (i, v) = argmax_first(ch);
        let [x, y, z] = heatmap.geometry.unravel(i);
        set.push(name.clone(), heatmap.geometry.voxel_to_world([x as f64, y as f64, z as f64]));
        conf.push(v as f64);
    }
    Ok((set, conf))
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub landmarks: LandmarkSet,
    pub confidence: Vec<f64>,
    /// On the preprocessed grid.
    pub heatmap: Heatmap,
}

/// Preprocesses a raw image with `plan`, predicts and decodes world-space landmarks.
pub fn predict_image<M: HeatmapModel + ?Sized>(
    model: &M,
    raw: &Volume3D,
    plan: &Plan,
    case_id: &str,
) -> Result<Prediction> {
    let image = preprocess_image(raw, plan)?;
    predict_preprocessed(model, &image, plan, case_id)
}

pub fn predict_preprocessed<M: HeatmapModel + ?Sized>(
    model: &M,
    image: &Volume3D,
    plan: &Plan,
    case_id: &str,
) -> Result<Prediction> {
    let heatmap = sliding_window_predict(model, image, plan.patch_size)?;
    let (landmarks, confidence) = extract_landmarks(&heatmap, &plan.classes, case_id)?;
    Ok(Prediction { landmarks, confidence, heatmap })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(f32, usize);

    impl HeatmapModel for Constant {
        fn class_count(&self) -> usize {
            self.1
        }
        fn predict_patch(&self, _: &[f32], shape: Shape3) -> Vec<f32> {
            vec![self.0; self.1 * shape.iter().product::<usize>()]
        }
    }

    /// Echoes the input intensities as its single channel.
    struct Echo;

    impl HeatmapModel for Echo {
        fn class_count(&self) -> usize {
            1
        }
        fn predict_patch(&self, patch: &[f32], _: Shape3) -> Vec<f32> {
            patch.to_vec()
        }
    }

    /// Reports the index of the tile it is called for through a counter-dependent value.
    struct TileIndex(std::cell::Cell<u32>);

    impl HeatmapModel for TileIndex {
        fn class_count(&self) -> usize {
            1
        }
        fn predict_patch(&self, _: &[f32], shape: Shape3) -> Vec<f32> {
            let k = self.0.get();
            self.0.set(k + 1);
            vec![if k == 0 { 0.2 } else { 0.8 }; shape.iter().product()]
        }
    }

    #[test]
    fn tile_layout() {
        assert_eq!(tile_starts(32, 32), vec![0]);
        assert_eq!(tile_starts(20, 32), vec![0]);
        assert_eq!(tile_starts(64, 32), vec![0, 16, 32]);
        assert_eq!(tile_starts(70, 32), vec![0, 16, 32, 38]);
        assert_eq!(tile_starts(6, 4), vec![0, 2]);
    }

    #[test]
    fn single_tile_equals_model_output() {
        let g = Geometry::unit([4, 4, 4]);
        let img = Volume3D::new(g, (0..64).map(|i| i as f32 / 64.0).collect()).unwrap();
        let h = sliding_window_predict(&Echo, &img, [4, 4, 4]).unwrap();
        assert_eq!(h.channels[0], img.data);
    }

    #[test]
    fn constant_model_stays_constant() {
        let img = Volume3D::filled(Geometry::unit([24, 20, 9]), 0.0);
        let h = sliding_window_predict(&Constant(0.37, 2), &img, [8, 8, 4]).unwrap();
        for ch in &h.channels {
            assert!(ch.iter().all(|&v| (v - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn small_image_is_padded_and_cropped() {
        let g = Geometry::unit([3, 5, 2]);
        let img = Volume3D::new(g, (0..30).map(|i| i as f32).collect()).unwrap();
        let h = sliding_window_predict(&Echo, &img, [4, 8, 4]).unwrap();
        assert_eq!(h.channels[0], img.data);
    }

    #[test]
    fn two_tile_blend_by_hand() {
        // x-axis: dim 6, patch 4 → tiles at 0 and 2; y/z are single tiles of size 1.
        let img = Volume3D::filled(Geometry::unit([6, 1, 1]), 0.0);
        let h = sliding_window_predict(&TileIndex(Default::default()), &img, [4, 1, 1]).unwrap();
        let s = 0.5f64;
        let g = |i: f64| (-(i - 1.5).powi(2) / (2.0 * s * s)).exp();
        // Voxel 2 sees local index 2 of tile 0 and local index 0 of tile 1.
        let expect2 = (0.2 * g(2.0) + 0.8 * g(0.0)) / (g(2.0) + g(0.0));
        let expect3 = (0.2 * g(3.0) + 0.8 * g(1.0)) / (g(3.0) + g(1.0));
        assert!((h.channels[0][2] as f64 - expect2).abs() < 1e-6);
        assert!((h.channels[0][3] as f64 - expect3).abs() < 1e-6);
        assert!((h.channels[0][0] - 0.2).abs() < 1e-7);
        assert!((h.channels[0][5] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn extract_examples() {
        let g = Geometry::with_spacing([8, 8, 8], [2.0; 3]).unwrap();
        let mut a = vec![0.0f32; 512];
        a[3 + 8 * (4 + 8 * 5)] = 1.0;
        let hm = Heatmap { geometry: g, channels: vec![a, vec![0.0; 512]] };
        let (set, conf) = extract_landmarks(&hm, &["a".into(), "b".into()], "c").unwrap();
        assert_eq!(set.position("a"), Some([6.0, 8.0, 10.0]));
        assert_eq!(set.position("b"), Some([0.0, 0.0, 0.0]));
        assert_eq!(conf, vec![1.0, 0.0]);
        assert!(extract_landmarks(&hm, &["a".into()], "c").is_err());
    }
}
