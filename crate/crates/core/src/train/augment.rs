//! Patch augmentation. Spatial transforms are shared by image (linear) and labels (nearest);
//! intensity transforms touch the image only.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::Shape3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub mirror_p: f64,
    pub rotation_p: f64,
    pub rotation_max_deg: f64,
    pub scale_p: f64,
    pub scale_range: (f64, f64),
    pub noise_p: f64,
    pub noise_max_sigma: f64,
    pub brightness_p: f64,
    pub brightness_range: (f64, f64),
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            mirror_p: 0.5,
            rotation_p: 0.2,
            rotation_max_deg: 30.0,
            scale_p: 0.2,
            scale_range: (0.7, 1.4),
            noise_p: 0.15,
            noise_max_sigma: 0.1,
            brightness_p: 0.15,
            brightness_range: (0.8, 1.2),
        }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        AugmentParams {
            mirror_p: 0.0,
            rotation_p: 0.0,
            scale_p: 0.0,
            noise_p: 0.0,
            brightness_p: 0.0,
            ..Default::default()
        }
    }
}

/// Resamples both patches at `src = c + m·(o − c)` around the patch centre `c`.
fn warp(image: &[f32], labels: &[f32], shape: Shape3, m: &Matrix3<f64>) -> (Vec<f32>, Vec<f32>) {
    let [nx, ny, nz] = shape;
    let c = Vector3::new((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0, (nz as f64 - 1.0) / 2.0);
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut img = vec![0.0f32; image.len()];
    let mut lab = vec![0.0f32; labels.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let s = c + m * (Vector3::new(x as f64, y as f64, z as f64) - c);
                let o = idx(x, y, z);
                let r = [s[0].round_ties_even(), s[1].round_ties_even(), s[2].round_ties_even()];
                if r.iter().zip(&shape).all(|(&v, &n)| v >= 0.0 && v < n as f64) {
                    lab[o] = labels[idx(r[0] as usize, r[1] as usize, r[2] as usize)];
                }
                let f = [s[0].floor(), s[1].floor(), s[2].floor()];
                let t = [s[0] - f[0], s[1] - f[1], s[2] - f[2]];
                let mut acc = 0.0f64;
                for corner in 0..8 {
                    let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                    let mut w = 1.0;
                    let mut p = [0usize; 3];
                    let mut inside = true;
                    for a in 0..3 {
                        let v = f[a] as i64 + off[a] as i64;
                        w *= if off[a] == 1 { t[a] } else { 1.0 - t[a] };
                        if v < 0 || v >= shape[a] as i64 {
                            inside = false;
                        } else {
                            p[a] = v as usize;
                        }
                    }
                    if inside && w > 0.0 {
                        acc += w * image[idx(p[0], p[1], p[2])] as f64;
                    }
                }
                img[o] = acc as f32;
            }
        }
    }
    (img, lab)
}

fn mirror_axis(data: &mut [f32], shape: Shape3, axis: usize) {
    let [nx, ny, nz] = shape;
    let src = data.to_vec();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut s = [x, y, z];
                s[axis] = shape[axis] - 1 - s[axis];
                data[x + nx * (y + ny * z)] = src[s[0] + nx * (s[1] + ny * s[2])];
            }
        }
    }
}

pub fn augment<R: Rng>(
    image: &[f32],
    labels: &[f32],
    shape: Shape3,
    params: &AugmentParams,
    rng: &mut R,
) -> (Vec<f32>, Vec<f32>) {
    let mut m = Matrix3::identity();
    let mut spatial = false;
    if rng.gen_bool(params.rotation_p) {
        let max = params.rotation_max_deg.to_radians();
        let ang: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-max..=max));
        m = *Rotation3::from_euler_angles(ang[0], ang[1], ang[2]).matrix() * m;
        spatial = true;
    }
    if rng.gen_bool(params.scale_p) {
        let (lo, hi) = params.scale_range;
        m *= rng.gen_range(lo..=hi);
        spatial = true;
    }
    let (mut img, mut lab) = if spatial { warp(image, labels, shape, &m) } else { (image.to_vec(), labels.to_vec()) };
    for axis in 0..3 {
        if rng.gen_bool(params.mirror_p) {
            mirror_axis(&mut img, shape, axis);
            mirror_axis(&mut lab, shape, axis);
        }
    }
    if rng.gen_bool(params.noise_p) {
        let sigma = rng.gen_range(0.0..=params.noise_max_sigma);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            img.iter_mut().for_each(|v| *v += normal.sample(rng) as f32);
        }
    }
    if rng.gen_bool(params.brightness_p) {
        let (lo, hi) = params.brightness_range;
        let f = rng.gen_range(lo..=hi) as f32;
        img.iter_mut().for_each(|v| *v *= f);
    }
    (img, lab)
}
