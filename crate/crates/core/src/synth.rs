//! Synthetic phantom datasets with known landmark positions.
//!
//! Every case is a smooth ellipsoid with one spherical fiducial per class placed at a fixed
//! template offset from the centre. Fiducial appearance cycles through four kinds (solid
//! bright, solid dark, bright shell, dark shell) and its radius grows with the class index, so
//! each class is recognisable from its neighbourhood alone. A random similarity transform moves
//! the whole template per case and Gaussian noise is added on top.

use std::path::Path;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetDescriptor, Modality, Split};
use crate::error::{Error, Result};
use crate::geometry::{Geometry, LandmarkSet, Shape3, Vec3, Volume3D};
use crate::io;
use crate::rng;

pub const MIN_SHAPE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub name: String,
    pub n_cases: usize,
    /// Cases (taken from the end) written to the test split instead of training.
    pub test_cases: usize,
    pub shape: Shape3,
    pub class_count: usize,
    pub seed: u64,
    /// Standard deviation of the additive noise, relative to the ellipsoid intensity.
    pub noise: f64,
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
}

impl SynthConfig {
    pub fn new(n_cases: usize, shape: Shape3, class_count: usize, seed: u64, noise: f64) -> Self {
        SynthConfig {
            name: "synthetic".into(),
            n_cases,
            test_cases: 0,
            shape,
            class_count,
            seed,
            noise,
            max_rotation_deg: 20.0,
            scale_range: (0.9, 1.1),
        }
    }

    pub fn max_translation(&self) -> f64 {
        *self.shape.iter().min().unwrap_or(&0) as f64 / 16.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Rotation3<f64>,
    pub scale: f64,
    pub translation: Vec3,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity { rotation: Rotation3::identity(), scale: 1.0, translation: [0.0; 3] }
    }

    pub fn apply(&self, centre: Vec3, offset: Vec3) -> Vec3 {
        let r = self.rotation * Vector3::from(offset) * self.scale;
        std::array::from_fn(|a| centre[a] + self.translation[a] + r[a])
    }

    fn random<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Self {
        let axis: Vector3<f64> =
            Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let axis = if axis.norm() < 1e-6 { Vector3::z() } else { axis };
        let angle = rng.gen_range(-1.0..=1.0) * cfg.max_rotation_deg.to_radians();
        let (lo, hi) = cfg.scale_range;
        let scale = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let t = cfg.max_translation();
        let translation = std::array::from_fn(|_| if t > 0.0 { rng.gen_range(-t..t) } else { 0.0 });
        Similarity { rotation: Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle), scale, translation }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlobKind {
    SolidBright,
    SolidDark,
    ShellBright,
    ShellDark,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fiducial {
    pub offset: Vec3,
    pub radius: f64,
    pub kind: BlobKind,
}

pub fn class_names(class_count: usize) -> Vec<String> {
    (0..class_count).map(|i| format!("L{i}")).collect()
}

/// Template fiducials: Fibonacci-sphere directions at alternating distances from the centre.
pub fn template(cfg: &SynthConfig) -> Result<Vec<Fiducial>> {
    if cfg.class_count == 0 {
        return Err(Error::Generation("class_count must be ≥ 1".into()));
    }
    if let Some(&s) = cfg.shape.iter().find(|&&s| s < MIN_SHAPE) {
        return Err(Error::Generation(format!("shape {:?}: every axis must be ≥ {MIN_SHAPE}, got {s}", cfg.shape)));
    }
    let min_dim = *cfg.shape.iter().min().expect("three axes") as f64;
    let base = 0.2 * min_dim;
    let size = min_dim / 64.0;
    let n = cfg.class_count;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let fids: Vec<Fiducial> = (0..n)
        .map(|i| {
            let y = if n == 1 { 0.0 } else { 1.0 - 2.0 * (i as f64 + 0.5) / n as f64 };
            let r = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            let dir = [r * th.cos(), y, r * th.sin()];
            let dist = base * if i % 2 == 0 { 1.0 } else { 1.25 };
            let kind = match i % 4 {
                0 => BlobKind::SolidBright,
                1 => BlobKind::SolidDark,
                2 => BlobKind::ShellBright,
                _ => BlobKind::ShellDark,
            };
            Fiducial { offset: dir.map(|d| d * dist), radius: size * (2.5 + 0.75 * i as f64), kind }
        })
        .collect();

    let (smin, smax) = cfg.scale_range;
    let t = cfg.max_translation();
    for (i, f) in fids.iter().enumerate() {
        let reach = t + smax * (vec_norm(f.offset) + f.radius + 1.0);
        for a in 0..3 {
            let half = (cfg.shape[a] as f64 - 1.0) / 2.0;
            if reach > half {
                return Err(Error::Generation(format!(
                    "fiducial L{i} may leave the {:?} grid (reach {reach:.1} > {half:.1})",
                    cfg.shape
                )));
            }
        }
        for (j, g) in fids.iter().enumerate().skip(i + 1) {
            let d = smin * vec_norm(std::array::from_fn(|a| f.offset[a] - g.offset[a]));
            let need = smax * (f.radius + g.radius) + crate::codec::MIN_SEPARATION_VOXELS as f64;
            if d < need {
                return Err(Error::Generation(format!(
                    "fiducials L{i} and L{j} are {d:.1} voxels apart at shape {:?}, need ≥ {need:.1}",
                    cfg.shape
                )));
            }
        }
    }
    Ok(fids)
}

fn vec_norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn smooth_step(x: f64, width: f64) -> f64 {
    1.0 / (1.0 + (-x / width).exp())
}

/// Noise-free phantom and its landmarks under `transform`.
pub fn render_case(
    cfg: &SynthConfig,
    fids: &[Fiducial],
    transform: &Similarity,
    case_id: &str,
) -> Result<(Volume3D, LandmarkSet)> {
    let geometry = Geometry::unit(cfg.shape);
    let centre: Vec3 = std::array::from_fn(|a| (cfg.shape[a] as f64 - 1.0) / 2.0);
    let semi: Vec3 = [0.38, 0.32, 0.30].map(|f| f * cfg.shape.iter().min().copied().unwrap_or(0) as f64);
    let inv = transform.rotation.inverse();
    let s = transform.scale;
    let [nx, ny, nz] = cfg.shape;
    let mut data = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = Vector3::new(
                    x as f64 - centre[0] - transform.translation[0],
                    y as f64 - centre[1] - transform.translation[1],
                    z as f64 - centre[2] - transform.translation[2],
                );
                let q = inv * p / s;
                let e = ((q[0] / semi[0]).powi(2) + (q[1] / semi[1]).powi(2) + (q[2] / semi[2]).powi(2)).sqrt();
                let mut v = smooth_step(1.0 - e, 0.04);
                for f in fids {
                    let d =
                        ((q[0] - f.offset[0]).powi(2) + (q[1] - f.offset[1]).powi(2) + (q[2] - f.offset[2]).powi(2))
                            .sqrt();
                    if d > f.radius + 4.0 {
                        continue;
                    }
                    v += match f.kind {
                        BlobKind::SolidBright => smooth_step(f.radius - d, 0.35),
                        BlobKind::SolidDark => -0.8 * smooth_step(f.radius - d, 0.35),
                        BlobKind::ShellBright => (-(d - f.radius).powi(2) / (2.0 * 0.8 * 0.8)).exp(),
                        BlobKind::ShellDark => -0.8 * (-(d - f.radius).powi(2) / (2.0 * 0.8 * 0.8)).exp(),
                    };
                }
                data.push(v as f32);
            }
        }
    }
    let names = class_names(cfg.class_count);
    let positions = fids.iter().map(|f| transform.apply(centre, f.offset)).collect();
    Ok((Volume3D::new(geometry, data)?, LandmarkSet::new(case_id, names, positions)?))
}

pub fn case_id(i: usize) -> String {
    format!("case_{i:03}")
}

/// Renders case `index` with its seeded transform and noise.
pub fn generate_case(cfg: &SynthConfig, fids: &[Fiducial], index: usize) -> Result<(Volume3D, LandmarkSet)> {
    let mut rng = rng::indexed_stream(cfg.seed, "synth_case", index as u64);
    let transform = Similarity::random(cfg, &mut rng);
    let (mut vol, lm) = render_case(cfg, fids, &transform, &case_id(index))?;
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::Generation(e.to_string()))?;
        for v in &mut vol.data {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    Ok((vol, lm))
}

/// Writes a complete dataset directory.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<DatasetDescriptor> {
    if cfg.n_cases == 0 {
        return Err(Error::Generation("n_cases must be ≥ 1".into()));
    }
    if cfg.test_cases > cfg.n_cases {
        return Err(Error::Generation(format!("{} test cases out of {}", cfg.test_cases, cfg.n_cases)));
    }
    let fids = template(cfg)?;
    let descriptor = DatasetDescriptor {
        name: cfg.name.clone(),
        modality: Modality::Other,
        classes: class_names(cfg.class_count),
        biometry: None,
    };
    io::write_json(&out.join("dataset.json"), &descriptor)?;
    let first_test = cfg.n_cases - cfg.test_cases;
    for i in 0..cfg.n_cases {
        let (vol, lm) = generate_case(cfg, &fids, i)?;
        let split = if i >= first_test { Split::Test } else { Split::Train };
        let id = case_id(i);
        io::write_volume(&out.join(split.images_dir()).join(format!("{id}.nii.gz")), &vol)?;
        io::landmarks::write(&out.join(split.landmarks_dir()).join(format!("{id}.json")), &lm, None)?;
    }
    Ok(descriptor)
}
