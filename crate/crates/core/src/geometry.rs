//! Voxel grids with world-space geometry, and the landmark sets that live on them.
//!
//! Voxel index `(i, j, k)` maps to world millimetres as
//! `origin + direction · (spacing ⊙ (i, j, k))`; index `(0, 0, 0)` sits exactly on the origin.
//! Volume data is stored x-fastest: `linear = x + nx * (y + ny * z)`.

use std::collections::HashSet;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Shape3 = [usize; 3];

const ORTHONORMAL_TOL: f64 = 1e-6;

/// Shape plus affine placement of a voxel grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub shape: Shape3,
    pub spacing: Vec3,
    pub origin: Vec3,
    /// Row-major; column `j` is the world direction of voxel axis `j`.
    pub direction: [[f64; 3]; 3],
}

pub const IDENTITY_DIRECTION: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Geometry {
    pub fn new(shape: Shape3, spacing: Vec3, origin: Vec3, direction: [[f64; 3]; 3]) -> Result<Self> {
        let g = Geometry { shape, spacing, origin, direction };
        g.validate()?;
        Ok(g)
    }

    /// Unit spacing, zero origin, identity orientation.
    pub fn unit(shape: Shape3) -> Self {
        Geometry { shape, spacing: [1.0; 3], origin: [0.0; 3], direction: IDENTITY_DIRECTION }
    }

    pub fn with_spacing(shape: Shape3, spacing: Vec3) -> Result<Self> {
        Geometry::new(shape, spacing, [0.0; 3], IDENTITY_DIRECTION)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::Geometry(format!("shape {:?} has an empty axis", self.shape)));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Geometry(format!("spacing {:?} must be finite and strictly positive", self.spacing)));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry(format!("origin {:?} is not finite", self.origin)));
        }
        let d = self.direction_matrix();
        let gram = d.transpose() * d;
        if (gram - Matrix3::identity()).abs().max() > ORTHONORMAL_TOL {
            return Err(Error::Geometry(format!("direction {:?} is not orthonormal", self.direction)));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.shape.iter().product()
    }

    fn direction_matrix(&self) -> Matrix3<f64> {
        let d = &self.direction;
        Matrix3::new(d[0][0], d[0][1], d[0][2], d[1][0], d[1][1], d[1][2], d[2][0], d[2][1], d[2][2])
    }

    /// Linear part of the voxel→world map, `direction · diag(spacing)`.
    pub fn affine(&self) -> Matrix3<f64> {
        self.direction_matrix() * Matrix3::from_diagonal(&Vector3::from(self.spacing))
    }

    pub fn voxel_to_world(&self, idx: Vec3) -> Vec3 {
        let p = self.affine() * Vector3::from(idx) + Vector3::from(self.origin);
        [p.x, p.y, p.z]
    }

    /// Continuous voxel coordinates of a world point; not clamped to the grid.
    pub fn world_to_voxel(&self, p_mm: Vec3) -> Result<Vec3> {
        if p_mm.iter().any(|c| !c.is_finite()) {
            return Err(Error::Geometry(format!("point {p_mm:?} is not finite")));
        }
        let inv = self
            .affine()
            .try_inverse()
            .ok_or_else(|| Error::Geometry(format!("singular direction {:?}", self.direction)))?;
        let v = inv * (Vector3::from(p_mm) - Vector3::from(self.origin));
        Ok([v.x, v.y, v.z])
    }

    pub fn contains_index(&self, idx: [i64; 3]) -> bool {
        (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < self.shape[a])
    }

    #[inline]
    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn unravel(&self, linear: usize) -> [usize; 3] {
        let nx = self.shape[0];
        let ny = self.shape[1];
        [linear % nx, (linear / nx) % ny, linear / (nx * ny)]
    }

    /// World-space extent covered by the grid, `shape * spacing` per axis.
    pub fn extent_mm(&self) -> Vec3 {
        [
            self.shape[0] as f64 * self.spacing[0],
            self.shape[1] as f64 * self.spacing[1],
            self.shape[2] as f64 * self.spacing[2],
        ]
    }
}

/// Nearest voxel, ties to even.
pub fn round_voxel(v: Vec3) -> [i64; 3] {
    [v[0].round_ties_even() as i64, v[1].round_ties_even() as i64, v[2].round_ties_even() as i64]
}

/// A scalar volume on a placed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub geometry: Geometry,
    pub data: Vec<f32>,
}

impl Volume3D {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.voxel_count() {
            return Err(Error::Geometry(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                geometry.shape
            )));
        }
        Ok(Volume3D { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Self {
        let n = geometry.voxel_count();
        Volume3D { geometry, data: vec![value; n] }
    }

    pub fn shape(&self) -> Shape3 {
        self.geometry.shape
    }

    pub fn spacing(&self) -> Vec3 {
        self.geometry.spacing
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.linear_index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.geometry.linear_index(x, y, z);
        self.data[i] = v;
    }

    pub fn world_to_voxel(&self, p_mm: Vec3) -> Result<Vec3> {
        self.geometry.world_to_voxel(p_mm)
    }

    pub fn voxel_to_world(&self, idx: Vec3) -> Vec3 {
        self.geometry.voxel_to_world(idx)
    }

    /// Trilinear sample at continuous voxel coordinates with edge clamping.
    pub fn sample_linear(&self, c: Vec3) -> f64 {
        let s = self.geometry.shape;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut t = [0.0f64; 3];
        for a in 0..3 {
            let max = (s[a] - 1) as f64;
            let v = c[a].clamp(0.0, max);
            let f = v.floor();
            lo[a] = f as usize;
            hi[a] = (lo[a] + 1).min(s[a] - 1);
            t[a] = v - f;
        }
        let g = |x: usize, y: usize, z: usize| self.get(x, y, z) as f64;
        let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
        let c00 = lerp(g(lo[0], lo[1], lo[2]), g(hi[0], lo[1], lo[2]), t[0]);
        let c10 = lerp(g(lo[0], hi[1], lo[2]), g(hi[0], hi[1], lo[2]), t[0]);
        let c01 = lerp(g(lo[0], lo[1], hi[2]), g(hi[0], lo[1], hi[2]), t[0]);
        let c11 = lerp(g(lo[0], hi[1], hi[2]), g(hi[0], hi[1], hi[2]), t[0]);
        let c0 = lerp(c00, c10, t[1]);
        let c1 = lerp(c01, c11, t[1]);
        lerp(c0, c1, t[2])
    }

    /// Nearest-neighbour sample with edge clamping.
    pub fn sample_nearest(&self, c: Vec3) -> f32 {
        let s = self.geometry.shape;
        let idx: [usize; 3] = std::array::from_fn(|a| {
            let r = c[a].round_ties_even();
            r.clamp(0.0, (s[a] - 1) as f64) as usize
        });
        self.get(idx[0], idx[1], idx[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    Nearest,
}

/// Output grid for resampling `geometry` onto `target_spacing`, keeping origin and orientation.
pub fn resampled_geometry(geometry: &Geometry, target_spacing: Vec3) -> Result<Geometry> {
    if target_spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Config(format!("target spacing {target_spacing:?} must be strictly positive")));
    }
    let shape: Shape3 = std::array::from_fn(|a| {
        let n = (geometry.shape[a] as f64 * geometry.spacing[a] / target_spacing[a]).round();
        (n as usize).max(1)
    });
    Ok(Geometry { shape, spacing: target_spacing, origin: geometry.origin, direction: geometry.direction })
}

pub fn resample_volume(v: &Volume3D, target_spacing: Vec3, mode: Interpolation) -> Result<Volume3D> {
    let out_geom = resampled_geometry(&v.geometry, target_spacing)?;
    if out_geom.shape == v.geometry.shape && target_spacing == v.geometry.spacing {
        return Ok(v.clone());
    }
    let ratio: Vec3 = std::array::from_fn(|a| target_spacing[a] / v.geometry.spacing[a]);
    let [nx, ny, nz] = out_geom.shape;
    let mut data = Vec::with_capacity(out_geom.voxel_count());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let c = [x as f64 * ratio[0], y as f64 * ratio[1], z as f64 * ratio[2]];
                let val = match mode {
                    Interpolation::Linear => v.sample_linear(c) as f32,
                    Interpolation::Nearest => v.sample_nearest(c),
                };
                data.push(val);
            }
        }
    }
    Ok(Volume3D { geometry: out_geom, data })
}

/// Ordered, named world-space landmark positions for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub case_id: String,
    pub names: Vec<String>,
    pub positions_mm: Vec<Vec3>,
}

impl LandmarkSet {
    pub fn new(case_id: impl Into<String>, names: Vec<String>, positions_mm: Vec<Vec3>) -> Result<Self> {
        let set = LandmarkSet { case_id: case_id.into(), names, positions_mm };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(case_id: impl Into<String>) -> Self {
        LandmarkSet { case_id: case_id.into(), names: Vec::new(), positions_mm: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.positions_mm.len() {
            return Err(Error::Validation(format!(
                "case {}: {} names but {} positions",
                self.case_id,
                self.names.len(),
                self.positions_mm.len()
            )));
        }
        let mut seen = HashSet::new();
        for (name, p) in self.names.iter().zip(&self.positions_mm) {
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!("case {}: duplicate landmark name {name}", self.case_id)));
            }
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::Validation(format!(
                    "case {}: landmark {name} has non-finite position",
                    self.case_id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<Vec3> {
        self.names.iter().position(|n| n == name).map(|i| self.positions_mm[i])
    }

    pub fn push(&mut self, name: impl Into<String>, p: Vec3) {
        self.names.push(name.into());
        self.positions_mm.push(p);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Vec3)> {
        self.names.iter().map(String::as_str).zip(self.positions_mm.iter().copied())
    }
}

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
