//! Dependency-free volume format: `<stem>.raw` holds little-endian `f32` samples
//! (x fastest), `<stem>.hdr` is a `key: values` text sidecar:
//!
//! ```text
//! shape: 64 64 64
//! spacing: 1 1 1
//! origin: 0 0 0
//! direction: 1 0 0 0 1 0 0 0 1
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{Geometry, Volume3D};

pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("hdr")
}

pub fn write(path: &Path, volume: &Volume3D) -> Result<()> {
    let g = &volume.geometry;
    let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
    let dir: Vec<f64> = g.direction.iter().flatten().copied().collect();
    let header = format!(
        "shape: {} {} {}\nspacing: {}\norigin: {}\ndirection: {}\n",
        g.shape[0],
        g.shape[1],
        g.shape[2],
        join(&g.spacing),
        join(&g.origin),
        join(&dir)
    );
    let side = sidecar_path(path);
    fs::write(&side, header).map_err(|e| Error::io(&side, e))?;
    let mut bytes = Vec::with_capacity(volume.data.len() * 4);
    for v in &volume.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Volume3D> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let mut shape = None;
    let mut spacing = None;
    let mut origin = [0.0; 3];
    let mut direction = crate::geometry::IDENTITY_DIRECTION;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) =
            line.split_once(':').ok_or_else(|| Error::format(&side, format!("malformed line {line:?}")))?;
        let nums: Vec<f64> = value
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(&side, format!("{key}: {e}")))?;
        let want = if key.trim() == "direction" { 9 } else { 3 };
        if nums.len() != want {
            return Err(Error::format(&side, format!("{key}: expected {want} values")));
        }
        match key.trim() {
            "shape" => shape = Some([nums[0] as usize, nums[1] as usize, nums[2] as usize]),
            "spacing" => spacing = Some([nums[0], nums[1], nums[2]]),
            "origin" => origin = [nums[0], nums[1], nums[2]],
            "direction" => {
                direction = [[nums[0], nums[1], nums[2]], [nums[3], nums[4], nums[5]], [nums[6], nums[7], nums[8]]]
            }
            other => return Err(Error::format(&side, format!("unknown key {other:?}"))),
        }
    }
    let shape = shape.ok_or_else(|| Error::format(&side, "missing shape"))?;
    let spacing = spacing.ok_or_else(|| Error::format(&side, "missing spacing"))?;
    let geometry = Geometry::new(shape, spacing, origin, direction)?;

    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != geometry.voxel_count() * 4 {
        return Err(Error::format(path, format!("{} bytes, expected {}", bytes.len(), geometry.voxel_count() * 4)));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Volume3D::new(geometry, data)
}
