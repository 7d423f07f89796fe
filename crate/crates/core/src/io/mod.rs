//! On-disk formats: volumes (NIfTI or raw+sidecar), landmark files, JSON helpers.

pub mod landmarks;
pub mod nifti;
pub mod raw;

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Volume3D;

/// Recognised volume file suffixes, in lookup preference order.
pub const VOLUME_SUFFIXES: [&str; 3] = [".nii.gz", ".nii", ".raw"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    Raw,
}

pub fn volume_format(path: &Path) -> Option<VolumeFormat> {
    let name = path.file_name()?.to_str()?;
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        Some(VolumeFormat::Nifti)
    } else if name.ends_with(".raw") {
        Some(VolumeFormat::Raw)
    } else {
        None
    }
}

pub fn read_volume(path: &Path) -> Result<Volume3D> {
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    match volume_format(path) {
        Some(VolumeFormat::Nifti) => nifti::read(path),
        Some(VolumeFormat::Raw) => raw::read(path),
        None => Err(Error::format(path, "unrecognised volume extension")),
    }
}

/// Writes through a temporary sibling and renames, so readers never observe a partial file.
pub fn write_volume(path: &Path, volume: &Volume3D) -> Result<()> {
    let format = volume_format(path).ok_or_else(|| Error::format(path, "unrecognised volume extension"))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("volume");
    let tmp = path.with_file_name(format!(".tmp-{name}"));
    match format {
        VolumeFormat::Nifti => nifti::write(&tmp, volume)?,
        VolumeFormat::Raw => {
            raw::write(&tmp, volume)?;
            let side = raw::sidecar_path(&tmp);
            let dst = raw::sidecar_path(path);
            fs::rename(&side, &dst).map_err(|e| Error::io(&dst, e))?;
        }
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Strips a recognised volume suffix from a file name.
pub fn volume_stem(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    VOLUME_SUFFIXES.iter().find_map(|s| name.strip_suffix(s)).map(str::to_string)
}

/// Finds `<dir>/<stem><suffix>` for the first suffix that exists.
pub fn find_volume(dir: &Path, stem: &str) -> Option<PathBuf> {
    VOLUME_SUFFIXES.iter().map(|s| dir.join(format!("{stem}{s}"))).find(|p| p.is_file())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = path.with_file_name(format!(".tmp-{name}"));
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
