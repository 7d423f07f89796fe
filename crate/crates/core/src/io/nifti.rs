//! NIfTI-1 volumes (`.nii`, `.nii.gz`).
//!
//! The file affine is RAS; world coordinates inside the crate are LPS, so the first two
//! rows are negated on read and on write.

use std::path::Path;

use nalgebra::Matrix4;
use ndarray::{Array3, ShapeBuilder};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};
use crate::geometry::{Geometry, Volume3D};

const LPS_FLIP: [f64; 3] = [-1.0, -1.0, 1.0];

pub fn read(path: &Path) -> Result<Volume3D> {
    let obj = ReaderOptions::new().read_file(path).map_err(|e| Error::format(path, e.to_string()))?;
    let header = obj.header().clone();
    let dims = header.dim().map_err(|e| Error::format(path, e.to_string()))?;
    if dims.len() < 3 || dims[3..].iter().any(|&d| d > 1) {
        return Err(Error::format(path, format!("expected a 3D volume, got dims {dims:?}")));
    }
    let shape = [dims[0] as usize, dims[1] as usize, dims[2] as usize];
    let geometry = geometry_from_header(&header, shape).map_err(|e| Error::format(path, e.to_string()))?;

    let array = obj.into_volume().into_ndarray::<f32>().map_err(|e| Error::format(path, e.to_string()))?;
    // Logical order of the transposed array is x-fastest.
    let data: Vec<f32> = array.t().iter().copied().collect();
    Volume3D::new(geometry, data)
}

fn geometry_from_header(header: &NiftiHeader, shape: [usize; 3]) -> Result<Geometry> {
    let affine: Matrix4<f64> = header.affine();
    let mut spacing = [0.0; 3];
    let mut direction = [[0.0; 3]; 3];
    for j in 0..3 {
        let col = [affine[(0, j)], affine[(1, j)], affine[(2, j)]];
        let norm = (col[0] * col[0] + col[1] * col[1] + col[2] * col[2]).sqrt();
        spacing[j] = norm;
        for i in 0..3 {
            direction[i][j] = if norm > 0.0 { LPS_FLIP[i] * col[i] / norm } else { 0.0 };
        }
    }
    let origin = [LPS_FLIP[0] * affine[(0, 3)], LPS_FLIP[1] * affine[(1, 3)], LPS_FLIP[2] * affine[(2, 3)]];
    Geometry::new(shape, spacing, origin, direction)
}

pub fn write(path: &Path, volume: &Volume3D) -> Result<()> {
    let g = &volume.geometry;
    let lin = g.affine();
    let mut affine = Matrix4::<f64>::identity();
    for i in 0..3 {
        for j in 0..3 {
            affine[(i, j)] = LPS_FLIP[i] * lin[(i, j)];
        }
        affine[(i, 3)] = LPS_FLIP[i] * g.origin[i];
    }
    let mut header = NiftiHeader::default();
    header.pixdim = [1.0, g.spacing[0] as f32, g.spacing[1] as f32, g.spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    header.set_affine(&affine);
    header.xyzt_units = 2; // millimetres

    let [nx, ny, nz] = g.shape;
    let array = Array3::from_shape_vec((nx, ny, nz).f(), volume.data.clone())
        .map_err(|e| Error::format(path, e.to_string()))?;
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&array)
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::IDENTITY_DIRECTION;

    #[test]
    fn round_trip_preserves_data_and_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new(
            [5, 4, 3],
            [0.5, 1.25, 2.0],
            [10.0, -20.0, 5.5],
            [[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
        )
        .unwrap();
        let data: Vec<f32> = (0..g.voxel_count()).map(|i| i as f32 * 0.5 - 3.0).collect();
        let v = Volume3D::new(g, data).unwrap();
        for name in ["a.nii", "b.nii.gz"] {
            let p = dir.path().join(name);
            write(&p, &v).unwrap();
            let back = read(&p).unwrap();
            assert_eq!(back.data, v.data);
            assert_eq!(back.geometry.shape, v.geometry.shape);
            for a in 0..3 {
                assert!((back.geometry.spacing[a] - v.geometry.spacing[a]).abs() < 1e-6);
                assert!((back.geometry.origin[a] - v.geometry.origin[a]).abs() < 1e-5);
                for b in 0..3 {
                    assert!((back.geometry.direction[a][b] - v.geometry.direction[a][b]).abs() < 1e-6);
                }
            }
            assert_eq!(back.get(4, 0, 0), v.get(4, 0, 0));
            assert_eq!(back.get(0, 3, 2), v.get(0, 3, 2));
        }
    }

    #[test]
    fn identity_geometry_becomes_lps() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume3D::filled(Geometry::unit([2, 2, 2]), 1.0);
        let p = dir.path().join("u.nii");
        write(&p, &v).unwrap();
        let h = NiftiHeader::from_file(&p).unwrap();
        assert_eq!(h.srow_x[0], -1.0);
        assert_eq!(h.srow_y[1], -1.0);
        assert_eq!(h.srow_z[2], 1.0);
        assert_eq!(read(&p).unwrap().geometry.direction, IDENTITY_DIRECTION);
    }
}
