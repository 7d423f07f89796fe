//! Markdown tables and PNG slice overlays for evaluation results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::geometry::{round_voxel, LandmarkSet, Volume3D};
use crate::io;

pub const GT_COLOR: Rgb<u8> = Rgb([40, 90, 255]);
pub const PRED_COLOR: Rgb<u8> = Rgb([255, 220, 0]);

fn pm(mean: f64, std: f64) -> String {
    format!("{mean:.2}±{std:.2}")
}

fn fmt_threshold(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("{t:.0}")
    } else {
        format!("{t}")
    }
}

/// Summary table, per-class table and (when present) a biometry table.
pub fn render_tables(report: &EvalReport) -> String {
    let u = &report.unit;
    let mut s = String::new();
    let th: Vec<String> = report.thresholds.iter().map(|&t| format!("SDR@{} {u} [%]", fmt_threshold(t))).collect();
    let _ = writeln!(s, "## Summary\n");
    let _ = writeln!(s, "| Cases | Landmarks | MRE±Std [{u}] | {} |", th.join(" | "));
    let _ = writeln!(s, "|---|---|---|{}", "---|".repeat(th.len()));
    let sdr: Vec<String> = report.sdr.iter().map(|v| format!("{v:.2}")).collect();
    let _ = writeln!(
        s,
        "| {} | {} | {} | {} |",
        report.case_count,
        report.landmark_count,
        pm(report.mre, report.std),
        sdr.join(" | ")
    );
    let _ = writeln!(s, "\n## Per landmark\n");
    let _ = writeln!(s, "| Landmark | N | MRE±Std [{u}] | {} |", th.join(" | "));
    let _ = writeln!(s, "|---|---|---|{}", "---|".repeat(th.len()));
    for row in &report.per_class {
        let sdr: Vec<String> = row.sdr.iter().map(|v| format!("{v:.2}")).collect();
        let _ = writeln!(s, "| {} | {} | {} | {} |", row.name, row.count, pm(row.mre, row.std), sdr.join(" | "));
    }
    if !report.biometry.is_empty() {
        let _ = writeln!(s, "\n## Biometry\n");
        let _ = writeln!(s, "| Measurement | N | Abs. error±Std [{u}] |");
        let _ = writeln!(s, "|---|---|---|");
        for b in &report.biometry {
            let _ = writeln!(s, "| {} | {} | {} |", b.measurement, b.count, pm(b.mean_abs_error, b.std));
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayStyle {
    /// Output pixels per millimetre; each voxel becomes `round(spacing · scale)` pixels.
    pub pixels_per_mm: f64,
    pub marker_arm: u32,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        OverlayStyle { pixels_per_mm: 4.0, marker_arm: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayFigure {
    pub landmark: String,
    pub slice_z: usize,
    pub path: PathBuf,
    pub gt_pixel: (u32, u32),
    pub pred_pixel: Option<(u32, u32)>,
}

/// Pixels per voxel along x and y.
pub fn zoom_factors(volume: &Volume3D, style: &OverlayStyle) -> (u32, u32) {
    let z = |s: f64| ((s * style.pixels_per_mm).round() as u32).max(1);
    (z(volume.geometry.spacing[0]), z(volume.geometry.spacing[1]))
}

/// Centre pixel of voxel `(x, y)` in a zoomed slice.
pub fn marker_pixel(x: f64, y: f64, zoom: (u32, u32)) -> (u32, u32) {
    ((x * zoom.0 as f64 + zoom.0 as f64 / 2.0).floor() as u32, (y * zoom.1 as f64 + zoom.1 as f64 / 2.0).floor() as u32)
}

fn draw_plus(img: &mut RgbImage, (u, v): (u32, u32), arm: u32, color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    for d in -(arm as i64)..=arm as i64 {
        let (x, y) = (u as i64 + d, v as i64);
        if x >= 0 && (x as u32) < w && (y as u32) < h {
            img.put_pixel(x as u32, y as u32, color);
        }
        let (x, y) = (u as i64, v as i64 + d);
        if y >= 0 && (y as u32) < h && (x as u32) < w {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn draw_cross(img: &mut RgbImage, (u, v): (u32, u32), arm: u32, color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    for d in -(arm as i64)..=arm as i64 {
        for (x, y) in [(u as i64 + d, v as i64 + d), (u as i64 + d, v as i64 - d)] {
            if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

/// Grey-scale axial slice `z`, windowed to its own min/max.
fn slice_image(volume: &Volume3D, z: usize, zoom: (u32, u32)) -> RgbImage {
    let [nx, ny, _] = volume.shape();
    let slice = &volume.data[nx * ny * z..nx * ny * (z + 1)];
    let (lo, hi) = slice.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(nx as u32 * zoom.0, ny as u32 * zoom.1, |u, v| {
        let (x, y) = ((u / zoom.0) as usize, (v / zoom.1) as usize);
        let g = (((slice[x + nx * y] - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([g, g, g])
    })
}

/// One PNG per ground-truth landmark: the axial slice through it, GT `+` in blue and the
/// prediction `×` in yellow.
pub fn render_overlays(
    image: &Volume3D,
    gt: &LandmarkSet,
    pred: &LandmarkSet,
    out_dir: &Path,
    style: &OverlayStyle,
) -> Result<Vec<OverlayFigure>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let zoom = zoom_factors(image, style);
    let mut figures = Vec::new();
    for (name, p) in gt.iter() {
        let c = image.geometry.world_to_voxel(p)?;
        let vi = round_voxel(c);
        if !image.geometry.contains_index(vi) {
            log::warn!("case {}: {name} lies outside the volume, no overlay", gt.case_id);
            continue;
        }
        let z = vi[2] as usize;
        let mut img = slice_image(image, z, zoom);
        let gt_px = marker_pixel(vi[0] as f64, vi[1] as f64, zoom);
        let pred_px = match pred.position(name) {
            Some(q) => {
                let pv = round_voxel(image.geometry.world_to_voxel(q)?);
                if pv[0] >= 0
                    && pv[1] >= 0
                    && (pv[0] as usize) < image.shape()[0]
                    && (pv[1] as usize) < image.shape()[1]
                {
                    Some(marker_pixel(pv[0] as f64, pv[1] as f64, zoom))
                } else {
                    None
                }
            }
            None => None,
        };
        if let Some(px) = pred_px {
            draw_cross(&mut img, px, style.marker_arm, PRED_COLOR);
        }
        draw_plus(&mut img, gt_px, style.marker_arm, GT_COLOR);
        let file = format!("{}_{}.png", gt.case_id, sanitize(name));
        let path = out_dir.join(&file);
        img.save(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        figures.push(OverlayFigure {
            landmark: name.to_string(),
            slice_z: z,
            path,
            gt_pixel: gt_px,
            pred_pixel: pred_px,
        });
    }
    Ok(figures)
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// `index.md` linking the tables file and every figure, relative to `dir`.
pub fn write_index(dir: &Path, tables_file: &str, figures: &[OverlayFigure]) -> Result<()> {
    let mut s = String::from("# Evaluation\n\n");
    let _ = writeln!(s, "- [Tables]({tables_file})\n");
    if !figures.is_empty() {
        let _ = writeln!(s, "## Overlays\n\nGround truth `+` blue, prediction `×` yellow.\n");
        for f in figures {
            let rel = f.path.strip_prefix(dir).unwrap_or(&f.path);
            let _ = writeln!(s, "- {} (z = {}): ![{}]({})", f.landmark, f.slice_z, f.landmark, rel.display());
        }
    }
    io::write_text(&dir.join("index.md"), &s)
}
