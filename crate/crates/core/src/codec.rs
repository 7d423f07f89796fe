//! Landmarks as multi-label segmentation maps.
//!
//! Landmark `i` of the dataset class list becomes a `(2r+1)³` cube of value `i + 1` around
//! its nearest voxel. Decoding takes the unweighted centroid of each label's voxels.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dataset::CaseRecord;
use crate::error::{Error, Result};
use crate::geometry::{resampled_geometry, round_voxel, Geometry, LandmarkSet, Vec3, Volume3D};
use crate::io;

pub const DEFAULT_CUBE_RADIUS: usize = 1;

/// Minimum Chebyshev separation (in voxels) between landmark centres for radius-1 cubes.
pub const MIN_SEPARATION_VOXELS: i64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    /// Integer-valued; 0 is background.
    pub volume: Volume3D,
    /// Landmark name and its label value, in class order.
    pub label_values: Vec<(String, u32)>,
}

impl LabelMap {
    /// Label values `1..=classes.len()` in class order.
    pub fn empty(geometry: Geometry, classes: &[String]) -> Self {
        LabelMap {
            volume: Volume3D::filled(geometry, 0.0),
            label_values: classes.iter().enumerate().map(|(i, c)| (c.clone(), i as u32 + 1)).collect(),
        }
    }

    pub fn value_of(&self, name: &str) -> Option<u32> {
        self.label_values.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// Voxel counts per label value, index 0 is background.
    pub fn histogram(&self) -> Vec<usize> {
        let max = self.label_values.iter().map(|&(_, v)| v).max().unwrap_or(0) as usize;
        let mut h = vec![0usize; max + 1];
        for &x in &self.volume.data {
            let v = x as usize;
            if v < h.len() {
                h[v] += 1;
            }
        }
        h
    }

    pub fn validate(&self) -> Result<()> {
        for &x in &self.volume.data {
            if x != 0.0 && (x.fract() != 0.0 || x < 0.0 || !self.label_values.iter().any(|&(_, v)| v as f32 == x)) {
                return Err(Error::Validation(format!("label value {x} is not declared")));
            }
        }
        for (name, value) in &self.label_values {
            let components = connected_components(&self.volume, *value as f32);
            if components > 1 {
                return Err(Error::Validation(format!("landmark {name} has {components} disconnected label regions")));
            }
        }
        Ok(())
    }
}

/// Number of 6-connected components carrying `value`.
pub fn connected_components(volume: &Volume3D, value: f32) -> usize {
    let g = &volume.geometry;
    let [nx, ny, nz] = g.shape;
    let mut seen = vec![false; volume.data.len()];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..volume.data.len() {
        if seen[start] || volume.data[start] != value {
            continue;
        }
        count += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let [x, y, z] = g.unravel(i);
            let mut visit = |xx: usize, yy: usize, zz: usize| {
                let j = g.linear_index(xx, yy, zz);
                if !seen[j] && volume.data[j] == value {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(x - 1, y, z)
            }
            if x + 1 < nx {
                visit(x + 1, y, z)
            }
            if y > 0 {
                visit(x, y - 1, z)
            }
            if y + 1 < ny {
                visit(x, y + 1, z)
            }
            if z > 0 {
                visit(x, y, z - 1)
            }
            if z + 1 < nz {
                visit(x, y, z + 1)
            }
        }
    }
    count
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedLabels {
    pub map: LabelMap,
    /// Landmarks whose cube was cut by the grid border.
    pub clipped: Vec<String>,
}

pub fn chebyshev(a: [i64; 3], b: [i64; 3]) -> i64 {
    (0..3).map(|k| (a[k] - b[k]).abs()).max().unwrap_or(0)
}

/// Paints one label cube per landmark on `geometry`.
///
/// `classes` fixes label values (`i + 1` for the i-th class); every landmark name must be
/// one of them, classes missing from `lm` simply get no cube.
pub fn encode_label_map(
    geometry: &Geometry,
    lm: &LandmarkSet,
    classes: &[String],
    cube_radius: usize,
) -> Result<EncodedLabels> {
    let mut map = LabelMap::empty(geometry.clone(), classes);
    let r = cube_radius as i64;
    let mut centres: Vec<(&str, [i64; 3], u32)> = Vec::with_capacity(lm.len());
    for (name, p) in lm.iter() {
        let value = map
            .value_of(name)
            .ok_or_else(|| Error::Encoding(format!("case {}: landmark {name} is not a declared class", lm.case_id)))?;
        let c = round_voxel(geometry.world_to_voxel(p)?);
        if !geometry.contains_index(c) {
            return Err(Error::Encoding(format!(
                "case {}: landmark {name} at voxel {c:?} lies outside grid {:?}",
                lm.case_id, geometry.shape
            )));
        }
        centres.push((name, c, value));
    }
    for (i, (na, ca, _)) in centres.iter().enumerate() {
        for (nb, cb, _) in &centres[i + 1..] {
            let d = chebyshev(*ca, *cb);
            if d < 2 * r + 1 {
                return Err(Error::Validation(format!(
                    "case {}: landmarks {na} and {nb} are {d} voxels apart, cubes would overlap",
                    lm.case_id
                )));
            }
        }
    }

    let mut clipped = Vec::new();
    for (name, c, value) in centres {
        let mut was_clipped = false;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let v = [c[0] + dx, c[1] + dy, c[2] + dz];
                    if geometry.contains_index(v) {
                        map.volume.set(v[0] as usize, v[1] as usize, v[2] as usize, value as f32);
                    } else {
                        was_clipped = true;
                    }
                }
            }
        }
        if was_clipped {
            log::warn!("case {}: label cube of {name} clipped at the grid border", lm.case_id);
            clipped.push(name.to_string());
        }
    }
    Ok(EncodedLabels { map, clipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedLandmarks {
    pub landmarks: LandmarkSet,
    /// Classes with no foreground voxels.
    pub missing: Vec<String>,
}

/// Per-label centroid of voxel indices, as continuous voxel coordinates, in label order.
pub fn label_centroids_voxel(map: &LabelMap) -> Vec<Option<Vec3>> {
    let g = &map.volume.geometry;
    let max = map.label_values.iter().map(|&(_, v)| v).max().unwrap_or(0) as usize;
    let mut sums = vec![[0.0f64; 3]; max + 1];
    let mut counts = vec![0usize; max + 1];
    for (i, &x) in map.volume.data.iter().enumerate() {
        if x <= 0.0 {
            continue;
        }
        let v = x as usize;
        if v > max {
            continue;
        }
        let [ix, iy, iz] = g.unravel(i);
        sums[v][0] += ix as f64;
        sums[v][1] += iy as f64;
        sums[v][2] += iz as f64;
        counts[v] += 1;
    }
    map.label_values
        .iter()
        .map(|&(_, v)| {
            let n = counts[v as usize];
            (n > 0).then(|| {
                let s = sums[v as usize];
                [s[0] / n as f64, s[1] / n as f64, s[2] / n as f64]
            })
        })
        .collect()
}

pub fn decode_label_centroids(map: &LabelMap, case_id: &str) -> DecodedLandmarks {
    let g = &map.volume.geometry;
    let mut landmarks = LandmarkSet::empty(case_id);
    let mut missing = Vec::new();
    for ((name, _), centroid) in map.label_values.iter().zip(label_centroids_voxel(map)) {
        match centroid {
            Some(c) => landmarks.push(name.clone(), g.voxel_to_world(c)),
            None => missing.push(name.clone()),
        }
    }
    if !missing.is_empty() {
        log::info!("case {case_id}: no label voxels for {missing:?}");
    }
    DecodedLandmarks { landmarks, missing }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationViolation {
    pub a: String,
    pub b: String,
    pub chebyshev_voxels: i64,
    /// `"native"` or `"plan"`.
    pub grid: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClippedCube {
    pub landmark: String,
    /// Centroid displacement caused by the clipping, in voxels.
    pub centroid_shift_voxels: Vec3,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseValidation {
    pub case_id: String,
    pub out_of_grid: Vec<String>,
    pub separation: Vec<SeparationViolation>,
    pub missing_classes: Vec<String>,
    pub unknown_classes: Vec<String>,
    pub non_finite: Vec<String>,
    pub clipped: Vec<ClippedCube>,
    pub unreadable: Option<String>,
}

impl CaseValidation {
    /// Clipped cubes are warnings; everything else is a violation.
    pub fn has_violations(&self) -> bool {
        !(self.out_of_grid.is_empty()
            && self.separation.is_empty()
            && self.missing_classes.is_empty()
            && self.unknown_classes.is_empty()
            && self.non_finite.is_empty()
            && self.unreadable.is_none())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub cases: Vec<CaseValidation>,
}

impl ValidationReport {
    pub fn violations(&self) -> Vec<&CaseValidation> {
        self.cases.iter().filter(|c| c.has_violations()).collect()
    }

    pub fn is_clean(&self) -> bool {
        self.violations().is_empty()
    }
}

fn separation_on(geometry: &Geometry, lm: &LandmarkSet, grid: &str, out: &mut Vec<SeparationViolation>) {
    let centres: Vec<(&str, [i64; 3])> = lm
        .iter()
        .filter(|(_, p)| p.iter().all(|c| c.is_finite()))
        .filter_map(|(n, p)| geometry.world_to_voxel(p).ok().map(|v| (n, round_voxel(v))))
        .collect();
    for (i, (na, ca)) in centres.iter().enumerate() {
        for (nb, cb) in &centres[i + 1..] {
            let d = chebyshev(*ca, *cb);
            if d < MIN_SEPARATION_VOXELS {
                out.push(SeparationViolation {
                    a: na.to_string(),
                    b: nb.to_string(),
                    chebyshev_voxels: d,
                    grid: grid.to_string(),
                });
            }
        }
    }
}

/// Checks one case against the grid it lives on and, optionally, the plan-spacing grid.
pub fn validate_case(
    case_id: &str,
    geometry: &Geometry,
    lm: &LandmarkSet,
    classes: &[String],
    plan_spacing: Option<Vec3>,
) -> CaseValidation {
    let mut report = CaseValidation { case_id: case_id.to_string(), ..Default::default() };
    let r = DEFAULT_CUBE_RADIUS as i64;
    for (name, p) in lm.iter() {
        if !classes.iter().any(|c| c == name) {
            report.unknown_classes.push(name.to_string());
        }
        if p.iter().any(|c| !c.is_finite()) {
            report.non_finite.push(name.to_string());
            continue;
        }
        let Ok(v) = geometry.world_to_voxel(p) else {
            report.out_of_grid.push(name.to_string());
            continue;
        };
        let c = round_voxel(v);
        if !geometry.contains_index(c) {
            report.out_of_grid.push(name.to_string());
            continue;
        }
        // Centroid of the clipped cube relative to its centre.
        let mut shift = [0.0; 3];
        let mut clipped = false;
        for a in 0..3 {
            let lo = (c[a] - r).max(0);
            let hi = (c[a] + r).min(geometry.shape[a] as i64 - 1);
            if hi - lo < 2 * r {
                clipped = true;
            }
            shift[a] = (lo + hi) as f64 / 2.0 - c[a] as f64;
        }
        if clipped {
            report.clipped.push(ClippedCube { landmark: name.to_string(), centroid_shift_voxels: shift });
        }
    }
    for class in classes {
        if lm.position(class).is_none() {
            report.missing_classes.push(class.clone());
        }
    }
    separation_on(geometry, lm, "native", &mut report.separation);
    if let Some(spacing) = plan_spacing {
        if let Ok(plan_geom) = resampled_geometry(geometry, spacing) {
            separation_on(&plan_geom, lm, "plan", &mut report.separation);
        }
    }
    report
}

/// Report-only validation of a list of cases; unreadable images are recorded, not raised.
pub fn validate_dataset(cases: &[CaseRecord], classes: &[String], plan_spacing: Option<Vec3>) -> ValidationReport {
    let mut report = ValidationReport::default();
    for case in cases {
        let geometry = match io::read_volume(&case.image_path) {
            Ok(v) => v.geometry,
            Err(e) => {
                report.cases.push(CaseValidation {
                    case_id: case.case_id.clone(),
                    unreadable: Some(e.to_string()),
                    ..Default::default()
                });
                continue;
            }
        };
        let empty = LandmarkSet::empty(&case.case_id);
        let lm = case.landmarks.as_ref().unwrap_or(&empty);
        report.cases.push(validate_case(&case.case_id, &geometry, lm, classes, plan_spacing));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn classes(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("L{i}")).collect()
    }

    fn one(p: Vec3) -> LandmarkSet {
        LandmarkSet::new("c", vec!["L0".into()], vec![p]).unwrap()
    }

    #[test]
    fn single_interior_cube_has_27_voxels() {
        let g = Geometry::unit([32, 32, 32]);
        let enc = encode_label_map(&g, &one([10.0, 10.0, 10.0]), &classes(1), 1).unwrap();
        assert_eq!(enc.map.histogram()[1], 27);
        assert!(enc.clipped.is_empty());
        enc.map.validate().unwrap();
    }

    #[test]
    fn empty_set_gives_background() {
        let g = Geometry::unit([8, 8, 8]);
        let enc = encode_label_map(&g, &LandmarkSet::empty("c"), &classes(2), 1).unwrap();
        assert!(enc.map.volume.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn corner_cube_is_clipped_to_8_voxels() {
        // Oracle: lattice points with Chebyshev radius 1 around the origin inside the grid.
        let mut expected = 0;
        for x in -1i64..=1 {
            for y in -1i64..=1 {
                for z in -1i64..=1 {
                    if x >= 0 && y >= 0 && z >= 0 {
                        expected += 1;
                    }
                }
            }
        }
        let g = Geometry::unit([16, 16, 16]);
        let enc = encode_label_map(&g, &one([0.0, 0.0, 0.0]), &classes(1), 1).unwrap();
        assert_eq!(enc.map.histogram()[1], expected);
        assert_eq!(expected, 8);
        assert_eq!(enc.clipped, vec!["L0".to_string()]);
    }

    #[test]
    fn outside_and_overlap_errors() {
        let g = Geometry::unit([16, 16, 16]);
        assert!(matches!(encode_label_map(&g, &one([-1.0, 3.0, 3.0]), &classes(1), 1), Err(Error::Encoding(_))));
        let lm = LandmarkSet::new("c", classes(2), vec![[5.0, 5.0, 5.0], [7.0, 5.0, 5.0]]).unwrap();
        assert!(matches!(encode_label_map(&g, &lm, &classes(2), 1), Err(Error::Validation(_))));
        let unknown = LandmarkSet::new("c", vec!["zz".into()], vec![[5.0; 3]]).unwrap();
        assert!(matches!(encode_label_map(&g, &unknown, &classes(1), 1), Err(Error::Encoding(_))));
    }

    #[test]
    fn symmetric_cube_decodes_to_centre() {
        let g = Geometry::unit([32, 32, 32]);
        let enc = encode_label_map(&g, &one([10.0, 10.0, 10.0]), &classes(1), 1).unwrap();
        let dec = decode_label_centroids(&enc.map, "c");
        assert_eq!(dec.landmarks.position("L0"), Some([10.0, 10.0, 10.0]));
    }

    #[test]
    fn clipped_face_cube_centroid() {
        // Oracle: x ∈ {0, 1}, y ∈ {4,5,6}, z ∈ {4,5,6}; mean x = 0.5.
        let mut sum = [0.0; 3];
        let mut n = 0.0;
        for x in 0..=1 {
            for y in 4..=6 {
                for z in 4..=6 {
                    sum[0] += x as f64;
                    sum[1] += y as f64;
                    sum[2] += z as f64;
                    n += 1.0;
                }
            }
        }
        let expected = [sum[0] / n, sum[1] / n, sum[2] / n];
        let g = Geometry::unit([16, 16, 16]);
        let enc = encode_label_map(&g, &one([0.0, 5.0, 5.0]), &classes(1), 1).unwrap();
        let dec = decode_label_centroids(&enc.map, "c");
        assert_eq!(dec.landmarks.position("L0"), Some(expected));
        assert_eq!(expected, [0.5, 5.0, 5.0]);
    }

    #[test]
    fn missing_labels_are_reported() {
        let g = Geometry::unit([16, 16, 16]);
        let enc = encode_label_map(&g, &one([5.0; 3]), &classes(3), 1).unwrap();
        let dec = decode_label_centroids(&enc.map, "c");
        assert_eq!(dec.landmarks.len(), 1);
        assert_eq!(dec.missing, vec!["L1".to_string(), "L2".to_string()]);
    }

    #[test]
    fn label_map_validation_catches_split_regions() {
        let g = Geometry::unit([8, 8, 8]);
        let mut map = LabelMap::empty(g, &classes(1));
        map.volume.set(1, 1, 1, 1.0);
        map.volume.set(5, 5, 5, 1.0);
        assert!(map.validate().is_err());
        let mut map = LabelMap::empty(Geometry::unit([4, 4, 4]), &classes(1));
        map.volume.set(1, 1, 1, 3.0);
        assert!(map.validate().is_err());
    }

    #[test]
    fn validation_flags_close_pairs_and_out_of_grid() {
        let g = Geometry::unit([32, 32, 32]);
        let lm = LandmarkSet::new("c", classes(2), vec![[10.0, 10.0, 10.0], [12.0, 10.0, 10.0]]).unwrap();
        let rep = validate_case("c", &g, &lm, &classes(2), None);
        assert_eq!(rep.separation.len(), 1);
        assert_eq!(rep.separation[0].chebyshev_voxels, 2);

        let lm = LandmarkSet::new("c", classes(2), vec![[10.0, 10.0, 10.0], [20.0, 10.0, 10.0]]).unwrap();
        let rep = validate_case("c", &g, &lm, &classes(2), Some([1.0; 3]));
        assert!(!rep.has_violations());

        let lm = LandmarkSet::new("c", classes(2), vec![[10.0, 10.0, 10.0], [40.0, 10.0, 10.0]]).unwrap();
        let rep = validate_case("c", &g, &lm, &classes(2), None);
        assert_eq!(rep.out_of_grid, vec!["L1".to_string()]);

        let lm = LandmarkSet::new("c", vec!["L0".into()], vec![[10.0; 3]]).unwrap();
        let rep = validate_case("c", &g, &lm, &classes(2), None);
        assert_eq!(rep.missing_classes, vec!["L1".to_string()]);
    }

    #[test]
    fn plan_spacing_separation() {
        // 4 mm apart: 4 voxels natively, 2 voxels on a 2 mm grid.
        let g = Geometry::unit([32, 32, 32]);
        let lm = LandmarkSet::new("c", classes(2), vec![[10.0, 10.0, 10.0], [14.0, 10.0, 10.0]]).unwrap();
        let rep = validate_case("c", &g, &lm, &classes(2), Some([2.0; 3]));
        assert_eq!(rep.separation.len(), 1);
        assert_eq!(rep.separation[0].grid, "plan");
        assert_eq!(rep.separation[0].chebyshev_voxels, 2);
    }

    #[test]
    fn clipped_cube_shift_is_recorded() {
        let g = Geometry::unit([16, 16, 16]);
        let rep = validate_case("c", &g, &one([0.0, 5.0, 15.0]), &classes(1), None);
        assert_eq!(rep.clipped.len(), 1);
        assert_eq!(rep.clipped[0].centroid_shift_voxels, [0.5, 0.0, -0.5]);
        assert!(!rep.has_violations());
    }

    fn separated_points(n: usize, shape: usize) -> impl Strategy<Value = Vec<[i64; 3]>> {
        proptest::collection::vec(proptest::array::uniform3(1i64..(shape as i64 - 1)), n)
            .prop_filter("separation", |pts| {
                pts.iter().enumerate().all(|(i, a)| pts[i + 1..].iter().all(|b| chebyshev(*a, *b) >= 3))
            })
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(pts in separated_points(4, 24), sp in proptest::array::uniform3(0.5f64..2.0),
                                    jitter in proptest::array::uniform3(-0.4f64..0.4)) {
            let g = Geometry::new([24, 24, 24], sp, [3.0, -7.0, 11.0], crate::geometry::IDENTITY_DIRECTION).unwrap();
            let cls = classes(pts.len());
            let positions: Vec<Vec3> = pts.iter()
                .map(|p| g.voxel_to_world([p[0] as f64 + jitter[0], p[1] as f64 + jitter[1], p[2] as f64 + jitter[2]]))
                .collect();
            let lm = LandmarkSet::new("c", cls.clone(), positions.clone()).unwrap();
            let enc = encode_label_map(&g, &lm, &cls, 1).unwrap();
            prop_assert_eq!(enc.map.histogram().iter().skip(1).sum::<usize>(), 27 * pts.len());
            let centroids = label_centroids_voxel(&enc.map);
            for (c, p) in centroids.iter().zip(&pts) {
                let c = c.unwrap();
                prop_assert_eq!([c[0] as i64, c[1] as i64, c[2] as i64], *p);
                prop_assert!(c.iter().all(|v| v.fract() == 0.0));
            }
        }

        #[test]
        fn decode_is_label_permutation_invariant(pts in separated_points(3, 20), perm in Just([2u32, 0, 1])) {
            let g = Geometry::unit([20, 20, 20]);
            let cls = classes(3);
            let positions: Vec<Vec3> = pts.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
            let lm = LandmarkSet::new("c", cls.clone(), positions).unwrap();
            let enc = encode_label_map(&g, &lm, &cls, 1).unwrap();
            // Relabel: class i now carries value perm[i] + 1.
            let mut relabelled = enc.map.clone();
            for x in relabelled.volume.data.iter_mut() {
                if *x > 0.0 { *x = (perm[*x as usize - 1] + 1) as f32; }
            }
            for (i, entry) in relabelled.label_values.iter_mut().enumerate() {
                entry.1 = perm[i] + 1;
            }
            let a = decode_label_centroids(&enc.map, "c");
            let b = decode_label_centroids(&relabelled, "c");
            prop_assert_eq!(a, b);
        }
    }
}
