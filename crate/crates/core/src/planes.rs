//! Bounded plane extraction from a point-cloud map by region growing.
//!
//! Normals come from PCA over k nearest neighbors. Seeds are visited in
//! ascending curvature order (ties by index); a region accepts a neighbor
//! when its normal is within the angle threshold of the region normal and it
//! lies within the distance threshold of the region plane. Points whose PCA
//! normal is unreliable (high curvature, typically along creases) are
//! attached afterwards to the adjacent segment with the nearest plane.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{vec3_array, PointCloudMap};
use crate::spatial::VoxelGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaneConfig {
    /// Neighbor count for normal estimation and growing.
    pub k: usize,
    pub angle_threshold_deg: f64,
    /// Meters.
    pub distance_threshold: f64,
    pub min_points: usize,
    /// Square meters; smaller segments are dropped.
    pub min_area: f64,
    /// Surface variation above which a point's normal is not trusted.
    pub reliable_curvature: f64,
    /// Orientation viewpoint for normals when the map carries none;
    /// defaults to the map centroid.
    pub viewpoint: Option<[f64; 3]>,
}

impl Default for PlaneConfig {
    fn default() -> Self {
        Self {
            k: 20,
            angle_threshold_deg: 8.0,
            distance_threshold: 0.03,
            min_points: 100,
            min_area: 0.04,
            reliable_curvature: 0.02,
            viewpoint: None,
        }
    }
}

/// A bounded planar region.
///
/// `center` lies on the fitted plane at the middle of the member bounding
/// box, so every member satisfies `|local| <= extents / 2` per axis. The basis
/// columns are the local x, y and z (= normal) axes.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneSegment {
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub basis: Matrix3<f64>,
    pub extents: Vector3<f64>,
    pub members: Vec<u32>,
    pub rms: f64,
}

impl PlaneSegment {
    /// Builds a segment from its frame and extents, without member points.
    pub fn from_frame(center: Vector3<f64>, basis: Matrix3<f64>, extents: Vector3<f64>) -> Self {
        Self {
            center,
            normal: basis.column(2).into_owned(),
            basis,
            extents,
            members: Vec::new(),
            rms: 0.0,
        }
    }

    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.basis.transpose() * (p - self.center)
    }

    pub fn half_extents(&self) -> Vector3<f64> {
        self.extents / 2.0
    }

    /// Signed distance to the infinite plane.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        (p - self.center).dot(&self.normal)
    }

    /// Closest point of the segment box to `p`.
    pub fn clamp_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let h = self.half_extents();
        let l = self.to_local(p);
        let c = Vector3::new(
            l.x.clamp(-h.x, h.x),
            l.y.clamp(-h.y, h.y),
            l.z.clamp(-h.z, h.z),
        );
        self.center + self.basis * c
    }

    /// Euclidean distance from `p` to the segment box.
    pub fn box_distance(&self, p: &Vector3<f64>) -> f64 {
        (p - self.clamp_point(p)).norm()
    }

    pub fn area(&self) -> f64 {
        self.extents.x * self.extents.y
    }

    pub fn max_extent(&self) -> f64 {
        self.extents.x.max(self.extents.y)
    }
}

/// Per-point PCA normals.
#[derive(Clone, Debug)]
pub struct NormalEstimate {
    pub normals: Vec<Vector3<f64>>,
    /// Surface variation `l_min / (l_0 + l_1 + l_2)`.
    pub curvature: Vec<f64>,
    /// False where the neighborhood was rank deficient.
    pub valid: Vec<bool>,
    pub neighbors: Vec<Vec<u32>>,
}

pub fn estimate_normals(
    map: &PointCloudMap,
    k: usize,
    viewpoint: Option<Vector3<f64>>,
) -> Result<NormalEstimate> {
    if k < 3 {
        return Err(Error::InvalidInput("normal estimation needs k >= 3".into()));
    }
    if map.len() < k {
        return Err(Error::InvalidInput(format!(
            "normal estimation needs at least {k} points, map has {}",
            map.len()
        )));
    }
    let pts = &map.points;
    let grid = VoxelGrid::with_auto_cell(pts);
    let vp = viewpoint.unwrap_or_else(|| centroid(pts.iter()));
    let per_point: Vec<(Vector3<f64>, f64, bool, Vec<u32>)> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let nn: Vec<u32> = grid.knn(&pts[i], k).into_iter().map(|e| e.0).collect();
            let (mut n, curv, ok) = pca_normal(nn.iter().map(|&j| &pts[j as usize]));
            let reference = match &map.normals {
                Some(given) => given[i],
                None => vp - pts[i],
            };
            if n.dot(&reference) < 0.0 {
                n = -n;
            }
            (n, curv, ok, nn)
        })
        .collect();
    let mut out = NormalEstimate {
        normals: Vec::with_capacity(pts.len()),
        curvature: Vec::with_capacity(pts.len()),
        valid: Vec::with_capacity(pts.len()),
        neighbors: Vec::with_capacity(pts.len()),
    };
    for (n, c, ok, nn) in per_point {
        out.normals.push(n);
        out.curvature.push(c);
        out.valid.push(ok);
        out.neighbors.push(nn);
    }
    Ok(out)
}

fn centroid<'a>(pts: impl Iterator<Item = &'a Vector3<f64>>) -> Vector3<f64> {
    let mut sum = Vector3::zeros();
    let mut n = 0usize;
    for p in pts {
        sum += p;
        n += 1;
    }
    if n == 0 {
        sum
    } else {
        sum / n as f64
    }
}

/// Smallest-eigenvalue direction of the neighborhood covariance, surface
/// variation, and a rank flag.
fn pca_normal<'a>(pts: impl Iterator<Item = &'a Vector3<f64>> + Clone) -> (Vector3<f64>, f64, bool) {
    let (mean, cov) = covariance(pts);
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let l: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total = l[0] + l[1] + l[2];
    let _ = mean;
    if total <= 0.0 || l[1] <= 1e-10 * l[2] {
        return (Vector3::z(), 1.0, false);
    }
    let n = eig.eigenvectors.column(order[0]).normalize();
    (n, l[0] / total, true)
}

fn covariance<'a>(pts: impl Iterator<Item = &'a Vector3<f64>> + Clone) -> (Vector3<f64>, Matrix3<f64>) {
    let mean = centroid(pts.clone());
    let mut cov = Matrix3::zeros();
    let mut n = 0usize;
    for p in pts {
        let d = p - mean;
        cov += d * d.transpose();
        n += 1;
    }
    (mean, cov / n.max(1) as f64)
}

const UNASSIGNED: u32 = u32::MAX;
const DISCARDED: u32 = u32::MAX - 1;

struct Region {
    point: Vector3<f64>,
    normal: Vector3<f64>,
    members: Vec<u32>,
}

/// Grows planar regions and fits bounded segments.
pub fn region_growing(
    map: &PointCloudMap,
    normals: &NormalEstimate,
    config: &PlaneConfig,
) -> Vec<PlaneSegment> {
    let pts = &map.points;
    let n = pts.len();
    let cos_th = config.angle_threshold_deg.to_radians().cos();
    let d_th = config.distance_threshold;
    let reliable =
        |i: usize| normals.valid[i] && normals.curvature[i] <= config.reliable_curvature;

    let mut order: Vec<u32> = (0..n as u32).filter(|&i| reliable(i as usize)).collect();
    order.sort_by(|&a, &b| {
        normals.curvature[a as usize]
            .total_cmp(&normals.curvature[b as usize])
            .then(a.cmp(&b))
    });

    let mut label = vec![UNASSIGNED; n];
    let mut regions: Vec<Region> = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for &seed in &order {
        if label[seed as usize] != UNASSIGNED {
            continue;
        }
        let id = regions.len() as u32;
        let seed_normal = normals.normals[seed as usize];
        let mut region = Region {
            point: pts[seed as usize],
            normal: seed_normal,
            members: vec![seed],
        };
        let mut fitted = 1usize;
        label[seed as usize] = id;
        queue.clear();
        queue.push_back(seed);
        while let Some(i) = queue.pop_front() {
            for &j in &normals.neighbors[i as usize] {
                let ju = j as usize;
                if label[ju] != UNASSIGNED || !reliable(ju) {
                    continue;
                }
                if normals.normals[ju].dot(&region.normal) < cos_th {
                    continue;
                }
                if (pts[ju] - region.point).dot(&region.normal).abs() > d_th {
                    continue;
                }
                label[ju] = id;
                region.members.push(j);
                queue.push_back(j);
                if region.members.len() >= 10 && region.members.len() >= 2 * fitted {
                    let (c, nn) = fit_plane(pts, &region.members, &seed_normal);
                    region.point = c;
                    region.normal = nn;
                    fitted = region.members.len();
                }
            }
        }
        if region.members.len() < config.min_points {
            for &m in &region.members {
                label[m as usize] = DISCARDED;
            }
            continue;
        }
        let (c, nn) = fit_plane(pts, &region.members, &seed_normal);
        region.point = c;
        region.normal = nn;
        regions.push(region);
    }

    // attach unreliable-normal points bordering a segment
    for _ in 0..10 {
        let snapshot = label.clone();
        let mut changed = false;
        for i in 0..n {
            if snapshot[i] != UNASSIGNED || reliable(i) {
                continue;
            }
            let mut best: Option<(f64, u32)> = None;
            for &j in &normals.neighbors[i] {
                let l = snapshot[j as usize];
                if l >= DISCARDED {
                    continue;
                }
                let r = &regions[l as usize];
                let d = (pts[i] - r.point).dot(&r.normal).abs();
                if d <= d_th && best.map_or(true, |(bd, bl)| d < bd || (d == bd && l < bl)) {
                    best = Some((d, l));
                }
            }
            if let Some((_, l)) = best {
                label[i] = l;
                regions[l as usize].members.push(i as u32);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    regions
        .into_par_iter()
        .filter_map(|mut r| {
            r.members.sort_unstable();
            finalize_segment(pts, r, config)
        })
        .collect()
}

/// Least-squares plane through the members, normal signed like `reference`.
fn fit_plane(pts: &[Vector3<f64>], members: &[u32], reference: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let (mean, cov) = covariance(members.iter().map(|&i| &pts[i as usize]));
    let eig = SymmetricEigen::new(cov);
    let imin = eig.eigenvalues.imin();
    let mut n = eig.eigenvectors.column(imin).normalize();
    if n.dot(reference) < 0.0 {
        n = -n;
    }
    (mean, n)
}

fn finalize_segment(pts: &[Vector3<f64>], mut r: Region, config: &PlaneConfig) -> Option<PlaneSegment> {
    let d_th = config.distance_threshold;
    let reference = r.normal;
    for _ in 0..3 {
        let (c, n) = fit_plane(pts, &r.members, &reference);
        r.point = c;
        r.normal = n;
        let before = r.members.len();
        r.members
            .retain(|&i| (pts[i as usize] - c).dot(&n).abs() <= d_th);
        if r.members.len() == before {
            break;
        }
    }
    if r.members.len() < config.min_points {
        return None;
    }
    let (c, n) = fit_plane(pts, &r.members, &reference);
    // pruning moved the fit; keep only members consistent with the final plane
    r.members.retain(|&i| (pts[i as usize] - c).dot(&n).abs() <= d_th);
    if r.members.len() < config.min_points {
        return None;
    }
    let basis = plane_basis(&n);
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    let mut sq = 0.0;
    for &i in &r.members {
        let d = pts[i as usize] - c;
        let l = basis.transpose() * d;
        lo = lo.inf(&l);
        hi = hi.sup(&l);
        sq += l.z * l.z;
    }
    let rms = (sq / r.members.len() as f64).sqrt();
    let mut mid = (lo + hi) / 2.0;
    let mut extents = hi - lo;
    mid.z = 0.0;
    extents.z = 2.0 * lo.z.abs().max(hi.z.abs());
    let center = c + basis * mid;
    let seg = PlaneSegment {
        center,
        normal: n,
        basis,
        extents,
        members: r.members,
        rms,
    };
    (seg.area() >= config.min_area).then_some(seg)
}

/// Local frame of a plane: x is the projection of world x onto the plane
/// (world y when that projection is too short), z is the normal.
pub fn plane_basis(n: &Vector3<f64>) -> Matrix3<f64> {
    let project = |v: Vector3<f64>| v - n * n.dot(&v);
    let mut x = project(Vector3::x());
    if x.norm() < 0.1 {
        x = project(Vector3::y());
    }
    let x = x.normalize();
    let y = n.cross(&x);
    Matrix3::from_columns(&[x, y, *n])
}

/// Normals plus region growing in one call.
pub fn extract_planes(map: &PointCloudMap, config: &PlaneConfig) -> Result<Vec<PlaneSegment>> {
    let vp = config.viewpoint.map(Vector3::from);
    let normals = estimate_normals(map, config.k, vp)?;
    Ok(region_growing(map, &normals, config))
}

/// JSON record of a plane segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneRecord {
    #[serde(with = "vec3_array")]
    pub centroid: Vector3<f64>,
    #[serde(with = "vec3_array")]
    pub normal: Vector3<f64>,
    /// Row-major 3x3; columns are the local x, y, z axes.
    pub basis: [[f64; 3]; 3],
    #[serde(with = "vec3_array")]
    pub extents: Vector3<f64>,
    pub member_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanesFile {
    pub planes: Vec<PlaneRecord>,
}

impl From<&PlaneSegment> for PlaneRecord {
    fn from(s: &PlaneSegment) -> Self {
        let b = &s.basis;
        Self {
            centroid: s.center,
            normal: s.normal,
            basis: [
                [b[(0, 0)], b[(0, 1)], b[(0, 2)]],
                [b[(1, 0)], b[(1, 1)], b[(1, 2)]],
                [b[(2, 0)], b[(2, 1)], b[(2, 2)]],
            ],
            extents: s.extents,
            member_count: s.members.len(),
        }
    }
}

impl PlaneRecord {
    pub fn to_segment(&self) -> PlaneSegment {
        let b = &self.basis;
        let basis = Matrix3::new(
            b[0][0], b[0][1], b[0][2], b[1][0], b[1][1], b[1][2], b[2][0], b[2][1], b[2][2],
        );
        PlaneSegment {
            center: self.centroid,
            normal: self.normal,
            basis,
            extents: self.extents,
            members: Vec::new(),
            rms: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn grid_plane(n: usize, step: f64) -> Vec<Vector3<f64>> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                v.push(Vector3::new(i as f64 * step, j as f64 * step, 0.0));
            }
        }
        v
    }

    #[test]
    fn planar_grid_normals_are_vertical() {
        let map = PointCloudMap::new(grid_plane(30, 0.05));
        let est = estimate_normals(&map, 20, Some(Vector3::new(0.7, 0.7, 5.0))).unwrap();
        for (n, ok) in est.normals.iter().zip(&est.valid) {
            assert!(ok);
            assert!((n - Vector3::z()).norm() < 1e-9, "{n:?}");
        }
    }

    #[test]
    fn sphere_normals_are_radial() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<_> = (0..10_000)
            .map(|_| {
                let v = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0f64),
                );
                v.normalize()
            })
            .filter(|v: &Vector3<f64>| v.iter().all(|c| c.is_finite()))
            .collect();
        let map = PointCloudMap::new(pts.clone());
        let est = estimate_normals(&map, 10, None).unwrap();
        let worst = pts
            .iter()
            .zip(&est.normals)
            .map(|(p, n)| n.dot(p).abs().min(1.0).acos().to_degrees())
            .fold(0.0, f64::max);
        assert!(worst < 5.0, "worst deviation {worst}");
    }

    #[test]
    fn collinear_points_are_flagged() {
        let map = PointCloudMap::new(vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(2.0, 0.0, 0.0),
        ]);
        let est = estimate_normals(&map, 3, None).unwrap();
        assert!(est.valid.iter().all(|v| !v));
        assert!(estimate_normals(&map, 4, None).is_err());
        assert!(estimate_normals(&map, 2, None).is_err());
    }

    /// Two 1 m x 1 m walls meeting along the z axis, 50 x 50 samples each.
    fn two_walls() -> (PointCloudMap, usize) {
        let mut pts = Vec::new();
        let mut normals = Vec::new();
        let m = 50;
        let step = 1.0 / (m - 1) as f64;
        for i in 0..m {
            for j in 0..m {
                pts.push(Vector3::new(0.0, 0.01 + i as f64 * step, j as f64 * step));
                normals.push(Vector3::x());
            }
        }
        let first = pts.len();
        for i in 0..m {
            for j in 0..m {
                pts.push(Vector3::new(0.01 + i as f64 * step, 0.0, j as f64 * step));
                normals.push(Vector3::y());
            }
        }
        (
            PointCloudMap {
                points: pts,
                intensities: None,
                normals: Some(normals),
            },
            first,
        )
    }

    #[test]
    fn two_perpendicular_walls_give_two_segments() {
        let (map, first) = two_walls();
        let segs = extract_planes(&map, &PlaneConfig::default()).unwrap();
        assert_eq!(segs.len(), 2);
        for s in &segs {
            let on_a = s.members.iter().filter(|&&i| (i as usize) < first).count();
            let on_b = s.members.len() - on_a;
            let (own, truth) = if on_a > on_b { (on_a, Vector3::x()) } else { (on_b, Vector3::y()) };
            assert!(own as f64 >= 0.99 * 2500.0, "captured {own}");
            assert!(s.members.len() - own <= 25);
            assert!(s.normal.dot(&truth).acos().to_degrees() < 1.0);
        }
    }

    #[test]
    fn noisy_plane_normal_within_one_degree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.002).unwrap();
        let tilt = Vector3::new(0.1, -0.2, 1.0).normalize();
        let basis = plane_basis(&tilt);
        let pts: Vec<_> = (0..4000)
            .map(|_| {
                let l = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    noise.sample(&mut rng),
                );
                basis * l
            })
            .collect();
        let map = PointCloudMap::new(pts);
        let cfg = PlaneConfig {
            distance_threshold: 0.01,
            viewpoint: Some([0.0, 0.0, 3.0]),
            ..Default::default()
        };
        let segs = extract_planes(&map, &cfg).unwrap();
        assert_eq!(segs.len(), 1);
        assert!(segs[0].normal.dot(&tilt).acos().to_degrees() < 1.0);
    }

    #[test]
    fn random_cube_yields_only_planar_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<_> = (0..5000)
            .map(|_| Vector3::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
            .collect();
        let map = PointCloudMap::new(pts);
        let cfg = PlaneConfig {
            min_points: 50,
            ..Default::default()
        };
        let segs = extract_planes(&map, &cfg).unwrap();
        for s in &segs {
            assert!(s.rms <= cfg.distance_threshold);
        }
    }

    #[test]
    fn segment_invariants_hold() {
        let (map, _) = two_walls();
        let cfg = PlaneConfig::default();
        let segs = extract_planes(&map, &cfg).unwrap();
        let mut seen = vec![false; map.len()];
        for s in &segs {
            assert!((s.normal.norm() - 1.0).abs() < 1e-12);
            assert!((s.basis.column(2) - s.normal).norm() < 1e-12);
            assert!(s.extents.z <= 2.0 * cfg.distance_threshold);
            let h = s.half_extents();
            for &i in &s.members {
                assert!(!seen[i as usize], "point {i} in two segments");
                seen[i as usize] = true;
                let l = s.to_local(&map.points[i as usize]);
                assert!(l.x.abs() <= h.x + 1e-9 && l.y.abs() <= h.y + 1e-9 && l.z.abs() <= h.z + 1e-9);
                assert!(s.signed_distance(&map.points[i as usize]).abs() <= cfg.distance_threshold);
            }
        }
        let again = extract_planes(&map, &cfg).unwrap();
        assert_eq!(segs, again);
    }
}
