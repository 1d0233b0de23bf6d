//! Procedural scenes, trajectories and measurements for evaluation without
//! hardware, plus accuracy metrics against ground truth.
//!
//! A scene is a rectangular room with a few (possibly yawed) boxes standing
//! on the floor. Every face is a textured rectangle; the map cloud is sampled
//! from the faces and camera frames are ray-cast against them.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3, Vector6};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::io::{
    frame_file_name, pose_array, save_map, save_session, write_json, write_pgm, FrameRecord,
    OdometryTrajectory, PlyFormat, PointCloudMap, ResultFile, Session, TagModel, TagObservation,
};
use crate::planes::{plane_basis, PlaneRecord, PlaneSegment};
use crate::registration::{yaw_rotation, Registration};
use crate::se3::pose_error;
use crate::{Pose, Twist};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    /// Two-scale sinusoidal bands with 0.25 m and 1.0 m periods.
    Bands,
    /// Uniform gray everywhere.
    Constant,
}

/// Standard deviations of the injected pose noise. Odometry noise is per
/// frame-to-frame increment, detection noise per detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub odom_trans: f64,
    pub odom_rot_deg: f64,
    pub det_trans: f64,
    pub det_rot_deg: f64,
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            odom_trans: 0.0,
            odom_rot_deg: 0.0,
            det_trans: 0.0,
            det_rot_deg: 0.0,
        }
    }

    /// 0.05 m / 1 deg on detections.
    pub fn low() -> Self {
        Self {
            odom_trans: 0.002,
            odom_rot_deg: 0.05,
            det_trans: 0.05,
            det_rot_deg: 1.0,
        }
    }

    /// 0.2 m / 4 deg on detections.
    pub fn high() -> Self {
        Self {
            odom_trans: 0.005,
            odom_rot_deg: 0.1,
            det_trans: 0.2,
            det_rot_deg: 4.0,
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::low()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Room size ranges `[min, max]` in meters.
    pub room_width: [f64; 2],
    pub room_depth: [f64; 2],
    pub room_height: [f64; 2],
    /// Number of boxes, inclusive range.
    pub boxes: [usize; 2],
    /// Map points per square meter.
    pub point_density: f64,
    pub tag_count: usize,
    pub inlier_rate: f64,
    pub tag_size: f64,
    pub waypoints: usize,
    /// Seconds per spline segment.
    pub segment_duration: f64,
    pub frame_rate: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub hfov_deg: f64,
    pub max_range: f64,
    pub max_view_angle_deg: f64,
    pub texture: Texture,
    pub render_frames: bool,
    /// Camera response exponent applied to surface albedo.
    pub camera_gamma: f64,
    pub image_noise: f64,
    pub noise: NoiseConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            room_width: [6.0, 10.0],
            room_depth: [4.0, 8.0],
            room_height: [2.5, 3.0],
            boxes: [2, 4],
            point_density: 400.0,
            tag_count: 50,
            inlier_rate: 1.0,
            tag_size: 0.16,
            waypoints: 20,
            segment_duration: 2.5,
            frame_rate: 10.0,
            image_width: 128,
            image_height: 96,
            hfov_deg: 70.0,
            max_range: 5.0,
            max_view_angle_deg: 60.0,
            texture: Texture::Bands,
            render_frames: true,
            camera_gamma: 1.4,
            image_noise: 0.01,
            noise: NoiseConfig::low(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        for (name, r) in [
            ("room_width", self.room_width),
            ("room_depth", self.room_depth),
            ("room_height", self.room_height),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return Err(Error::InvalidConfig(format!("{name} must be a positive [min, max] range")));
            }
        }
        if self.room_width[0] < 3.0 || self.room_depth[0] < 3.0 || self.room_height[0] < 2.0 {
            return bad("rooms must be at least 3 x 3 x 2 m");
        }
        if self.boxes[0] > self.boxes[1] {
            return bad("boxes must be a [min, max] range");
        }
        if !(self.point_density > 0.0) {
            return bad("point_density must be positive");
        }
        if !(0.0..=1.0).contains(&self.inlier_rate) {
            return bad("inlier_rate must lie in [0, 1]");
        }
        if !(self.tag_size > 0.0) {
            return bad("tag_size must be positive");
        }
        if self.waypoints < 6 {
            return bad("at least 6 waypoints are required");
        }
        if !(self.segment_duration > 0.0 && self.frame_rate > 0.0) {
            return bad("segment_duration and frame_rate must be positive");
        }
        if self.image_width < 8 || self.image_height < 8 || !(self.hfov_deg > 0.0 && self.hfov_deg < 170.0) {
            return bad("invalid camera model");
        }
        if !(self.max_range > 0.0 && self.max_view_angle_deg > 0.0) {
            return bad("detection limits must be positive");
        }
        let n = &self.noise;
        if [n.odom_trans, n.odom_rot_deg, n.det_trans, n.det_rot_deg, self.image_noise]
            .iter()
            .any(|s| !(*s >= 0.0))
        {
            return bad("noise levels must be non-negative");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::from_fov(self.image_width, self.image_height, self.hfov_deg)
    }

    /// Number of plane-attached tags, `floor(N * R_in)`.
    pub fn inlier_count(&self) -> usize {
        ((self.tag_count as f64 * self.inlier_rate) + 1e-9).floor() as usize
    }
}

/// Procedural albedo of one face.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceTexture {
    pub base: f64,
    /// In-plane band directions for the fine and coarse scale.
    pub directions: [Vector2<f64>; 2],
    pub phases: [f64; 2],
}

const BAND_PERIODS: [f64; 2] = [0.25, 1.0];

/// A textured rectangle. `frame` columns are the in-plane axes u, v and the
/// normal, which faces free space.
#[derive(Clone, Debug, PartialEq)]
pub struct Surface {
    pub center: Vector3<f64>,
    pub frame: Matrix3<f64>,
    pub half: Vector2<f64>,
    pub texture: Option<SurfaceTexture>,
}

impl Surface {
    pub fn normal(&self) -> Vector3<f64> {
        self.frame.column(2).into_owned()
    }

    pub fn area(&self) -> f64 {
        4.0 * self.half.x * self.half.y
    }

    pub fn point(&self, u: f64, v: f64) -> Vector3<f64> {
        self.center + self.frame.column(0) * u + self.frame.column(1) * v
    }

    /// In-plane coordinates of `p`.
    pub fn local(&self, p: &Vector3<f64>) -> Vector2<f64> {
        let d = p - self.center;
        Vector2::new(d.dot(&self.frame.column(0)), d.dot(&self.frame.column(1)))
    }

    /// Ray parameter of the intersection with `o + t d`, from either side.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let n = self.frame.column(2);
        let den = d.dot(&n);
        if den.abs() < 1e-12 {
            return None;
        }
        let t = (self.center - o).dot(&n) / den;
        if t <= 1e-9 {
            return None;
        }
        let l = self.local(&(o + d * t));
        (l.x.abs() <= self.half.x && l.y.abs() <= self.half.y).then_some(t)
    }

    pub fn albedo(&self, p: &Vector3<f64>) -> f64 {
        let Some(tex) = &self.texture else {
            return 0.5;
        };
        let l = self.local(p);
        let mut v = tex.base;
        for k in 0..2 {
            v += 0.2 * (2.0 * PI * tex.directions[k].dot(&l) / BAND_PERIODS[k] + tex.phases[k]).sin();
        }
        v.clamp(0.0, 1.0)
    }

    /// Bounded plane in the convention of plane extraction.
    pub fn to_segment(&self) -> PlaneSegment {
        let n = self.normal();
        let basis = plane_basis(&n);
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for (su, sv) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)] {
            let l = basis.transpose() * (self.point(su * self.half.x, sv * self.half.y) - self.center);
            lo = lo.inf(&l);
            hi = hi.sup(&l);
        }
        let mid = (lo + hi) / 2.0;
        let mut extents = hi - lo;
        extents.z = 0.0;
        PlaneSegment::from_frame(self.center + basis * Vector3::new(mid.x, mid.y, 0.0), basis, extents)
    }
}

/// A box standing on the floor.
#[derive(Clone, Debug, PartialEq)]
pub struct Obstacle {
    pub center: Vector2<f64>,
    pub yaw: f64,
    pub half: Vector2<f64>,
    pub height: f64,
}

impl Obstacle {
    fn local(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.yaw.sin_cos();
        let d = p - self.center;
        Vector2::new(c * d.x + s * d.y, -s * d.x + c * d.y)
    }

    /// Whether the footprint, grown by `margin`, contains the point.
    pub fn footprint_contains(&self, p: &Vector2<f64>, margin: f64) -> bool {
        let l = self.local(p);
        l.x.abs() <= self.half.x + margin && l.y.abs() <= self.half.y + margin
    }

    pub fn contains(&self, p: &Vector3<f64>, margin: f64) -> bool {
        p.z <= self.height + margin && self.footprint_contains(&p.xy(), margin)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub seed: u64,
    pub config: SimConfig,
    /// Room width, depth and height; the floor is centered at the origin.
    pub room: Vector3<f64>,
    pub surfaces: Vec<Surface>,
    /// Generator planes, one per surface, in the same order.
    pub planes: Vec<PlaneSegment>,
    pub obstacles: Vec<Obstacle>,
    pub map: PointCloudMap,
    /// Ground-truth tags in the map frame, ids `0..N`.
    pub tags: Vec<TagModel>,
    pub inlier: Vec<bool>,
    /// Generator plane of each inlier tag.
    pub tag_plane: Vec<Option<usize>>,
    /// Ground-truth camera poses in the map frame.
    pub trajectory: Vec<(f64, Pose)>,
    /// Gravity-aligned transform taking odometry coordinates to the map.
    pub map_from_odom: Pose,
    pub intrinsics: CameraIntrinsics,
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

fn random_texture(rng: &mut impl Rng, kind: Texture) -> Option<SurfaceTexture> {
    match kind {
        Texture::Constant => None,
        Texture::Bands => {
            let mut dir = || {
                let a: f64 = rng.gen_range(0.0..PI);
                Vector2::new(a.cos(), a.sin())
            };
            let directions = [dir(), dir()];
            Some(SurfaceTexture {
                base: rng.gen_range(0.35..0.65),
                directions,
                phases: [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)],
            })
        }
    }
}

fn surface(center: Vector3<f64>, u: Vector3<f64>, normal: Vector3<f64>, half: (f64, f64)) -> Surface {
    let v = normal.cross(&u);
    Surface {
        center,
        frame: Matrix3::from_columns(&[u, v, normal]),
        half: Vector2::new(half.0, half.1),
        texture: None,
    }
}

fn room_surfaces(w: f64, d: f64, h: f64) -> Vec<Surface> {
    let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
    vec![
        surface(Vector3::zeros(), x, z, (w / 2.0, d / 2.0)),
        surface(Vector3::new(0.0, 0.0, h), x, -z, (w / 2.0, d / 2.0)),
        surface(Vector3::new(w / 2.0, 0.0, h / 2.0), y, -x, (d / 2.0, h / 2.0)),
        surface(Vector3::new(-w / 2.0, 0.0, h / 2.0), -y, x, (d / 2.0, h / 2.0)),
        surface(Vector3::new(0.0, d / 2.0, h / 2.0), -x, -y, (w / 2.0, h / 2.0)),
        surface(Vector3::new(0.0, -d / 2.0, h / 2.0), x, y, (w / 2.0, h / 2.0)),
    ]
}

fn obstacle_surfaces(b: &Obstacle) -> Vec<Surface> {
    let (s, c) = b.yaw.sin_cos();
    let ax = Vector3::new(c, s, 0.0);
    let ay = Vector3::new(-s, c, 0.0);
    let z = Vector3::z();
    let base = Vector3::new(b.center.x, b.center.y, 0.0);
    let mid = base + z * (b.height / 2.0);
    let hh = b.height / 2.0;
    vec![
        surface(base + z * b.height, ax, z, (b.half.x, b.half.y)),
        surface(mid + ax * b.half.x, ay, ax, (b.half.y, hh)),
        surface(mid - ax * b.half.x, -ay, -ax, (b.half.y, hh)),
        surface(mid + ay * b.half.y, -ax, ay, (b.half.x, hh)),
        surface(mid - ay * b.half.y, ax, -ay, (b.half.x, hh)),
    ]
}

/// Cumulative cubic B-spline basis.
fn cumulative_basis(u: f64) -> [f64; 3] {
    let (u2, u3) = (u * u, u * u * u);
    [
        (5.0 + 3.0 * u - 3.0 * u2 + u3) / 6.0,
        (1.0 + 3.0 * u + 3.0 * u2 - 2.0 * u3) / 6.0,
        u3 / 6.0,
    ]
}

/// Pose on the cumulative cubic B-spline over `ctrl` at segment `seg`,
/// local parameter `u` in `[0, 1]`.
pub fn bspline_pose(ctrl: &[Pose], seg: usize, u: f64) -> Pose {
    let b = cumulative_basis(u);
    let mut t = ctrl[seg];
    for j in 1..4 {
        let omega = (ctrl[seg + j - 1].inverse() * &ctrl[seg + j]).ln().to_vector();
        t = t * Pose::exp(&Twist::from_vector(&(omega * b[j - 1])));
    }
    t
}

/// Camera rotation looking along `yaw`/`pitch` with image x to the right and
/// image y pointing down.
pub fn look_rotation(yaw: f64, pitch: f64) -> UnitQuaternion<f64> {
    let z = Vector3::new(pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin());
    let x = z.cross(&Vector3::z()).normalize();
    let y = z.cross(&x);
    UnitQuaternion::from_matrix(&Matrix3::from_columns(&[x, y, z]))
}

fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            return UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        }
    }
}

struct Builder<'a> {
    rng: ChaCha8Rng,
    cfg: &'a SimConfig,
    room: Vector3<f64>,
    obstacles: Vec<Obstacle>,
}

impl Builder<'_> {
    fn in_obstacle(&self, p: &Vector3<f64>, margin: f64) -> bool {
        self.obstacles.iter().any(|b| b.contains(p, margin))
    }

    fn place_obstacles(&mut self) {
        let n = self.rng.gen_range(self.cfg.boxes[0]..=self.cfg.boxes[1]);
        let (w, d) = (self.room.x, self.room.y);
        for _ in 0..n {
            for _ in 0..200 {
                let half: Vector2<f64> = Vector2::new(self.rng.gen_range(0.3..0.75), self.rng.gen_range(0.3..0.75));
                let height = self.rng.gen_range(0.5..1.2);
                let yaw = if self.rng.gen_bool(0.5) {
                    0.0
                } else {
                    self.rng.gen_range(-PI / 4.0..PI / 4.0)
                };
                let r = half.norm();
                let (mx, my) = (w / 2.0 - r - 0.3, d / 2.0 - r - 0.3);
                if mx <= 0.0 || my <= 0.0 {
                    continue;
                }
                let center = Vector2::new(self.rng.gen_range(-mx..mx), self.rng.gen_range(-my..my));
                let b = Obstacle {
                    center,
                    yaw,
                    half,
                    height,
                };
                let clear = self
                    .obstacles
                    .iter()
                    .all(|o| (o.center - b.center).norm() > o.half.norm() + r + 0.6);
                if clear {
                    self.obstacles.push(b);
                    break;
                }
            }
        }
    }

    /// Uniform samples on a surface; floor samples under boxes are dropped.
    fn sample_surface(&mut self, s: &Surface, is_floor: bool, map: &mut PointCloudMap) {
        let count = (s.area() * self.cfg.point_density).round() as usize;
        let n = s.normal();
        for _ in 0..count {
            let u = self.rng.gen_range(-s.half.x..=s.half.x);
            let v = self.rng.gen_range(-s.half.y..=s.half.y);
            let p = s.point(u, v);
            if is_floor && self.obstacles.iter().any(|b| b.footprint_contains(&p.xy(), 0.0)) {
                continue;
            }
            map.points.push(p);
            map.intensities.as_mut().unwrap().push(s.albedo(&p));
            map.normals.as_mut().unwrap().push(n);
        }
    }

    fn place_inlier(&mut self, surfaces: &[Surface], eligible: &[usize], placed: &[(usize, Vector3<f64>)]) -> Option<(usize, Pose)> {
        let diag = self.cfg.tag_size * std::f64::consts::SQRT_2;
        let margin = diag / 2.0 + 0.02;
        for _ in 0..1000 {
            let si = *eligible.choose(&mut self.rng)?;
            let s = &surfaces[si];
            let u = self.rng.gen_range(-(s.half.x - margin)..=(s.half.x - margin));
            let v = self.rng.gen_range(-(s.half.y - margin)..=(s.half.y - margin));
            let p = s.point(u, v);
            let n = s.normal();
            if si == 0 && self.obstacles.iter().any(|b| b.footprint_contains(&p.xy(), margin)) {
                continue;
            }
            if placed.iter().any(|(j, q)| *j == si && (q - p).norm() < diag + 0.02) {
                continue;
            }
            let x = if n.z.abs() > 0.9 {
                let a = self.rng.gen_range(-PI..PI);
                Vector3::new(a.cos(), a.sin(), 0.0)
            } else {
                n.cross(&Vector3::z()).normalize()
            };
            let y = n.cross(&x);
            let rot = UnitQuaternion::from_matrix(&Matrix3::from_columns(&[x, y, n]));
            return Some((si, Pose::new(rot, p)));
        }
        None
    }

    fn place_outlier(&mut self) -> Pose {
        let r = self.room;
        loop {
            let p = Vector3::new(
                self.rng.gen_range(-(r.x / 2.0 - 0.3)..r.x / 2.0 - 0.3),
                self.rng.gen_range(-(r.y / 2.0 - 0.3)..r.y / 2.0 - 0.3),
                self.rng.gen_range(0.3..r.z - 0.3),
            );
            if !self.in_obstacle(&p, 0.2) {
                return Pose::new(random_rotation(&mut self.rng), p);
            }
        }
    }

    fn waypoint(&mut self) -> Vector3<f64> {
        let r = self.room;
        loop {
            let p = Vector3::new(
                self.rng.gen_range(-(r.x / 2.0 - 0.8)..r.x / 2.0 - 0.8),
                self.rng.gen_range(-(r.y / 2.0 - 0.8)..r.y / 2.0 - 0.8),
                self.rng.gen_range(1.2..1.8),
            );
            if !self.obstacles.iter().any(|b| b.footprint_contains(&p.xy(), 0.5)) {
                return p;
            }
        }
    }

    fn control_poses(&mut self, surfaces: &[Surface]) -> Vec<Pose> {
        let mut out: Vec<Pose> = Vec::with_capacity(self.cfg.waypoints);
        let mut prev: Option<(Vector3<f64>, f64)> = None;
        while out.len() < self.cfg.waypoints {
            let mut best = None;
            for _ in 0..500 {
                let p = self.waypoint();
                if let Some((q, _)) = prev {
                    let gap = (p - q).norm();
                    if !(1.5..=4.0).contains(&gap) {
                        continue;
                    }
                }
                best = Some(p);
                break;
            }
            let p = best.unwrap_or_else(|| self.waypoint());
            let mut yaw = 0.0;
            let mut pitch = 0.0;
            for attempt in 0..500 {
                let si = self.rng.gen_range(0..surfaces.len());
                let s = &surfaces[si];
                let target = s.point(
                    self.rng.gen_range(-s.half.x..=s.half.x),
                    self.rng.gen_range(-s.half.y..=s.half.y),
                );
                let d = target - p;
                let last = attempt == 499;
                if !last && (d.norm() < 1.0 || d.norm() > self.cfg.max_range || s.normal().dot(&d) > -0.3 * d.norm()) {
                    continue;
                }
                yaw = d.y.atan2(d.x);
                pitch = (d.z / d.norm()).asin().clamp(-50f64.to_radians(), 40f64.to_radians());
                if let Some((_, py)) = prev {
                    let dy = (yaw - py + PI).rem_euclid(2.0 * PI) - PI;
                    if dy.abs() > PI / 2.0 && !last {
                        continue;
                    }
                }
                break;
            }
            prev = Some((p, yaw));
            out.push(Pose::new(look_rotation(yaw, pitch), p));
        }
        out
    }
}

/// Builds a reproducible scene from `config` and `seed`.
pub fn generate_scene(config: &SimConfig, seed: u64) -> Result<SyntheticScene> {
    config.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cfg: config,
        room: Vector3::zeros(),
        obstacles: Vec::new(),
    };
    b.room = Vector3::new(
        uniform(&mut b.rng, config.room_width),
        uniform(&mut b.rng, config.room_depth),
        uniform(&mut b.rng, config.room_height),
    );
    b.place_obstacles();
    let mut surfaces = room_surfaces(b.room.x, b.room.y, b.room.z);
    for o in &b.obstacles {
        surfaces.extend(obstacle_surfaces(o));
    }
    for s in &mut surfaces {
        s.texture = random_texture(&mut b.rng, config.texture);
    }

    let mut map = PointCloudMap {
        points: Vec::new(),
        intensities: Some(Vec::new()),
        normals: Some(Vec::new()),
    };
    for (i, s) in surfaces.iter().enumerate() {
        b.sample_surface(s, i == 0, &mut map);
    }

    let diag = config.tag_size * std::f64::consts::SQRT_2;
    let eligible: Vec<usize> = (0..surfaces.len())
        .filter(|&i| surfaces[i].half.min() * 2.0 >= diag + 0.04)
        .collect();
    let n_in = config.inlier_count();
    if n_in > 0 && eligible.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "tag size {} m does not fit on any plane",
            config.tag_size
        )));
    }
    let mut labels: Vec<bool> = (0..config.tag_count).map(|i| i < n_in).collect();
    labels.shuffle(&mut b.rng);
    let mut tags = Vec::with_capacity(config.tag_count);
    let mut tag_plane = Vec::with_capacity(config.tag_count);
    let mut placed = Vec::new();
    for (id, &inlier) in labels.iter().enumerate() {
        let (plane, pose) = if inlier {
            let (si, pose) = b.place_inlier(&surfaces, &eligible, &placed).ok_or_else(|| {
                Error::InvalidConfig("could not place every plane-attached tag without overlap".into())
            })?;
            placed.push((si, *pose.translation()));
            (Some(si), pose)
        } else {
            (None, b.place_outlier())
        };
        tags.push(TagModel::new(id as u32, config.tag_size, pose)?);
        tag_plane.push(plane);
    }

    let ctrl = b.control_poses(&surfaces);
    let segments = ctrl.len() - 3;
    let duration = segments as f64 * config.segment_duration;
    let mut trajectory = Vec::new();
    for k in 0.. {
        let t = k as f64 / config.frame_rate;
        if t >= duration {
            break;
        }
        let s = ((t / config.segment_duration) as usize).min(segments - 1);
        let u = t / config.segment_duration - s as f64;
        trajectory.push((t, bspline_pose(&ctrl, s, u)));
    }

    let yaw = b.rng.gen_range(-PI..PI);
    let map_from_odom = Pose::new(yaw_rotation(yaw), *trajectory[0].1.translation());

    Ok(SyntheticScene {
        seed,
        config: config.clone(),
        room: b.room,
        planes: surfaces.iter().map(Surface::to_segment).collect(),
        surfaces,
        obstacles: b.obstacles,
        map,
        tags,
        inlier: labels,
        tag_plane,
        trajectory,
        map_from_odom,
        intrinsics: config.intrinsics(),
    })
}

impl SyntheticScene {
    /// Nearest surface hit along `o + t d`.
    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, s) in self.surfaces.iter().enumerate() {
            if let Some(t) = s.intersect(o, d) {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best
    }

    /// Whether `tag` is detectable from camera pose `cam` (map frame).
    pub fn detectable(&self, cam: &Pose, tag: &TagModel) -> bool {
        let cfg = &self.config;
        let c = *cam.translation();
        let p = tag.position();
        let to_cam = c - p;
        let dist = to_cam.norm();
        if dist >= cfg.max_range || dist < 1e-6 {
            return false;
        }
        if tag.normal().dot(&to_cam) / dist <= cfg.max_view_angle_deg.to_radians().cos() {
            return false;
        }
        let inv = cam.inverse();
        for q in tag.sample_points() {
            let pc = inv.transform_point(&q);
            match self.intrinsics.project(&pc) {
                Some(uv) if pc.z > 0.05 && self.intrinsics.contains(&uv, 2.0) => {}
                _ => return false,
            }
        }
        let dir = (p - c) / dist;
        !matches!(self.cast(&c, &dir), Some((t, _)) if t < dist - 0.01)
    }

    /// Camera image at `cam` before sensor noise: albedo through the camera
    /// response curve.
    pub fn render(&self, cam: &Pose) -> GrayImage {
        let k = &self.intrinsics;
        let o = *cam.translation();
        let r = cam.rotation_matrix();
        let gamma = self.config.camera_gamma;
        GrayImage::from_fn(k.width, k.height, |x, y| {
            let d = r * k.back_project(x as f64, y as f64);
            match self.cast(&o, &d) {
                Some((t, i)) => self.surfaces[i].albedo(&(o + d * t)).powf(gamma),
                None => 0.0,
            }
        })
    }

    pub fn truth(&self) -> Truth {
        Truth {
            map_from_odom: self.map_from_odom,
            tags: self
                .tags
                .iter()
                .zip(&self.inlier)
                .zip(&self.tag_plane)
                .map(|((t, &inlier), &plane)| TruthTag {
                    id: t.tag_id,
                    pose_in_map: t.pose,
                    edge_length: t.edge_length,
                    inlier,
                    plane,
                })
                .collect(),
            frames: self
                .trajectory
                .iter()
                .map(|(t, p)| FrameRecord {
                    t: *t,
                    pose_in_map: *p,
                })
                .collect(),
            planes: self.planes.iter().map(PlaneRecord::from).collect(),
        }
    }
}

/// Generated inputs of the pipeline.
#[derive(Clone, Debug)]
pub struct Measurements {
    pub session: Session,
    /// Camera frames keyed by timestamp; empty when rendering is disabled.
    pub frames: Vec<(f64, GrayImage)>,
}

fn noise_twist(rng: &mut impl Rng, sigma_t: f64, sigma_r_deg: f64) -> Twist {
    let mut v = Vector6::zeros();
    if sigma_t > 0.0 {
        let n = Normal::new(0.0, sigma_t).unwrap();
        for i in 0..3 {
            v[i] = n.sample(rng);
        }
    }
    if sigma_r_deg > 0.0 {
        let n = Normal::new(0.0, sigma_r_deg.to_radians()).unwrap();
        for i in 3..6 {
            v[i] = n.sample(rng);
        }
    }
    Twist::from_vector(&v)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Odometry, detections and frames for `scene` under `noise`.
pub fn synthesize_measurements(scene: &SyntheticScene, noise: &NoiseConfig) -> Result<Measurements> {
    let mut rng = stream_rng(scene.seed, 1);
    let g_inv = scene.map_from_odom.inverse();
    let truth = &scene.trajectory;
    let mut odom = Vec::with_capacity(truth.len());
    let mut y = g_inv * &truth[0].1;
    odom.push((truth[0].0, y));
    for w in truth.windows(2) {
        let rel = w[0].1.inverse() * &w[1].1;
        y = y * rel * Pose::exp(&noise_twist(&mut rng, noise.odom_trans, noise.odom_rot_deg));
        odom.push((w[1].0, y));
    }

    let mut detections = Vec::new();
    for (t, cam) in truth {
        let inv = cam.inverse();
        for tag in &scene.tags {
            if scene.detectable(cam, tag) {
                let z = inv * &tag.pose * Pose::exp(&noise_twist(&mut rng, noise.det_trans, noise.det_rot_deg));
                detections.push(TagObservation {
                    frame_time: *t,
                    tag_id: tag.tag_id,
                    pose_in_camera: z,
                });
            }
        }
    }

    let frames = if scene.config.render_frames {
        let sigma = scene.config.image_noise;
        truth
            .par_iter()
            .enumerate()
            .map(|(i, (t, cam))| {
                let mut img = scene.render(cam);
                let mut rng = stream_rng(scene.seed, 2 + i as u64);
                let (w, h) = (img.width(), img.height());
                for yy in 0..h {
                    for xx in 0..w {
                        let mut v = img.get(xx, yy).unwrap_or(0.0);
                        if sigma > 0.0 {
                            v += sigma * rng.sample::<f64, _>(StandardNormal);
                        }
                        img.set(xx, yy, (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
                    }
                }
                (*t, img)
            })
            .collect()
    } else {
        Vec::new()
    };

    Ok(Measurements {
        session: Session {
            trajectory: OdometryTrajectory::new(odom)?,
            detections,
            intrinsics: Some(scene.intrinsics),
            tag_size: Some(scene.config.tag_size),
        },
        frames,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthTag {
    pub id: u32,
    #[serde(with = "pose_array")]
    pub pose_in_map: Pose,
    pub edge_length: f64,
    pub inlier: bool,
    pub plane: Option<usize>,
}

/// Ground truth written next to a simulated scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Truth {
    #[serde(with = "pose_array")]
    pub map_from_odom: Pose,
    pub tags: Vec<TruthTag>,
    pub frames: Vec<FrameRecord>,
    pub planes: Vec<PlaneRecord>,
}

/// Writes `map.ply`, `session.json`, `frames/` and `truth.json` into `dir`.
pub fn write_scene(dir: &Path, scene: &SyntheticScene, measurements: &Measurements) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_map(&dir.join("map.ply"), &scene.map, PlyFormat::BinaryLittleEndian)?;
    save_session(&dir.join("session.json"), &measurements.session)?;
    if !measurements.frames.is_empty() {
        let frames = dir.join("frames");
        fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
        for (t, img) in &measurements.frames {
            write_pgm(&frames.join(frame_file_name(*t)), img)?;
        }
    }
    write_json(&dir.join("truth.json"), &scene.truth())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuccessThresholds {
    pub translation: f64,
    pub rotation_deg: f64,
}

impl Default for SuccessThresholds {
    fn default() -> Self {
        Self {
            translation: 1.0,
            rotation_deg: 15.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation; zeros for an empty input.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagError {
    pub id: u32,
    pub translation: f64,
    pub rotation_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub success: bool,
    pub transform_translation: f64,
    pub transform_rotation_deg: f64,
    pub tags_evaluated: usize,
    pub tag_translation: MeanStd,
    pub tag_rotation_deg: MeanStd,
    pub per_tag: Vec<TagError>,
    pub clique_precision: Option<f64>,
    pub clique_recall: Option<f64>,
}

/// Compares a pipeline result with ground truth.
///
/// The registration error is taken from `registration` when given, else
/// from the first result frame against its true pose. Tag errors cover every
/// result tag present in the truth.
pub fn evaluate(
    result: &ResultFile,
    truth: &Truth,
    registration: Option<&Registration>,
    thresholds: &SuccessThresholds,
) -> Metrics {
    let transform_err = match registration {
        Some(r) => Some(pose_error(&r.map_from_tag, &truth.map_from_odom)),
        None => result.frames.first().and_then(|f| {
            truth
                .frames
                .iter()
                .find(|g| (g.t - f.t).abs() <= crate::io::TIME_EPS)
                .map(|g| pose_error(&f.pose_in_map, &g.pose_in_map))
        }),
    };
    let success = transform_err.map_or(false, |e| {
        e.translation <= thresholds.translation && e.rotation_deg <= thresholds.rotation_deg
    });

    let per_tag: Vec<TagError> = result
        .tags
        .iter()
        .filter_map(|r| {
            let t = truth.tags.iter().find(|t| t.id == r.id)?;
            let e = pose_error(&r.pose_in_map, &t.pose_in_map);
            Some(TagError {
                id: r.id,
                translation: e.translation,
                rotation_deg: e.rotation_deg,
            })
        })
        .collect();
    let tr: Vec<f64> = per_tag.iter().map(|e| e.translation).collect();
    let rot: Vec<f64> = per_tag.iter().map(|e| e.rotation_deg).collect();

    let (clique_precision, clique_recall) = match registration {
        Some(r) if !r.clique.is_empty() => {
            let is_inlier = |id: u32| truth.tags.iter().any(|t| t.id == id && t.inlier);
            let hits = r.clique.iter().filter(|c| is_inlier(c.tag_id)).count();
            let observed = result.tags.iter().filter(|t| is_inlier(t.id)).count();
            (
                Some(hits as f64 / r.clique.len() as f64),
                Some(if observed > 0 { hits as f64 / observed as f64 } else { 0.0 }),
            )
        }
        _ => (None, None),
    };

    let (tt, tr_deg) = transform_err.map_or((f64::INFINITY, f64::INFINITY), |e| (e.translation, e.rotation_deg));
    Metrics {
        success,
        transform_translation: tt,
        transform_rotation_deg: tr_deg,
        tags_evaluated: per_tag.len(),
        tag_translation: MeanStd::of(&tr),
        tag_rotation_deg: MeanStd::of(&rot),
        per_tag,
        clique_precision,
        clique_recall,
    }
}

/// Success count in the form `98% (49 / 50)`.
pub fn success_rate_line(successes: usize, total: usize) -> String {
    let pct = if total > 0 {
        100.0 * successes as f64 / total as f64
    } else {
        0.0
    };
    format!("{pct:.0}% ({successes} / {total})")
}

/// Independent per-trial seed derived from a base seed (SplitMix64).
pub fn split_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
