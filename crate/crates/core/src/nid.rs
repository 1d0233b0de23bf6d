//! Camera-to-map alignment by normalized information distance, outlier
//! filtering of the alignments, and pose-graph refinement with prior factors.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::{Matrix2x3, Matrix3, Matrix6, Point3, Vector2, Vector3, Vector6};
use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::io::{PointCloudMap, TIME_EPS};
use crate::pose_graph::{optimize, FactorGraph, GraphConfig, OptimizeReport, Weight};
use crate::registration::{search_max_clique, CliqueMode, ConsistencyGraph};
use crate::se3::{se3_right_jacobian, skew};
use crate::{Pose, Twist};

/// Histogram voting kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// Each sample votes into its nearest bin.
    Nearest,
    /// Each sample spreads over four bins with cubic B-spline weights.
    CubicBSpline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NidConfig {
    pub bins: usize,
    pub kernel: Kernel,
    /// Minimum overlap as a fraction of the image pixel count.
    pub min_overlap: f64,
    pub hpr_radius_exponent: f64,
    /// Points farther than this from the camera are ignored.
    pub max_depth: f64,
    pub splat_radius: usize,
    /// Gaussian blur sigmas (pixels) of the coarse-to-fine schedule.
    pub blur_schedule: Vec<f64>,
    /// Width in pixels of the border band where sample weights fade out.
    pub border_taper: f64,
    pub max_iters: usize,
    pub g_tol: f64,
    pub s_tol: f64,
    pub armijo: f64,
    /// Upper bound on the number of frames aligned per session.
    pub max_frames: usize,
    pub outlier_th_trans: f64,
    pub outlier_th_rot_deg: f64,
    pub prior_weight: f64,
}

impl Default for NidConfig {
    fn default() -> Self {
        Self {
            bins: 16,
            kernel: Kernel::CubicBSpline,
            min_overlap: 0.05,
            hpr_radius_exponent: 3.0,
            max_depth: 10.0,
            splat_radius: 1,
            blur_schedule: vec![2.0, 0.0],
            border_taper: 4.0,
            max_iters: 64,
            g_tol: 1e-5,
            s_tol: 1e-6,
            armijo: 1e-4,
            max_frames: 200,
            outlier_th_trans: 0.5,
            outlier_th_rot_deg: 5.0,
            prior_weight: 1.0,
        }
    }
}

impl NidConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.bins < 4 {
            return bad("nid bins must be at least 4");
        }
        if !(0.0..=1.0).contains(&self.min_overlap) {
            return bad("min_overlap must lie in [0, 1]");
        }
        if !(self.max_depth > 0.0) || !(self.border_taper >= 0.0) {
            return bad("max_depth must be positive and border_taper non-negative");
        }
        if self.blur_schedule.is_empty() || self.blur_schedule.iter().any(|s| !(*s >= 0.0)) {
            return bad("blur_schedule needs at least one non-negative sigma");
        }
        if self.max_iters == 0 || self.max_frames == 0 {
            return bad("max_iters and max_frames must be positive");
        }
        if !(self.outlier_th_trans > 0.0 && self.outlier_th_rot_deg > 0.0) {
            return bad("outlier thresholds must be positive");
        }
        if !(self.prior_weight > 0.0) {
            return bad("prior_weight must be positive");
        }
        Ok(())
    }
}

/// Cubic B-spline and its derivative.
#[inline]
pub fn bspline3<T: Float>(d: T) -> (T, T) {
    let one = T::one();
    let two = one + one;
    let six = T::from(6.0).unwrap();
    let a = d.abs();
    let s = d.signum();
    if a < one {
        let v = two / T::from(3.0).unwrap() - a * a + a * a * a / two;
        let dv = -two * a + T::from(1.5).unwrap() * a * a;
        (v, dv * s)
    } else if a < two {
        let t = two - a;
        (t * t * t / six, -t * t / two * s)
    } else {
        (T::zero(), T::zero())
    }
}

/// Bin votes of one value in `[0, 1]`: up to four `(bin, weight, dweight/dvalue)`.
#[derive(Clone, Copy, Debug)]
struct Votes<T> {
    first: usize,
    count: usize,
    w: [T; 4],
    dw: [T; 4],
}

fn votes<T: Float>(kernel: Kernel, bins: usize, x: T) -> Votes<T> {
    let clamped = x < T::zero() || x > T::one();
    let x = x.max(T::zero()).min(T::one());
    match kernel {
        Kernel::Nearest => {
            let b = (x * T::from(bins - 1).unwrap()).round().to_usize().unwrap();
            let mut w = [T::zero(); 4];
            w[0] = T::one();
            Votes {
                first: b,
                count: 1,
                w,
                dw: [T::zero(); 4],
            }
        }
        Kernel::CubicBSpline => {
            // one padding bin on each side keeps every vote inside the range
            let scale = T::from(bins - 3).unwrap();
            let pos = x * scale + T::one();
            let base = pos.floor().to_usize().unwrap().min(bins - 2);
            let first = base - 1;
            let mut w = [T::zero(); 4];
            let mut dw = [T::zero(); 4];
            let mut count = 0;
            for k in 0..4 {
                let bin = first + k;
                if bin >= bins {
                    break;
                }
                let (v, d) = bspline3(pos - T::from(bin).unwrap());
                w[k] = v;
                dw[k] = if clamped { T::zero() } else { d * scale };
                count = k + 1;
            }
            Votes { first, count, w, dw }
        }
    }
}

/// Weighted joint histogram with its marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct JointHistogram<T> {
    pub bins: usize,
    pub joint: Vec<T>,
    pub marginal_r: Vec<T>,
    pub marginal_s: Vec<T>,
    pub total: T,
}

impl<T: Float + std::iter::Sum> JointHistogram<T> {
    pub fn new(bins: usize) -> Self {
        Self {
            bins,
            joint: vec![T::zero(); bins * bins],
            marginal_r: vec![T::zero(); bins],
            marginal_s: vec![T::zero(); bins],
            total: T::zero(),
        }
    }

    /// Adds the sample pair `(r, s)` with weight `weight`.
    pub fn add(&mut self, kernel: Kernel, r: T, s: T, weight: T) {
        let vr = votes(kernel, self.bins, r);
        let vs = votes(kernel, self.bins, s);
        for i in 0..vr.count {
            let wr = vr.w[i] * weight;
            self.marginal_r[vr.first + i] = self.marginal_r[vr.first + i] + wr;
            for j in 0..vs.count {
                let idx = (vr.first + i) * self.bins + vs.first + j;
                self.joint[idx] = self.joint[idx] + wr * vs.w[j];
            }
        }
        for j in 0..vs.count {
            self.marginal_s[vs.first + j] = self.marginal_s[vs.first + j] + vs.w[j] * weight;
        }
        self.total = self.total + weight;
    }

    fn entropy(h: &[T], total: T) -> T {
        if total <= T::zero() {
            return T::zero();
        }
        h.iter()
            .filter(|&&v| v > T::zero())
            .map(|&v| {
                let p = v / total;
                -p * p.ln()
            })
            .sum()
    }

    /// `(H(r), H(s), H(r, s))`.
    pub fn entropies(&self) -> (T, T, T) {
        (
            Self::entropy(&self.marginal_r, self.total),
            Self::entropy(&self.marginal_s, self.total),
            Self::entropy(&self.joint, self.total),
        )
    }

    pub fn mutual_information(&self) -> T {
        let (hr, hs, hj) = self.entropies();
        hr + hs - hj
    }

    /// `(H(r, s) - MI) / H(r, s)`, zero when the joint entropy is zero.
    pub fn nid(&self) -> T {
        let (hr, hs, hj) = self.entropies();
        if hj <= T::epsilon() {
            return T::zero();
        }
        (hj - (hr + hs - hj)) / hj
    }
}

/// NID between two images over the pixels valid in both.
pub fn nid(a: &GrayImage, b: &GrayImage, bins: usize, kernel: Kernel, min_overlap: f64) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::InvalidArgument("images differ in size".into()));
    }
    let mut h = JointHistogram::<f64>::new(bins);
    let mut overlap = 0;
    for ((&va, &ma), (&vb, &mb)) in a.data().iter().zip(a.mask()).zip(b.data().iter().zip(b.mask())) {
        if ma && mb {
            h.add(kernel, va, vb, 1.0);
            overlap += 1;
        }
    }
    let required = (min_overlap * a.len() as f64).ceil() as usize;
    if overlap < required.max(1) {
        return Err(Error::InsufficientOverlap { overlap, required });
    }
    Ok(h.nid())
}

/// Katz hidden point removal from `viewpoint`. Returns sorted indices into
/// `points`; with fewer than four points all are returned.
pub fn hidden_point_removal(points: &[Vector3<f64>], viewpoint: &Vector3<f64>, radius_exponent: f64) -> Vec<usize> {
    if points.len() < 4 {
        return (0..points.len()).collect();
    }
    let rel: Vec<Vector3<f64>> = points.iter().map(|p| p - viewpoint).collect();
    let max_norm = rel.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let radius = max_norm * 10f64.powf(radius_exponent);
    let mut flipped: Vec<Point3<f64>> = Vec::with_capacity(rel.len() + 1);
    let mut owners: HashMap<[u64; 3], Vec<usize>> = HashMap::with_capacity(rel.len());
    for (i, p) in rel.iter().enumerate() {
        let n = p.norm();
        let q = if n > 0.0 { p + p * (2.0 * (radius - n) / n) } else { *p };
        owners.entry(q.map(f64::to_bits).into()).or_default().push(i);
        flipped.push(Point3::from(q));
    }
    flipped.push(Point3::origin());
    let hull = std::panic::catch_unwind(|| parry3d_f64::transformation::try_convex_hull(&flipped));
    let vertices = match hull {
        Ok(Ok((v, _))) => v,
        _ => {
            log::warn!("hidden point removal: convex hull failed, keeping all points");
            return (0..points.len()).collect();
        }
    };
    let mut out: Vec<usize> = vertices
        .iter()
        .filter_map(|v| owners.get(&[v.x.to_bits(), v.y.to_bits(), v.z.to_bits()]))
        .flatten()
        .copied()
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Map points worth testing from `pose`: in front of the camera, within
/// `max_depth`, projecting inside the image.
pub fn frustum_cull(map: &PointCloudMap, pose: &Pose, intrinsics: &CameraIntrinsics, max_depth: f64) -> Vec<usize> {
    let inv = pose.inverse();
    (0..map.len())
        .filter(|&i| {
            let q = inv.transform_point(&map.points[i]);
            q.z > 0.05
                && q.z < max_depth
                && intrinsics.project(&q).is_some_and(|uv| intrinsics.contains(&uv, -1.0))
        })
        .collect()
}

/// Frustum culling followed by hidden point removal.
pub fn visible_points(map: &PointCloudMap, pose: &Pose, intrinsics: &CameraIntrinsics, config: &NidConfig) -> Vec<usize> {
    let cand = frustum_cull(map, pose, intrinsics, config.max_depth);
    let pts: Vec<Vector3<f64>> = cand.iter().map(|&i| map.points[i]).collect();
    hidden_point_removal(&pts, pose.translation(), config.hpr_radius_exponent)
        .into_iter()
        .map(|k| cand[k])
        .collect()
}

/// Z-buffered rendering of `visible` map points. Each point covers the
/// `(2r+1)^2` pixel block around its projection; untouched pixels stay masked.
pub fn render_map_image(
    map: &PointCloudMap,
    visible: &[usize],
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    splat_radius: usize,
) -> GrayImage {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut img = GrayImage::empty(w, h);
    let mut depth = vec![f64::INFINITY; w * h];
    let inv = pose.inverse();
    let r = splat_radius as isize;
    for &i in visible {
        let q = inv.transform_point(&map.points[i]);
        if q.z <= 0.0 {
            continue;
        }
        let Some(uv) = intrinsics.project(&q) else {
            continue;
        };
        let (cx, cy) = (uv.x.round() as isize, uv.y.round() as isize);
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                    continue;
                }
                let k = y as usize * w + x as usize;
                if q.z < depth[k] {
                    depth[k] = q.z;
                    img.set(x as usize, y as usize, map.intensity(i));
                }
            }
        }
    }
    img
}

/// Smootherstep ramp from 0 at `d = 0` to 1 at `d = width`, with derivative.
fn taper(d: f64, width: f64) -> (f64, f64) {
    if width <= 0.0 {
        return if d >= 0.0 { (1.0, 0.0) } else { (0.0, 0.0) };
    }
    let t = d / width;
    if t <= 0.0 {
        (0.0, 0.0)
    } else if t >= 1.0 {
        (1.0, 0.0)
    } else {
        let v = t * t * t * (t * (6.0 * t - 15.0) + 10.0);
        let dv = 30.0 * t * t * (t - 1.0) * (t - 1.0) / width;
        (v, dv)
    }
}

/// C1 clamp to `[0, 1]` with quadratic rounding of width `2a` at both ends.
fn soft_clamp(r: f64, a: f64) -> (f64, f64) {
    if r <= -a {
        (0.0, 0.0)
    } else if r < a {
        ((r + a) * (r + a) / (4.0 * a), (r + a) / (2.0 * a))
    } else if r <= 1.0 - a {
        (r, 1.0)
    } else if r < 1.0 + a {
        let t = 1.0 + a - r;
        (1.0 - t * t / (4.0 * a), t / (2.0 * a))
    } else {
        (1.0, 0.0)
    }
}

const SOFT_CLAMP_WIDTH: f64 = 0.05;

/// Point-sampled NID between a camera image and a set of map points: each
/// point pairs its intensity with the image value at its projection. Sample
/// weights fade to zero near the image border so the cost stays smooth as
/// points enter and leave the view.
pub struct NidObjective<'a> {
    points: Vec<Vector3<f64>>,
    intensities: Vec<f64>,
    image: &'a GrayImage,
    intrinsics: &'a CameraIntrinsics,
    bins: usize,
    kernel: Kernel,
    taper: f64,
    min_samples: f64,
}

struct Sample {
    weight: f64,
    dweight: Vector6<f64>,
    r: f64,
    dr: Vector6<f64>,
    s: f64,
}

impl<'a> NidObjective<'a> {
    pub fn new(
        map: &PointCloudMap,
        visible: &[usize],
        image: &'a GrayImage,
        intrinsics: &'a CameraIntrinsics,
        config: &NidConfig,
    ) -> Self {
        Self {
            points: visible.iter().map(|&i| map.points[i]).collect(),
            intensities: visible.iter().map(|&i| map.intensity(i)).collect(),
            image,
            intrinsics,
            bins: config.bins,
            kernel: config.kernel,
            taper: config.border_taper,
            min_samples: config.min_overlap * (intrinsics.width * intrinsics.height) as f64,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn sample(&self, inv: &Pose, k: usize, grad: bool) -> Option<Sample> {
        let q = inv.transform_point(&self.points[k]);
        if q.z <= 1e-3 {
            return None;
        }
        let uv = self.intrinsics.project(&q)?;
        let (w, h) = (self.intrinsics.width as f64 - 1.0, self.intrinsics.height as f64 - 1.0);
        let dists = [uv.x, w - uv.x, uv.y, h - uv.y];
        let (side, dmin) = dists
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &d)| if d < acc.1 { (i, d) } else { acc });
        let (weight, dtaper) = taper(dmin, self.taper);
        if weight <= 0.0 {
            return None;
        }
        let (raw, du, dv) = self.image.sample_bicubic(uv.x, uv.y);
        let (r, dclamp) = soft_clamp(raw, SOFT_CLAMP_WIDTH);
        let (du, dv) = (du * dclamp, dv * dclamp);
        let mut sample = Sample {
            weight,
            dweight: Vector6::zeros(),
            r,
            dr: Vector6::zeros(),
            s: self.intensities[k],
        };
        if grad {
            // d q / d xi for the right perturbation pose * exp(xi)
            let mut dq = nalgebra::Matrix3x6::zeros();
            dq.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-Matrix3::identity()));
            dq.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&q));
            let jp: Matrix2x3<f64> = self.intrinsics.projection_jacobian(&q);
            let duv = jp * dq;
            sample.dr = (duv.row(0) * du + duv.row(1) * dv).transpose();
            let ddist: Vector2<f64> = match side {
                0 => Vector2::new(1.0, 0.0),
                1 => Vector2::new(-1.0, 0.0),
                2 => Vector2::new(0.0, 1.0),
                _ => Vector2::new(0.0, -1.0),
            };
            sample.dweight = (duv.transpose() * ddist) * dtaper;
        }
        Some(sample)
    }

    fn samples(&self, pose: &Pose, grad: bool) -> Vec<Sample> {
        let inv = pose.inverse();
        (0..self.points.len()).filter_map(|k| self.sample(&inv, k, grad)).collect()
    }

    fn histogram(&self, samples: &[Sample]) -> Result<JointHistogram<f64>> {
        let mut h = JointHistogram::new(self.bins);
        for s in samples {
            h.add(self.kernel, s.r, s.s, s.weight);
        }
        if h.total < self.min_samples.max(1.0) {
            return Err(Error::InsufficientOverlap {
                overlap: h.total as usize,
                required: self.min_samples.ceil() as usize,
            });
        }
        Ok(h)
    }

    /// Total sample weight at `pose`.
    pub fn overlap(&self, pose: &Pose) -> f64 {
        self.samples(pose, false).iter().map(|s| s.weight).sum()
    }

    pub fn value(&self, pose: &Pose) -> Result<f64> {
        Ok(self.histogram(&self.samples(pose, false))?.nid())
    }

    /// NID and its gradient with respect to a right perturbation of `pose`.
    pub fn value_and_gradient(&self, pose: &Pose) -> Result<(f64, Vector6<f64>)> {
        let samples = self.samples(pose, true);
        let hist = self.histogram(&samples)?;
        let (hr, hs, hj) = hist.entropies();
        if hj <= f64::EPSILON {
            return Ok((0.0, Vector6::zeros()));
        }
        let n = hist.total;
        let log_or_zero = |v: f64| if v > 0.0 { (v / n).ln() } else { 0.0 };
        let lj: Vec<f64> = hist.joint.iter().map(|&v| log_or_zero(v)).collect();
        let lr: Vec<f64> = hist.marginal_r.iter().map(|&v| log_or_zero(v)).collect();
        let ls: Vec<f64> = hist.marginal_s.iter().map(|&v| log_or_zero(v)).collect();

        // dH = -(1/N) sum L dh - (H/N) dN for each of the three entropies
        let mut dsum_j = Vector6::zeros();
        let mut dsum_r = Vector6::zeros();
        let mut dsum_s = Vector6::zeros();
        let mut dn = Vector6::zeros();
        let b = self.bins;
        for smp in &samples {
            let vr = votes(self.kernel, b, smp.r);
            let vs = votes(self.kernel, b, smp.s);
            let (mut cj_w, mut cj_r, mut cr_w, mut cr_r, mut cs_w) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..vr.count {
                let bi = vr.first + i;
                cr_w += lr[bi] * vr.w[i];
                cr_r += lr[bi] * vr.dw[i];
                for j in 0..vs.count {
                    let l = lj[bi * b + vs.first + j];
                    cj_w += l * vr.w[i] * vs.w[j];
                    cj_r += l * vr.dw[i] * vs.w[j];
                }
            }
            for j in 0..vs.count {
                cs_w += ls[vs.first + j] * vs.w[j];
            }
            dsum_j += smp.dweight * cj_w + smp.dr * (smp.weight * cj_r);
            dsum_r += smp.dweight * cr_w + smp.dr * (smp.weight * cr_r);
            dsum_s += smp.dweight * cs_w;
            dn += smp.dweight;
        }
        let dhj = -(dsum_j + dn * hj) / n;
        let dhr = -(dsum_r + dn * hr) / n;
        let dhs = -(dsum_s + dn * hs) / n;
        let value = (2.0 * hj - hr - hs) / hj;
        let grad = -(dhr + dhs) / hj + dhj * ((hr + hs) / (hj * hj));
        Ok((value, grad))
    }
}

/// Initial and refined camera pose of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPair {
    pub frame: usize,
    pub t: f64,
    #[serde(with = "crate::io::pose_array")]
    pub initial: Pose,
    #[serde(with = "crate::io::pose_array")]
    pub refined: Pose,
    pub initial_nid: f64,
    pub nid: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Outcome of one BFGS run in the chart `x -> origin * exp(x)`.
struct BfgsResult {
    x: Vector6<f64>,
    f: f64,
    converged: bool,
    iterations: usize,
}

fn bfgs(obj: &NidObjective, origin: &Pose, x0: Vector6<f64>, config: &NidConfig) -> Result<BfgsResult> {
    let eval = |x: &Vector6<f64>| -> Result<(f64, Vector6<f64>)> {
        let tw = Twist::from_vector(x);
        let (f, g) = obj.value_and_gradient(&(*origin * Pose::exp(&tw)))?;
        Ok((f, se3_right_jacobian(&tw).transpose() * g))
    };
    let mut x = x0;
    let (mut f, mut g) = eval(&x)?;
    let mut hinv: Option<Matrix6<f64>> = None;
    for it in 0..config.max_iters {
        if g.norm() < config.g_tol {
            return Ok(BfgsResult {
                x,
                f,
                converged: true,
                iterations: it,
            });
        }
        let p = match &hinv {
            Some(h) => {
                let p = -(h * g);
                if p.dot(&g) < 0.0 {
                    p
                } else {
                    hinv = None;
                    -g * (0.01 / g.norm())
                }
            }
            // first step moves about 1 cm / 0.6 deg
            None => -g * (0.01 / g.norm()),
        };
        let slope = p.dot(&g);
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha * p.norm() >= config.s_tol {
            let xn = x + p * alpha;
            match eval(&xn) {
                Ok((fn_, gn)) if fn_ <= f + config.armijo * alpha * slope => {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
                _ => alpha *= 0.5,
            }
        }
        let Some((xn, fn_, gn)) = accepted else {
            return Ok(BfgsResult {
                x,
                f,
                converged: true,
                iterations: it + 1,
            });
        };
        let s = xn - x;
        let y = gn - g;
        let sy = s.dot(&y);
        if sy > 1e-12 {
            let h = hinv.unwrap_or_else(|| Matrix6::identity() * (sy / y.dot(&y)));
            let rho = 1.0 / sy;
            let i = Matrix6::identity();
            let a = i - s * y.transpose() * rho;
            hinv = Some(a * h * a.transpose() + s * s.transpose() * rho);
        }
        x = xn;
        f = fn_;
        g = gn;
        if s.norm() < config.s_tol {
            return Ok(BfgsResult {
                x,
                f,
                converged: true,
                iterations: it + 1,
            });
        }
    }
    Ok(BfgsResult {
        x,
        f,
        converged: g.norm() < config.g_tol,
        iterations: config.max_iters,
    })
}

/// At or above this starting NID the frame and map share no information and
/// the alignment is not trusted.
pub const UNINFORMATIVE_NID: f64 = 1.0 - 1e-9;

/// Fraction of the initial sample weight a converged alignment must keep.
pub const MIN_RETAINED_OVERLAP: f64 = 0.5;

/// Aligns camera frame `image` to the map starting from `initial`, running
/// BFGS over the blur schedule. Visibility is evaluated once at `initial`.
/// Fails with insufficient overlap when too few points project into the frame.
pub fn align_frame(
    map: &PointCloudMap,
    image: &GrayImage,
    intrinsics: &CameraIntrinsics,
    initial: &Pose,
    config: &NidConfig,
) -> Result<AlignmentPair> {
    let visible = visible_points(map, initial, intrinsics, config);
    align_with_visibility(map, &visible, image, intrinsics, initial, config)
}

/// [`align_frame`] with a precomputed visible point set.
pub fn align_with_visibility(
    map: &PointCloudMap,
    visible: &[usize],
    image: &GrayImage,
    intrinsics: &CameraIntrinsics,
    initial: &Pose,
    config: &NidConfig,
) -> Result<AlignmentPair> {
    if image.width() != intrinsics.width || image.height() != intrinsics.height {
        return Err(Error::InvalidInput(format!(
            "frame is {}x{}, intrinsics say {}x{}",
            image.width(),
            image.height(),
            intrinsics.width,
            intrinsics.height
        )));
    }
    let sharp = NidObjective::new(map, visible, image, intrinsics, config);
    let initial_nid = sharp.value(initial)?;
    let mut x = Vector6::zeros();
    let mut last = None;
    for &sigma in &config.blur_schedule {
        let blurred;
        let obj = if sigma > 0.0 {
            blurred = image.blurred(sigma);
            NidObjective::new(map, visible, &blurred, intrinsics, config)
        } else {
            NidObjective::new(map, visible, image, intrinsics, config)
        };
        let r = bfgs(&obj, initial, x, config)?;
        x = r.x;
        last = Some(r);
    }
    let last = last.expect("blur schedule is non-empty");
    let refined = *initial * Pose::exp(&Twist::from_vector(&x));
    let final_sigma = *config.blur_schedule.last().unwrap();
    let nid = if final_sigma > 0.0 {
        sharp.value(&refined)?
    } else {
        last.f
    };
    Ok(AlignmentPair {
        frame: 0,
        t: 0.0,
        initial: *initial,
        refined,
        initial_nid,
        nid,
        converged: last.converged
            && nid <= initial_nid
            && initial_nid < UNINFORMATIVE_NID
            && sharp.overlap(&refined) >= MIN_RETAINED_OVERLAP * sharp.overlap(initial),
        iterations: last.iterations,
    })
}

/// Indices of the largest set of pairs declaring mutually consistent
/// displacements `initial^-1 * refined`. Only converged pairs take part; ties
/// go to the set with the lower total NID. The result is sorted.
pub fn filter_outliers(pairs: &[AlignmentPair], th_trans: f64, th_rot_deg: f64) -> Vec<usize> {
    let idx: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].converged).collect();
    if idx.is_empty() {
        return Vec::new();
    }
    let deltas: Vec<Pose> = idx.iter().map(|&i| pairs[i].initial.inverse() * &pairs[i].refined).collect();
    let mut edges = Vec::new();
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            if displacements_consistent(&deltas[a], &deltas[b], th_trans, th_rot_deg) {
                edges.push((a, b));
            }
        }
    }
    let graph = ConsistencyGraph::from_edges(idx.len(), &edges);
    let search = search_max_clique(&graph, CliqueMode::Exact);
    let score = |vs: &[usize]| vs.iter().map(|&v| pairs[idx[v]].nid).sum::<f64>();
    let mut best = search.best.vertices.clone();
    for alt in &search.alternatives {
        let (sa, sb) = (score(&alt.vertices), score(&best));
        if sa < sb || (sa == sb && alt.vertices < best) {
            best = alt.vertices.clone();
        }
    }
    let mut out: Vec<usize> = best.into_iter().map(|v| idx[v]).collect();
    out.sort_unstable();
    out
}

/// Whether two declared displacements agree within the thresholds.
pub fn displacements_consistent(a: &Pose, b: &Pose, th_trans: f64, th_rot_deg: f64) -> bool {
    let d = a.inverse() * b;
    d.translation().norm() < th_trans && d.angle().to_degrees() < th_rot_deg
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineStatus {
    Refined,
    /// No alignment survived; the graph is unchanged.
    NoInliers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub status: RefineStatus,
    pub frames_selected: usize,
    pub frames_aligned: usize,
    pub frames_skipped: usize,
    pub converged: usize,
    pub inliers: usize,
    pub pairs: Vec<AlignmentPair>,
    pub inlier_frames: Vec<usize>,
    pub alignment_ms: f64,
    pub filter_ms: f64,
    pub optimize_ms: f64,
    pub optimize: Option<OptimizeReport>,
}

/// Frame indices to align: those with an image, thinned to every k-th so at
/// most `max_frames` remain.
pub fn select_frames(graph: &FactorGraph, frames: &[(f64, GrayImage)], max_frames: usize) -> Vec<(usize, usize)> {
    let mut with_image = Vec::new();
    for (cam, &t) in graph.camera_times.iter().enumerate() {
        let k = frames.partition_point(|(ft, _)| *ft < t - TIME_EPS);
        if k < frames.len() && (frames[k].0 - t).abs() <= TIME_EPS {
            with_image.push((cam, k));
        }
    }
    let step = with_image.len().div_ceil(max_frames.max(1)).max(1);
    with_image.into_iter().step_by(step).collect()
}

/// NID alignment of selected frames, outlier filtering, prior factors and
/// re-optimization. `graph` must already be in the map frame and `frames`
/// sorted by time.
pub fn refine(
    graph: &mut FactorGraph,
    map: &PointCloudMap,
    frames: &[(f64, GrayImage)],
    intrinsics: &CameraIntrinsics,
    config: &NidConfig,
    graph_config: &GraphConfig,
) -> Result<RefineReport> {
    config.validate()?;
    intrinsics.validate()?;
    let selected = select_frames(graph, frames, config.max_frames);
    let t0 = Instant::now();
    let results: Vec<Option<AlignmentPair>> = selected
        .par_iter()
        .map(|&(cam, k)| {
            let init = graph.cameras[cam];
            match align_frame(map, &frames[k].1, intrinsics, &init, config) {
                Ok(mut p) => {
                    p.frame = cam;
                    p.t = graph.camera_times[cam];
                    Some(p)
                }
                Err(Error::InsufficientOverlap { .. }) => None,
                Err(e) => {
                    log::warn!("frame {cam}: alignment failed: {e}");
                    None
                }
            }
        })
        .collect();
    let alignment_ms = t0.elapsed().as_secs_f64() * 1e3;
    let pairs: Vec<AlignmentPair> = results.into_iter().flatten().collect();
    let converged = pairs.iter().filter(|p| p.converged).count();

    let t1 = Instant::now();
    let inliers = filter_outliers(&pairs, config.outlier_th_trans, config.outlier_th_rot_deg);
    let filter_ms = t1.elapsed().as_secs_f64() * 1e3;
    let mut report = RefineReport {
        status: RefineStatus::NoInliers,
        frames_selected: selected.len(),
        frames_aligned: pairs.len(),
        frames_skipped: selected.len() - pairs.len(),
        converged,
        inliers: inliers.len(),
        inlier_frames: inliers.iter().map(|&i| pairs[i].frame).collect(),
        pairs,
        alignment_ms,
        filter_ms,
        optimize_ms: 0.0,
        optimize: None,
    };
    log::info!(
        "nid alignment: {} frames, {} converged, {} inliers",
        report.frames_aligned,
        converged,
        inliers.len()
    );
    if inliers.is_empty() {
        log::warn!("no consistent NID alignments; graph left unchanged");
        return Ok(report);
    }

    let t2 = Instant::now();
    let mut refined = graph.clone();
    refined.anchor = None;
    for &i in &inliers {
        let p = &report.pairs[i];
        refined.add_prior(p.frame, p.refined, Weight::uniform(config.prior_weight));
    }
    report.optimize = Some(optimize(&mut refined, graph_config)?);
    report.optimize_ms = t2.elapsed().as_secs_f64() * 1e3;
    *graph = refined;
    report.status = RefineStatus::Refined;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose_graph::build_graph;
    use crate::se3::pose_error;
    use crate::sim::{generate_scene, synthesize_measurements, NoiseConfig, SimConfig, Texture};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entropy(p: &[f64]) -> f64 {
        let n: f64 = p.iter().sum();
        -p.iter().filter(|&&v| v > 0.0).map(|&v| v / n * (v / n).ln()).sum::<f64>()
    }

    /// NID from an explicit joint table.
    fn nid_oracle(joint: &[Vec<f64>]) -> f64 {
        let rows: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<f64> = (0..joint[0].len()).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
        let flat: Vec<f64> = joint.iter().flatten().copied().collect();
        let (hr, hs, hj) = (entropy(&rows), entropy(&cols), entropy(&flat));
        (hj - (hr + hs - hj)) / hj
    }

    fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |_, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = random_image(&mut rng, 16, 12);
            assert!(nid(&a, &a, 16, Kernel::Nearest, 0.05).unwrap().abs() < 1e-9);
            // spreading votes over neighbouring bins leaves residual entropy
            assert!(nid(&a, &a, 16, Kernel::CubicBSpline, 0.05).unwrap() > 0.0);
        }
        let flat = GrayImage::from_fn(8, 8, |_, _| 0.3);
        assert_eq!(nid(&flat, &flat, 16, Kernel::Nearest, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn independent_checkerboards() {
        let a = GrayImage::from_fn(16, 16, |x, y| ((x / 2 + y / 2) % 2) as f64);
        let b = GrayImage::from_fn(16, 16, |x, _| ((x / 2) % 2) as f64);
        for k in [Kernel::Nearest, Kernel::CubicBSpline] {
            let v = nid(&a, &b, 16, k, 0.05).unwrap();
            assert!((v - 1.0).abs() < 1e-6, "{k:?}: {v}");
        }
    }

    #[test]
    fn two_level_oracle() {
        let ra = [1, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1, 0, 0, 1, 0];
        let sa = [1, 1, 0, 0, 1, 0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1];
        let a = GrayImage::from_fn(4, 4, |x, y| ra[y * 4 + x] as f64);
        let b = GrayImage::from_fn(4, 4, |x, y| sa[y * 4 + x] as f64);
        let mut counts = vec![vec![0.0; 2]; 2];
        for i in 0..16 {
            counts[ra[i]][sa[i]] += 1.0;
        }
        let v = nid(&a, &b, 16, Kernel::Nearest, 0.0).unwrap();
        assert!((v - nid_oracle(&counts)).abs() < 1e-12);

        // cubic B-spline weights at bin offsets 0 and 1: 2/3 and 1/6
        let spread = |level: usize| {
            let mut w = vec![0.0; 16];
            let c = if level == 0 { 1 } else { 14 };
            w[c - 1] = 1.0 / 6.0;
            w[c] = 2.0 / 3.0;
            w[c + 1] = 1.0 / 6.0;
            w
        };
        let mut joint = vec![vec![0.0; 16]; 16];
        for i in 0..16 {
            let (wr, ws) = (spread(ra[i]), spread(sa[i]));
            for p in 0..16 {
                for q in 0..16 {
                    joint[p][q] += wr[p] * ws[q];
                }
            }
        }
        let v = nid(&a, &b, 16, Kernel::CubicBSpline, 0.0).unwrap();
        assert!((v - nid_oracle(&joint)).abs() < 1e-12);
    }

    #[test]
    fn symmetry_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..1000 {
            let a = random_image(&mut rng, 8, 8);
            let b = if i % 3 == 0 {
                GrayImage::from_fn(8, 8, |x, y| (a.get(x, y).unwrap() * 1.7).min(1.0))
            } else {
                random_image(&mut rng, 8, 8)
            };
            for k in [Kernel::Nearest, Kernel::CubicBSpline] {
                let ab = nid(&a, &b, 16, k, 0.05).unwrap();
                let ba = nid(&b, &a, 16, k, 0.05).unwrap();
                assert!((ab - ba).abs() < 1e-12);
                assert!((0.0..=1.0 + 1e-12).contains(&ab));
            }
        }
    }

    #[test]
    fn bin_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let level = |rng: &mut ChaCha8Rng| rng.gen_range(0..16usize);
        let la: Vec<usize> = (0..256).map(|_| level(&mut rng)).collect();
        let lb: Vec<usize> = la.iter().map(|&l| if rng.gen_bool(0.3) { level(&mut rng) } else { l }).collect();
        let mut perm: Vec<usize> = (0..16).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let img = |l: &[usize], p: &dyn Fn(usize) -> usize| {
            GrayImage::from_fn(16, 16, |x, y| p(l[y * 16 + x]) as f64 / 15.0)
        };
        let id = |v: usize| v;
        let pm = |v: usize| perm[v];
        let v0 = nid(&img(&la, &id), &img(&lb, &id), 16, Kernel::Nearest, 0.0).unwrap();
        let v1 = nid(&img(&la, &pm), &img(&lb, &pm), 16, Kernel::Nearest, 0.0).unwrap();
        assert!((v0 - v1).abs() < 1e-12);
    }

    #[test]
    fn overlap_and_size_errors() {
        let a = GrayImage::from_fn(10, 10, |_, _| 0.5);
        let mut b = GrayImage::empty(10, 10);
        b.set(0, 0, 0.5);
        assert!(matches!(
            nid(&a, &b, 16, Kernel::Nearest, 0.05),
            Err(Error::InsufficientOverlap { overlap: 1, required: 5 })
        ));
        let c = GrayImage::from_fn(5, 5, |_, _| 0.5);
        assert!(nid(&a, &c, 16, Kernel::Nearest, 0.05).is_err());
    }

    proptest! {
        #[test]
        fn histogram_mass(samples in prop::collection::vec((-0.2f64..1.2, 0.0f64..1.0, 0.0f64..2.0), 1..200)) {
            for k in [Kernel::Nearest, Kernel::CubicBSpline] {
                let mut h = JointHistogram::<f64>::new(16);
                for &(r, s, w) in &samples {
                    h.add(k, r, s, w);
                }
                let total: f64 = samples.iter().map(|s| s.2).sum();
                prop_assert!((h.joint.iter().sum::<f64>() - total).abs() < 1e-6);
                for i in 0..16 {
                    let row: f64 = h.joint[i * 16..(i + 1) * 16].iter().sum();
                    let col: f64 = (0..16).map(|j| h.joint[j * 16 + i]).sum();
                    prop_assert!((row - h.marginal_r[i]).abs() < 1e-9);
                    prop_assert!((col - h.marginal_s[i]).abs() < 1e-9);
                }
                prop_assert!(h.joint.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn bspline_partition_of_unity(x in 0.0f64..1.0) {
            let v = votes(Kernel::CubicBSpline, 16, x);
            let sum: f64 = v.w[..v.count].iter().sum();
            let dsum: f64 = v.dw[..v.count].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(dsum.abs() < 1e-9);
        }
    }

    #[test]
    fn render_contracts() {
        let k = CameraIntrinsics::from_fov(9, 7, 60.0);
        let at = |u: f64, v: f64, z: f64| k.back_project(u, v) * z;
        let mut map = PointCloudMap::new(vec![at(4.0, 3.0, 2.0)]);
        map.intensities = Some(vec![0.7]);
        let img = render_map_image(&map, &[0], &Pose::identity(), &k, 0);
        assert_eq!(img.get(4, 3), Some(0.7));
        assert_eq!(img.valid_count(), 1);

        let mut map = PointCloudMap::new(vec![at(2.0, 2.0, 3.0), at(2.0, 2.0, 2.0), Vector3::new(0.0, 0.0, -1.0)]);
        map.intensities = Some(vec![0.1, 0.9, 0.5]);
        let img = render_map_image(&map, &[0, 1, 2], &Pose::identity(), &k, 0);
        assert_eq!(img.get(2, 2), Some(0.9));
        assert_eq!(img.valid_count(), 1);
        let img = render_map_image(&map, &[1, 0], &Pose::identity(), &k, 1);
        assert_eq!(img.valid_count(), 9);
        assert!((0..9).all(|i| img.get(1 + i % 3, 1 + i / 3) == Some(0.9)));
    }

    #[test]
    fn hidden_point_removal_occlusion() {
        assert_eq!(hidden_point_removal(&[Vector3::new(0.0, 0.0, 1.0)], &Vector3::zeros(), 3.0), vec![0]);
        let mut pts = vec![Vector3::new(0.0, 0.0, 1.5), Vector3::new(0.0, 0.0, 3.0)];
        for i in -20..=20 {
            for j in -20..=20 {
                let (x, y) = (i as f64 * 0.025, j as f64 * 0.025);
                if x * x + y * y <= 0.25 && (i, j) != (0, 0) {
                    pts.push(Vector3::new(x, y, 2.0));
                }
            }
        }
        for e in [2.0, 3.0, 4.0] {
            let vis = hidden_point_removal(&pts, &Vector3::zeros(), e);
            assert!(vis.contains(&0), "exponent {e}");
            assert!(!vis.contains(&1), "exponent {e}");
        }
    }

    #[test]
    fn empty_frustum() {
        let mut map = PointCloudMap::new(vec![Vector3::new(0.0, 0.0, -2.0); 10]);
        map.intensities = Some(vec![0.5; 10]);
        let k = CameraIntrinsics::from_fov(32, 24, 60.0);
        let vis = visible_points(&map, &Pose::identity(), &k, &NidConfig::default());
        assert!(vis.is_empty());
        let img = GrayImage::from_fn(32, 24, |_, _| 0.5);
        assert!(matches!(
            align_frame(&map, &img, &k, &Pose::identity(), &NidConfig::default()),
            Err(Error::InsufficientOverlap { .. })
        ));
    }

    struct Fixture {
        scene: crate::sim::SyntheticScene,
        frames: Vec<(f64, GrayImage)>,
    }

    fn fixture(seed: u64) -> Fixture {
        let scene = generate_scene(&SimConfig::default(), seed).unwrap();
        let frames = synthesize_measurements(&scene, &NoiseConfig::zero()).unwrap().frames;
        Fixture { scene, frames }
    }

    fn perturb(rng: &mut impl Rng, p: &Pose, t: f64, r_deg: f64) -> Pose {
        let dir = |rng: &mut dyn rand::RngCore| {
            Vector3::<f64>::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize()
        };
        let a = dir(rng) * t;
        let b = dir(rng) * r_deg.to_radians();
        *p * Pose::exp(&Twist::new(a, b))
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f = fixture(7);
        let cfg = NidConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 20 {
            let i = rng.gen_range(0..f.frames.len());
            let truth = f.scene.trajectory[i].1;
            let vis = visible_points(&f.scene.map, &truth, &f.scene.intrinsics, &cfg);
            let obj = NidObjective::new(&f.scene.map, &vis, &f.frames[i].1, &f.scene.intrinsics, &cfg);
            let p = perturb(&mut rng, &truth, 0.05, 1.0);
            let Ok((_, g)) = obj.value_and_gradient(&p) else {
                continue;
            };
            let h = 1e-5;
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let fp = obj.value(&(p * Pose::exp(&Twist::from_vector(&d)))).unwrap();
                let fm = obj.value(&(p * Pose::exp(&Twist::from_vector(&-d)))).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!((g[k] - fd).abs() <= 1e-3 * fd.abs().max(1e-9), "component {k}: {} vs {fd}", g[k]);
            }
            checked += 1;
        }
    }

    #[test]
    fn gradient_points_toward_truth() {
        let f = fixture(7);
        let cfg = NidConfig::default();
        for i in [0, 40, 80] {
            let truth = f.scene.trajectory[i].1;
            let vis = visible_points(&f.scene.map, &truth, &f.scene.intrinsics, &cfg);
            let obj = NidObjective::new(&f.scene.map, &vis, &f.frames[i].1, &f.scene.intrinsics, &cfg);
            for dx in [-0.02, 0.02] {
                let p = truth * Pose::from_translation(Vector3::new(dx, 0.0, 0.0));
                let (_, g) = obj.value_and_gradient(&p).unwrap();
                assert!(g[0] * dx > 0.0, "frame {i}, dx {dx}: {}", g[0]);
            }
        }
    }

    #[test]
    fn alignment_recovers_small_perturbations() {
        let f = fixture(11);
        let cfg = NidConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in [5, 60, 120, 180] {
            let truth = f.scene.trajectory[i].1;
            let init = perturb(&mut rng, &truth, 0.1, 2.0);
            let a = align_frame(&f.scene.map, &f.frames[i].1, &f.scene.intrinsics, &init, &cfg).unwrap();
            let e = pose_error(&a.refined, &truth);
            assert!(a.converged);
            assert!(a.nid <= a.initial_nid);
            assert!(e.translation < 0.02 && e.rotation_deg < 0.5, "frame {i}: {e:?}");
        }
    }

    #[test]
    fn alignment_at_optimum_stays_put() {
        let f = fixture(11);
        let cfg = NidConfig {
            blur_schedule: vec![0.0],
            ..Default::default()
        };
        let i = 30;
        let truth = f.scene.trajectory[i].1;
        let vis = visible_points(&f.scene.map, &truth, &f.scene.intrinsics, &cfg);
        let (map, img, k) = (&f.scene.map, &f.frames[i].1, &f.scene.intrinsics);
        let first = align_with_visibility(map, &vis, img, k, &truth, &cfg).unwrap();
        let again = align_with_visibility(map, &vis, img, k, &first.refined, &cfg).unwrap();
        assert!(again.converged);
        assert!(again.iterations <= 2);
        let d = pose_error(&again.refined, &first.refined);
        assert!(d.translation < 1e-4 && d.rotation_deg < 1e-2);
    }

    #[test]
    fn large_offset_is_not_recovered() {
        let f = fixture(11);
        let cfg = NidConfig::default();
        let i = 90;
        let truth = f.scene.trajectory[i].1;
        let init = truth * Pose::from_translation(Vector3::new(2.0, 0.0, 0.0));
        match align_frame(&f.scene.map, &f.frames[i].1, &f.scene.intrinsics, &init, &cfg) {
            Err(_) => {}
            Ok(a) => assert!(!a.converged || pose_error(&a.refined, &truth).translation > 0.5),
        }
    }

    fn pair(frame: usize, delta: Pose, nid: f64) -> AlignmentPair {
        let initial = Pose::from_translation(Vector3::new(frame as f64, 0.0, 0.0));
        AlignmentPair {
            frame,
            t: frame as f64,
            initial,
            refined: initial * &delta,
            initial_nid: 1.0,
            nid,
            converged: true,
            iterations: 1,
        }
    }

    #[test]
    fn outlier_filter_examples() {
        let d = Pose::new(
            crate::registration::yaw_rotation(0.01),
            Vector3::new(0.05, -0.02, 0.01),
        );
        let all: Vec<_> = (0..6).map(|i| pair(i, d, 0.5)).collect();
        assert_eq!(filter_outliers(&all, 0.5, 5.0), (0..6).collect::<Vec<_>>());

        let mut mixed: Vec<_> = (0..8)
            .map(|i| pair(i, d * Pose::from_translation(Vector3::new(0.01 * i as f64, 0.0, 0.0)), 0.5))
            .collect();
        for (k, off) in [[3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, -3.0]].iter().enumerate() {
            mixed.push(pair(8 + k, Pose::from_translation(Vector3::from(*off)), 0.1));
        }
        assert_eq!(filter_outliers(&mixed, 0.5, 5.0), (0..8).collect::<Vec<_>>());

        let two = vec![
            pair(0, Pose::identity(), 0.7),
            pair(1, Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)), 0.6),
        ];
        assert_eq!(filter_outliers(&two, 0.5, 5.0), vec![1]);

        let mut none = two.clone();
        none.iter_mut().for_each(|p| p.converged = false);
        assert!(filter_outliers(&none, 0.5, 5.0).is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn outlier_filter_output_is_clique(seed in 0u64..10_000, n in 1usize..14) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs: Vec<_> = (0..n)
                .map(|i| {
                    let t = Vector3::from_fn(|_, _| rng.gen_range(-0.6..0.6));
                    let mut p = pair(i, Pose::new(crate::registration::yaw_rotation(rng.gen_range(-0.1..0.1)), t), rng.gen_range(0.0..1.0));
                    p.converged = rng.gen_bool(0.9);
                    p
                })
                .collect();
            let out = filter_outliers(&pairs, 0.5, 5.0);
            for &a in &out {
                prop_assert!(pairs[a].converged);
                for &b in &out {
                    if a < b {
                        let da = pairs[a].initial.inverse() * &pairs[a].refined;
                        let db = pairs[b].initial.inverse() * &pairs[b].refined;
                        prop_assert!(displacements_consistent(&da, &db, 0.5, 5.0));
                    }
                }
            }
            if pairs.iter().any(|p| p.converged) {
                prop_assert!(!out.is_empty());
            }
        }
    }

    fn small_graph(texture: Texture, seed: u64) -> (FactorGraph, crate::sim::SyntheticScene, Vec<(f64, GrayImage)>) {
        let cfg = SimConfig {
            texture,
            waypoints: 8,
            ..Default::default()
        };
        let scene = generate_scene(&cfg, seed).unwrap();
        let m = synthesize_measurements(&scene, &NoiseConfig::low()).unwrap();
        let mut g = build_graph(&m.session.trajectory, &m.session.detections).unwrap();
        optimize(&mut g, &GraphConfig::default()).unwrap();
        g.transform(&scene.map_from_odom);
        (g, scene, m.frames)
    }

    #[test]
    fn texture_free_map_yields_no_inliers() {
        let (mut g, scene, frames) = small_graph(Texture::Constant, 3);
        let before = g.clone();
        let cfg = NidConfig {
            max_frames: 10,
            ..Default::default()
        };
        let rep = refine(&mut g, &scene.map, &frames, &scene.intrinsics, &cfg, &GraphConfig::default()).unwrap();
        assert_eq!(rep.status, RefineStatus::NoInliers);
        assert_eq!(rep.inliers, 0);
        assert_eq!(g.cameras, before.cameras);
        assert_eq!(g.tags, before.tags);
    }

    #[test]
    fn priors_at_optimum_change_nothing() {
        let (mut g, _, _) = small_graph(Texture::Bands, 4);
        let gc = GraphConfig {
            rel_tol: 1e-14,
            step_tol: 1e-14,
            ..Default::default()
        };
        optimize(&mut g, &gc).unwrap();
        let before = g.clone();
        g.anchor = None;
        for i in (0..g.cameras.len()).step_by(5) {
            let p = g.cameras[i];
            g.add_prior(i, p, Weight::UNIT);
        }
        optimize(&mut g, &gc).unwrap();
        for (a, b) in g.cameras.iter().chain(&g.tags).zip(before.cameras.iter().chain(&before.tags)) {
            let e = pose_error(a, b);
            assert!(e.translation < 1e-6 && e.rotation_deg < 1e-4, "{e:?}");
        }
    }

    #[test]
    fn zero_noise_refinement_improves_tags() {
        let scene = generate_scene(&SimConfig::default(), 6).unwrap();
        let m = synthesize_measurements(&scene, &NoiseConfig::zero()).unwrap();
        let mut g = build_graph(&m.session.trajectory, &m.session.detections).unwrap();
        optimize(&mut g, &GraphConfig::default()).unwrap();
        let offset = Pose::exp(&Twist::new(Vector3::new(0.08, -0.05, 0.03), Vector3::new(0.0, 0.0, 1f64.to_radians())));
        g.transform(&(offset * scene.map_from_odom));
        let before = g.clone();
        let cfg = NidConfig {
            max_frames: 30,
            ..Default::default()
        };
        let rep = refine(&mut g, &scene.map, &m.frames, &scene.intrinsics, &cfg, &GraphConfig::default()).unwrap();
        assert_eq!(rep.status, RefineStatus::Refined);
        let truth = scene.truth();
        let err = |graph: &FactorGraph, i: usize| {
            let t = truth.tags.iter().find(|t| t.id == graph.tag_ids[i]).unwrap();
            pose_error(&graph.tags[i], &t.pose_in_map).translation
        };
        let improved = (0..g.tags.len()).filter(|&i| err(&g, i) <= err(&before, i)).count();
        assert!(improved as f64 >= 0.95 * g.tags.len() as f64, "{improved} / {}", g.tags.len());
    }

    #[test]
    fn frame_selection_caps_count() {
        let (g, _, frames) = small_graph(Texture::Bands, 5);
        let sel = select_frames(&g, &frames, 20);
        assert!(sel.len() <= 20 && sel.len() >= 10);
        assert!(sel.windows(2).all(|w| w[0].0 < w[1].0));
        for (cam, k) in sel {
            assert!((g.camera_times[cam] - frames[k].0).abs() < 1e-9);
        }
    }
}
