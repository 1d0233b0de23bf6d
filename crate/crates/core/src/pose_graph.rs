//! Landmark pose graph: camera poses chained by odometry, tag poses tied to
//! cameras by detections, optional map-frame priors on cameras.
//!
//! Every residual has the form `log(E)` and every variable is perturbed on
//! the right, `X <- X exp(d)`, so the Jacobians are products of the inverse
//! right Jacobian of `log(E)` and an adjoint.

use std::collections::BTreeMap;

use nalgebra::{DVector, Matrix6, Vector6};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{OdometryTrajectory, TagObservation};
use crate::se3::se3_right_jacobian_inv;
use crate::{Pose, Twist};

/// Scalar information weights for the translational and rotational blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weight {
    pub translation: f64,
    pub rotation: f64,
}

impl Weight {
    pub const UNIT: Weight = Weight {
        translation: 1.0,
        rotation: 1.0,
    };

    pub fn uniform(w: f64) -> Self {
        Self {
            translation: w,
            rotation: w,
        }
    }

    fn scaled(self, s: f64) -> Self {
        Self {
            translation: self.translation * s,
            rotation: self.rotation * s,
        }
    }

    fn sqrt_diag(self) -> Vector6<f64> {
        let (a, b) = (self.translation.sqrt(), self.rotation.sqrt());
        Vector6::new(a, a, a, b, b, b)
    }
}

impl Default for Weight {
    fn default() -> Self {
        Self::UNIT
    }
}

/// A graph variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    /// Index into the camera chain.
    Camera(usize),
    /// Index into the tag list.
    Tag(usize),
}

/// Relative motion between consecutive frames, `X_from^-1 X_to`.
#[derive(Clone, Debug, PartialEq)]
pub struct OdometryFactor {
    pub from: usize,
    pub to: usize,
    pub measured: Pose,
    pub weight: Weight,
}

/// Tag pose seen from a camera.
#[derive(Clone, Debug, PartialEq)]
pub struct TagFactor {
    pub camera: usize,
    pub tag: usize,
    pub measured: Pose,
    pub weight: Weight,
}

/// Camera pose in the map frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorFactor {
    pub camera: usize,
    pub measured: Pose,
    pub weight: Weight,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Factor {
    Odometry(OdometryFactor),
    Tag(TagFactor),
    Prior(PriorFactor),
}

impl Factor {
    fn vars(&self) -> (Var, Option<Var>) {
        match self {
            Factor::Odometry(f) => (Var::Camera(f.from), Some(Var::Camera(f.to))),
            Factor::Tag(f) => (Var::Camera(f.camera), Some(Var::Tag(f.tag))),
            Factor::Prior(f) => (Var::Camera(f.camera), None),
        }
    }

    fn weight(&self, config: &GraphConfig) -> Weight {
        match self {
            Factor::Odometry(f) => f.weight.scaled(config.odom_weight),
            Factor::Tag(f) => f.weight.scaled(config.tag_weight),
            Factor::Prior(f) => f.weight.scaled(config.prior_weight),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorGraph {
    pub camera_times: Vec<f64>,
    pub cameras: Vec<Pose>,
    /// Sorted ascending.
    pub tag_ids: Vec<u32>,
    pub tags: Vec<Pose>,
    pub factors: Vec<Factor>,
    /// Camera held fixed during optimization to remove the gauge freedom.
    pub anchor: Option<usize>,
}

impl FactorGraph {
    pub fn pose(&self, v: Var) -> &Pose {
        match v {
            Var::Camera(i) => &self.cameras[i],
            Var::Tag(i) => &self.tags[i],
        }
    }

    fn pose_mut(&mut self, v: Var) -> &mut Pose {
        match v {
            Var::Camera(i) => &mut self.cameras[i],
            Var::Tag(i) => &mut self.tags[i],
        }
    }

    pub fn tag_index(&self, id: u32) -> Option<usize> {
        self.tag_ids.binary_search(&id).ok()
    }

    pub fn tag_pose(&self, id: u32) -> Option<&Pose> {
        self.tag_index(id).map(|i| &self.tags[i])
    }

    pub fn camera_index(&self, t: f64) -> Option<usize> {
        let i = self.camera_times.partition_point(|&s| s < t - 1e-9);
        (i < self.camera_times.len() && (self.camera_times[i] - t).abs() <= 1e-9).then_some(i)
    }

    pub fn add_prior(&mut self, camera: usize, measured: Pose, weight: Weight) {
        self.factors.push(Factor::Prior(PriorFactor {
            camera,
            measured,
            weight,
        }));
    }

    pub fn remove_priors(&mut self) {
        self.factors.retain(|f| !matches!(f, Factor::Prior(_)));
    }

    /// Left-multiplies every variable by `g`.
    pub fn transform(&mut self, g: &Pose) {
        for p in self.cameras.iter_mut().chain(self.tags.iter_mut()) {
            *p = g * &*p;
        }
    }

    /// Sum of weighted squared residual norms (no robust kernel).
    pub fn cost(&self, config: &GraphConfig) -> f64 {
        self.factors
            .iter()
            .map(|f| {
                let r = residual(f, self).to_vector();
                r.component_mul(&f.weight(config).sqrt_diag()).norm_squared()
            })
            .sum()
    }
}

/// Builds the graph from odometry and detections.
///
/// Camera variables start at the odometry poses; each tag starts at
/// `X_camera * T_camera_tag` of its first detection. The first camera is
/// the anchor.
pub fn build_graph(trajectory: &OdometryTrajectory, detections: &[TagObservation]) -> Result<FactorGraph> {
    if trajectory.len() < 2 {
        return Err(Error::InvalidInput("pose graph needs at least two frames".into()));
    }
    if detections.is_empty() {
        return Err(Error::InvalidInput("pose graph needs at least one tag detection".into()));
    }
    let camera_times: Vec<f64> = trajectory.times().collect();
    let cameras: Vec<Pose> = trajectory.poses().copied().collect();
    let mut factors: Vec<Factor> = cameras
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            Factor::Odometry(OdometryFactor {
                from: i,
                to: i + 1,
                measured: w[0].inverse() * w[1],
                weight: Weight::UNIT,
            })
        })
        .collect();

    let mut first_seen: BTreeMap<u32, Pose> = BTreeMap::new();
    let mut frame_of = Vec::with_capacity(detections.len());
    for d in detections {
        let ci = trajectory.index_of(d.frame_time).ok_or_else(|| {
            Error::InvalidInput(format!("detection of tag {} at unknown time {}", d.tag_id, d.frame_time))
        })?;
        first_seen
            .entry(d.tag_id)
            .or_insert_with(|| cameras[ci] * d.pose_in_camera);
        frame_of.push(ci);
    }
    let tag_ids: Vec<u32> = first_seen.keys().copied().collect();
    let tags: Vec<Pose> = first_seen.values().copied().collect();
    for (d, ci) in detections.iter().zip(frame_of) {
        factors.push(Factor::Tag(TagFactor {
            camera: ci,
            tag: tag_ids.binary_search(&d.tag_id).unwrap(),
            measured: d.pose_in_camera,
            weight: Weight::UNIT,
        }));
    }
    Ok(FactorGraph {
        camera_times,
        cameras,
        tag_ids,
        tags,
        factors,
        anchor: Some(0),
    })
}

fn error_pose(factor: &Factor, g: &FactorGraph) -> Pose {
    match factor {
        Factor::Odometry(f) => g.cameras[f.to].inverse() * g.cameras[f.from] * f.measured,
        Factor::Tag(f) => g.cameras[f.camera].inverse() * g.tags[f.tag] * f.measured.inverse(),
        Factor::Prior(f) => g.cameras[f.camera].inverse() * f.measured,
    }
}

/// Residual twist of a factor at the graph's current estimates.
pub fn residual(factor: &Factor, graph: &FactorGraph) -> Twist {
    error_pose(factor, graph).ln()
}

/// Residual and its Jacobians with respect to the factor's variables.
pub fn linearize(factor: &Factor, graph: &FactorGraph) -> (Vector6<f64>, Matrix6<f64>, Option<Matrix6<f64>>) {
    let e = error_pose(factor, graph);
    let r = e.ln();
    let jr_inv = se3_right_jacobian_inv(&r);
    let left = -(jr_inv * e.inverse().adjoint());
    let (ja, jb) = match factor {
        Factor::Odometry(f) => (jr_inv * f.measured.inverse().adjoint(), Some(left)),
        Factor::Tag(f) => (left, Some(jr_inv * f.measured.adjoint())),
        Factor::Prior(_) => (left, None),
    };
    (r.to_vector(), ja, jb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub max_iterations: usize,
    pub rel_tol: f64,
    pub step_tol: f64,
    pub damping_init: f64,
    pub odom_weight: f64,
    pub tag_weight: f64,
    pub prior_weight: f64,
    /// Huber threshold on the whitened residual norm; `None` is plain least squares.
    pub huber: Option<f64>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            rel_tol: 1e-8,
            step_tol: 1e-10,
            damping_init: 1e-4,
            odom_weight: 1.0,
            tag_weight: 1.0,
            prior_weight: 1.0,
            huber: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    CostConverged,
    StepConverged,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Cost after each accepted step.
    pub cost_history: Vec<f64>,
}

struct Layout {
    offsets: Vec<Option<usize>>,
    dim: usize,
    n_cameras: usize,
}

impl Layout {
    fn new(g: &FactorGraph) -> Self {
        let n = g.cameras.len() + g.tags.len();
        let mut offsets = Vec::with_capacity(n);
        let mut dim = 0;
        for i in 0..n {
            if g.anchor == Some(i) {
                offsets.push(None);
            } else {
                offsets.push(Some(dim));
                dim += 6;
            }
        }
        Self {
            offsets,
            dim,
            n_cameras: g.cameras.len(),
        }
    }

    fn offset(&self, v: Var) -> Option<usize> {
        match v {
            Var::Camera(i) => self.offsets[i],
            Var::Tag(i) => self.offsets[self.n_cameras + i],
        }
    }
}

fn robust_scale(whitened_norm: f64, huber: Option<f64>) -> (f64, f64) {
    // returns (IRLS weight, rho)
    let sq = whitened_norm * whitened_norm;
    match huber {
        Some(d) if whitened_norm > d => (d / whitened_norm, 2.0 * d * whitened_norm - d * d),
        _ => (1.0, sq),
    }
}

fn total_cost(g: &FactorGraph, config: &GraphConfig) -> f64 {
    g.factors
        .par_iter()
        .map(|f| {
            let r = residual(f, g).to_vector().component_mul(&f.weight(config).sqrt_diag());
            robust_scale(r.norm(), config.huber).1
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum()
}

/// Levenberg-Marquardt on the sparse normal equations.
pub fn optimize(graph: &mut FactorGraph, config: &GraphConfig) -> Result<OptimizeReport> {
    let layout = Layout::new(graph);
    let initial_cost = total_cost(graph, config);
    let mut report = OptimizeReport {
        initial_cost,
        final_cost: initial_cost,
        iterations: 0,
        termination: Termination::MaxIterations,
        cost_history: Vec::new(),
    };
    if layout.dim == 0 {
        report.termination = Termination::StepConverged;
        return Ok(report);
    }
    let mut cost = initial_cost;
    let mut lambda = config.damping_init;
    for iter in 0..config.max_iterations {
        report.iterations = iter + 1;
        let (h, g) = normal_equations(graph, config, &layout);
        let mut accepted = false;
        let mut failures = 0;
        loop {
            let step = match solve_damped(&h, &g, lambda, layout.dim) {
                Some(s) => s,
                None => {
                    failures += 1;
                    lambda *= 10.0;
                    if failures > 12 {
                        return Err(Error::IllConditioned(format!(
                            "normal equations not positive definite (damping {lambda:e})"
                        )));
                    }
                    continue;
                }
            };
            if step.norm() < config.step_tol {
                report.termination = Termination::StepConverged;
                report.final_cost = cost;
                return Ok(report);
            }
            let mut candidate = graph.clone();
            apply_step(&mut candidate, &layout, &step);
            let new_cost = total_cost(&candidate, config);
            if new_cost.is_finite() && new_cost <= cost {
                let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                *graph = candidate;
                cost = new_cost;
                report.cost_history.push(cost);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel < config.rel_tol || cost == 0.0 {
                    report.termination = Termination::CostConverged;
                    report.final_cost = cost;
                    return Ok(report);
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
        if !accepted {
            report.termination = Termination::StepConverged;
            break;
        }
    }
    report.final_cost = cost;
    Ok(report)
}

fn normal_equations(g: &FactorGraph, config: &GraphConfig, layout: &Layout) -> (CscMatrix<f64>, DVector<f64>) {
    let lin: Vec<_> = g
        .factors
        .par_iter()
        .map(|f| {
            let (r, ja, jb) = linearize(f, g);
            let s = f.weight(config).sqrt_diag();
            let rw = r.component_mul(&s);
            let (irls, _) = robust_scale(rw.norm(), config.huber);
            let w = Matrix6::from_diagonal(&s.component_mul(&s)) * irls;
            (f.vars(), r, ja, jb, w)
        })
        .collect();

    let mut coo = CooMatrix::new(layout.dim, layout.dim);
    let mut rhs = DVector::zeros(layout.dim);
    let push_block = |coo: &mut CooMatrix<f64>, r0: usize, c0: usize, m: &Matrix6<f64>| {
        for c in 0..6 {
            for r in 0..6 {
                coo.push(r0 + r, c0 + c, m[(r, c)]);
            }
        }
    };
    for ((va, vb), r, ja, jb, w) in &lin {
        let blocks: [(Option<usize>, Option<&Matrix6<f64>>); 2] = [
            (layout.offset(*va), Some(ja)),
            (vb.and_then(|v| layout.offset(v)), jb.as_ref()),
        ];
        for (oa, ma) in blocks.iter() {
            let (Some(oa), Some(ma)) = (oa, ma) else { continue };
            let jtw = ma.transpose() * w;
            rhs.rows_mut(*oa, 6).axpy(-1.0, &(jtw * r), 1.0);
            for (ob, mb) in blocks.iter() {
                let (Some(ob), Some(mb)) = (ob, mb) else { continue };
                push_block(&mut coo, *oa, *ob, &(jtw * *mb));
            }
        }
    }
    (CscMatrix::from(&coo), rhs)
}

fn solve_damped(h: &CscMatrix<f64>, g: &DVector<f64>, lambda: f64, dim: usize) -> Option<DVector<f64>> {
    let mut damped = h.clone();
    let max_diag = (0..dim)
        .filter_map(|i| damped.get_entry(i, i).map(|e| e.into_value()))
        .fold(0.0f64, f64::max);
    let floor = 1e-9 * max_diag.max(1.0);
    for col in 0..dim {
        let mut c = damped.col_mut(col);
        let (rows, vals) = c.rows_and_values_mut();
        if let Ok(k) = rows.binary_search(&col) {
            vals[k] += lambda * vals[k].max(floor);
        } else {
            return None;
        }
    }
    let chol = CscCholesky::factor(&damped).ok()?;
    let x = chol.solve(g);
    let x = DVector::from_column_slice(x.as_slice());
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn apply_step(g: &mut FactorGraph, layout: &Layout, step: &DVector<f64>) {
    let vars: Vec<Var> = (0..g.cameras.len())
        .map(Var::Camera)
        .chain((0..g.tags.len()).map(Var::Tag))
        .collect();
    for v in vars {
        if let Some(o) = layout.offset(v) {
            let d = Twist::from_vector(&Vector6::from_column_slice(&step.as_slice()[o..o + 6]));
            let p = g.pose_mut(v);
            *p = p.retract(&d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng, scale: f64) -> Pose {
        let v = Vector6::from_fn(|i, _| rng.gen_range(-1.0..1.0) * if i < 3 { scale } else { 1.0 });
        Pose::exp(&Twist::from_vector(&v))
    }

    fn trajectory(poses: Vec<Pose>) -> OdometryTrajectory {
        OdometryTrajectory::new(poses.into_iter().enumerate().map(|(i, p)| (i as f64 * 0.1, p)).collect()).unwrap()
    }

    fn obs(t: f64, id: u32, pose: Pose) -> TagObservation {
        TagObservation {
            frame_time: t,
            tag_id: id,
            pose_in_camera: pose,
        }
    }

    #[test]
    fn counting_contract() {
        let traj = trajectory(vec![Pose::identity(); 3]);
        let g = build_graph(&traj, &[obs(0.1, 7, Pose::identity()), obs(0.2, 7, Pose::identity())]).unwrap();
        assert_eq!(g.cameras.len(), 3);
        assert_eq!(g.tags.len(), 1);
        let odo = g.factors.iter().filter(|f| matches!(f, Factor::Odometry(_))).count();
        let tag = g.factors.iter().filter(|f| matches!(f, Factor::Tag(_))).count();
        assert_eq!((odo, tag), (2, 2));
        assert!(build_graph(&traj, &[]).is_err());
        assert!(build_graph(&trajectory(vec![Pose::identity()]), &[obs(0.0, 1, Pose::identity())]).is_err());
    }

    #[test]
    fn single_observation_has_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let traj = trajectory((0..4).map(|_| random_pose(&mut rng, 2.0)).collect());
        let g = build_graph(&traj, &[obs(0.2, 3, random_pose(&mut rng, 1.0))]).unwrap();
        assert!(g.cost(&GraphConfig::default()) < 1e-20);
        let want = traj.samples()[2].1 * g.factors.iter().find_map(|f| match f {
            Factor::Tag(t) => Some(t.measured),
            _ => None,
        }).unwrap();
        assert_eq!(g.tags[0], want);
    }

    #[test]
    fn disjoint_tags_share_one_graph() {
        let traj = trajectory(vec![Pose::identity(); 4]);
        let g = build_graph(&traj, &[obs(0.0, 1, Pose::identity()), obs(0.3, 2, Pose::identity())]).unwrap();
        // union-find over factor endpoints
        let n = g.cameras.len() + g.tags.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut Vec<usize>, i: usize) -> usize {
            if p[i] != i {
                let r = find(p, p[i]);
                p[i] = r;
            }
            p[i]
        }
        let idx = |v: Var| match v {
            Var::Camera(i) => i,
            Var::Tag(i) => g.cameras.len() + i,
        };
        for f in &g.factors {
            if let (a, Some(b)) = f.vars() {
                let (ra, rb) = (find(&mut parent, idx(a)), find(&mut parent, idx(b)));
                parent[ra] = rb;
            }
        }
        let root = find(&mut parent, 0);
        assert!((0..n).all(|i| find(&mut parent, i) == root));
    }

    #[test]
    fn residual_examples() {
        let traj = trajectory(vec![Pose::identity(), Pose::identity()]);
        let mut g = build_graph(&traj, &[obs(0.0, 1, Pose::identity())]).unwrap();
        assert!(g.factors.iter().all(|f| residual(f, &g).norm() == 0.0));
        g.cameras[1] = Pose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let r = residual(&g.factors[0], &g);
        assert!((r.linear.norm() - 0.1).abs() < 1e-12 && r.angular.norm() == 0.0);
        g.add_prior(1, g.cameras[1], Weight::UNIT);
        assert_eq!(residual(g.factors.last().unwrap(), &g).norm(), 0.0);
    }

    #[test]
    fn jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-6;
        for _ in 0..100 {
            let traj = trajectory((0..2).map(|_| random_pose(&mut rng, 3.0)).collect());
            let mut g = build_graph(&traj, &[obs(0.0, 0, random_pose(&mut rng, 2.0))]).unwrap();
            g.add_prior(1, random_pose(&mut rng, 3.0), Weight::UNIT);
            g.cameras[0] = random_pose(&mut rng, 3.0);
            g.cameras[1] = random_pose(&mut rng, 3.0);
            g.tags[0] = random_pose(&mut rng, 3.0);
            for f in &g.factors {
                if residual(f, &g).angular.norm() > 2.8 {
                    continue;
                }
                let (_, ja, jb) = linearize(f, &g);
                let (va, vb) = f.vars();
                for (v, j) in [(Some(va), Some(ja)), (vb, jb)] {
                    let (Some(v), Some(j)) = (v, j) else { continue };
                    let mut num = Matrix6::zeros();
                    for k in 0..6 {
                        let mut d = Vector6::zeros();
                        d[k] = h;
                        let mut gp = g.clone();
                        *gp.pose_mut(v) = g.pose(v).retract(&Twist::from_vector(&d));
                        let mut gm = g.clone();
                        *gm.pose_mut(v) = g.pose(v).retract(&Twist::from_vector(&-d));
                        let col = (residual(f, &gp).to_vector() - residual(f, &gm).to_vector()) / (2.0 * h);
                        num.set_column(k, &col);
                    }
                    let rel = (num - j).norm() / j.norm().max(1.0);
                    assert!(rel < 1e-5, "relative error {rel}");
                }
            }
        }
    }

    fn noisy_problem(seed: u64) -> (FactorGraph, Vec<Pose>, Vec<Pose>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<Pose> = (0..20)
            .map(|i| Pose::exp(&Twist::new(
                Vector3::new(i as f64 * 0.3, (i as f64 * 0.4).sin(), 0.0),
                Vector3::new(0.0, 0.0, i as f64 * 0.1),
            )))
            .collect();
        let tags: Vec<Pose> = (0..3).map(|_| random_pose(&mut rng, 3.0)).collect();
        let mut det = Vec::new();
        for (i, c) in truth.iter().enumerate() {
            for (k, t) in tags.iter().enumerate() {
                if (i + k) % 3 == 0 {
                    det.push(obs(i as f64 * 0.1, k as u32, c.inverse() * t));
                }
            }
        }
        let g = build_graph(&trajectory(truth.clone()), &det).unwrap();
        (g, truth, tags)
    }

    #[test]
    fn zero_noise_graph_recovers_truth() {
        let (mut g, truth, tags) = noisy_problem(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for c in g.cameras.iter_mut().skip(1) {
            *c = c.retract(&Twist::from_vector(&Vector6::from_fn(|_, _| rng.gen_range(-0.05..0.05))));
        }
        for t in g.tags.iter_mut() {
            *t = t.retract(&Twist::from_vector(&Vector6::from_fn(|_, _| rng.gen_range(-0.05..0.05))));
        }
        let report = optimize(&mut g, &GraphConfig::default()).unwrap();
        assert!(report.final_cost < 1e-10, "{report:?}");
        for (a, b) in g.cameras.iter().zip(&truth).chain(g.tags.iter().zip(&tags)) {
            assert!((a.inverse() * b).ln().norm() < 1e-6);
        }
        for w in report.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn internal_cost_equals_factor_sum() {
        let (mut g, _, _) = noisy_problem(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for f in g.factors.iter_mut() {
            if let Factor::Tag(t) = f {
                t.measured = t.measured.retract(&Twist::from_vector(&Vector6::from_fn(|_, _| rng.gen_range(-0.1..0.1))));
            }
        }
        let cfg = GraphConfig {
            tag_weight: 2.0,
            ..Default::default()
        };
        let by_hand: f64 = g
            .factors
            .iter()
            .map(|f| {
                let r = residual(f, &g);
                let w = if matches!(f, Factor::Tag(_)) { 2.0 } else { 1.0 };
                w * r.norm_squared()
            })
            .sum();
        assert!((g.cost(&cfg) - by_hand).abs() <= 1e-12 * by_hand.max(1.0));
        assert!((total_cost(&g, &cfg) - by_hand).abs() <= 1e-12 * by_hand.max(1.0));
        let report = optimize(&mut g, &cfg).unwrap();
        assert!((report.final_cost - g.cost(&cfg)).abs() <= 1e-12 * report.final_cost.max(1.0));
    }

    #[test]
    fn gauge_freedom_without_anchor() {
        let (mut g, _, _) = noisy_problem(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for c in g.cameras.iter_mut() {
            *c = c.retract(&Twist::from_vector(&Vector6::from_fn(|_, _| rng.gen_range(-0.1..0.1))));
        }
        let cfg = GraphConfig::default();
        let before = g.cost(&cfg);
        g.transform(&random_pose(&mut rng, 5.0));
        assert!((g.cost(&cfg) - before).abs() < 1e-9);
    }

    /// Tag seen twice from an anchored camera with translations `+d` and `-d`.
    #[test]
    fn conflicting_measurements_meet_at_midpoint() {
        let d = 0.3;
        let traj = trajectory(vec![Pose::identity(), Pose::identity()]);
        let shift = |x: f64| Pose::from_translation(Vector3::new(x, 0.0, 0.0));
        let mut g = build_graph(&traj, &[obs(0.0, 1, shift(d)), obs(0.0, 1, shift(-d))]).unwrap();
        optimize(&mut g, &GraphConfig::default()).unwrap();
        assert!(g.tags[0].translation().norm() < 1e-9);

        // Same conflict split across a free second camera: the 1-D normal
        // equations for (c, x) with residuals x-d, x-c+d, c give x = d/3.
        let mut g = build_graph(&traj, &[obs(0.0, 1, shift(d)), obs(0.1, 1, shift(-d))]).unwrap();
        optimize(&mut g, &GraphConfig::default()).unwrap();
        let a = nalgebra::Matrix2::new(2.0, -1.0, -1.0, 2.0);
        let b = nalgebra::Vector2::new(d, 0.0);
        let oracle = a.lu().solve(&b).unwrap();
        assert!((g.cameras[1].translation().x - oracle[0]).abs() < 1e-9);
        assert!((g.tags[0].translation().x - oracle[1]).abs() < 1e-9);
    }

    /// A 1-D chain with odometry steps of 1 and priors at 1.1 * i: the
    /// weighted least-squares solution, computed densely, is the oracle.
    #[test]
    fn dominant_priors_pull_chain_to_map() {
        let n = 6;
        let shift = |x: f64| Pose::from_translation(Vector3::new(x, 0.0, 0.0));
        let traj = trajectory((0..n).map(|i| shift(i as f64)).collect());
        let mut g = build_graph(&traj, &[obs(0.0, 1, Pose::identity())]).unwrap();
        g.anchor = None;
        let w = 1e6;
        for i in 0..n {
            g.add_prior(i, shift(1.1 * i as f64), Weight::uniform(1.0));
        }
        let cfg = GraphConfig {
            prior_weight: w,
            ..Default::default()
        };
        optimize(&mut g, &cfg).unwrap();
        let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
        let mut b = nalgebra::DVector::<f64>::zeros(n);
        for i in 0..n {
            a[(i, i)] += w;
            b[i] += w * 1.1 * i as f64;
        }
        for i in 0..n - 1 {
            a[(i, i)] += 1.0;
            a[(i + 1, i + 1)] += 1.0;
            a[(i, i + 1)] -= 1.0;
            a[(i + 1, i)] -= 1.0;
            b[i] -= 1.0;
            b[i + 1] += 1.0;
        }
        let x = a.lu().solve(&b).unwrap();
        for i in 0..n {
            let got = g.cameras[i].translation().x;
            assert!((got - x[i]).abs() < 1e-8);
            assert!((got - 1.1 * i as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn optimization_is_deterministic() {
        let (mut a, _, _) = noisy_problem(11);
        for f in a.factors.iter_mut() {
            if let Factor::Tag(t) = f {
                t.measured = t.measured.retract(&Twist::new(Vector3::new(0.02, 0.0, -0.01), Vector3::new(0.0, 0.01, 0.0)));
            }
        }
        let mut b = a.clone();
        let cfg = GraphConfig {
            huber: Some(0.05),
            ..Default::default()
        };
        let ra = optimize(&mut a, &cfg).unwrap();
        let rb = optimize(&mut b, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.final_cost, rb.final_cost);
    }
}
