//! Global tag-map registration.
//!
//! Every (tag, plane) pairing is a hypothesis. Two hypotheses are joined by
//! an edge when each is geometrically consistent with the other; the largest
//! set of pairwise consistent hypotheses (a maximum clique) is taken as the
//! correspondence set and the tag-frame-to-map transform is fitted to it.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{pose_array, TagModel};
use crate::planes::PlaneSegment;
use crate::se3::{align_vectors, so3_exp};
use crate::{Pose, Twist};

/// Tolerance of the "plane normal is almost vertical" swap test.
pub const VERTICAL_EPS: f64 = 1e-3;
/// Below this horizontal normal length a yaw cannot be read from a normal.
const XY_DEGENERATE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tag: usize,
    pub plane: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CliqueMode {
    Heuristic,
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub th_trans: f64,
    pub th_rot_deg: f64,
    pub clique_mode: CliqueMode,
    pub min_clique_size: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            th_trans: 0.4,
            th_rot_deg: 10.0,
            clique_mode: CliqueMode::Heuristic,
            min_clique_size: 4,
        }
    }
}

fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.normalize().dot(&b.normalize()).clamp(-1.0, 1.0).acos()
}

fn xy(v: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(v.x, v.y, 0.0)
}

fn yaw_degenerate(h: Hypothesis, tags: &[TagModel], planes: &[PlaneSegment]) -> bool {
    xy(&tags[h.tag].normal()).norm() < XY_DEGENERATE || xy(&planes[h.plane].normal).norm() < XY_DEGENERATE
}

fn elevation(n: &Vector3<f64>) -> f64 {
    (n.z / n.norm()).clamp(-1.0, 1.0).asin()
}

/// Consistency of `h_kl` given `h_ij`.
///
/// Returns the remaining distance between the slid tag `k` and plane `l`
/// when the pair is consistent, `None` otherwise.
pub fn consistency_slack(
    h_ij: Hypothesis,
    h_kl: Hypothesis,
    tags: &[TagModel],
    planes: &[PlaneSegment],
    th_trans: f64,
    th_rot_deg: f64,
) -> Option<f64> {
    let (mut a, mut b) = (h_ij, h_kl);
    if planes[a.plane].normal.dot(&Vector3::z()) > 1.0 - VERTICAL_EPS {
        std::mem::swap(&mut a, &mut b);
    }
    if yaw_degenerate(a, tags, planes) {
        if yaw_degenerate(b, tags, planes) {
            return yaw_free_slack(a, b, tags, planes, th_trans, th_rot_deg);
        }
        std::mem::swap(&mut a, &mut b);
    }
    let (ti, pj) = (&tags[a.tag], &planes[a.plane]);
    let (tk, pl) = (&tags[b.tag], &planes[b.plane]);

    let (ni, nj) = (xy(&ti.normal()), xy(&pj.normal));
    let r_ji = if ni.dot(&nj) < 0.0 && ni.normalize().cross(&nj.normalize()).norm() < crate::se3::ALIGN_EPS {
        // opposite horizontal normals: the aligning yaw is a half turn
        yaw_rotation(std::f64::consts::PI).to_rotation_matrix().into_inner()
    } else {
        align_vectors(&ni, &nj).ok()?
    };
    let p_ji = pj.center - r_ji * ti.position();
    if angle_between(&(r_ji * tk.normal()), &pl.normal) > th_rot_deg.to_radians() {
        return None;
    }
    let moved_k = r_ji * tk.position() + p_ji;
    let p_lk = pl.center - moved_k;
    let p_jk = pj.basis.transpose() * p_lk;
    let h = pj.half_extents();
    let p_jk_clamped = Vector3::new(
        p_jk.x.clamp(-h.x, h.x),
        p_jk.y.clamp(-h.y, h.y),
        p_jk.z.clamp(-h.z, h.z),
    );
    let slid_k = moved_k + pj.basis * p_jk_clamped;
    let d = pl.box_distance(&slid_k);
    (d <= th_trans).then_some(d)
}

/// Alg. 1 verdict for the ordered pair.
pub fn consistency_check(
    h_ij: Hypothesis,
    h_kl: Hypothesis,
    tags: &[TagModel],
    planes: &[PlaneSegment],
    th_trans: f64,
    th_rot_deg: f64,
) -> bool {
    consistency_slack(h_ij, h_kl, tags, planes, th_trans, th_rot_deg).is_some()
}

/// Both hypotheses have near-vertical normals, so no yaw can be read off
/// either. Tag `i` sits anywhere on plane `j` with any yaw; test whether tag
/// `k` can then reach plane `l`.
fn yaw_free_slack(
    a: Hypothesis,
    b: Hypothesis,
    tags: &[TagModel],
    planes: &[PlaneSegment],
    th_trans: f64,
    th_rot_deg: f64,
) -> Option<f64> {
    let (ti, pj) = (&tags[a.tag], &planes[a.plane]);
    let (tk, pl) = (&tags[b.tag], &planes[b.plane]);
    if (elevation(&tk.normal()) - elevation(&pl.normal)).abs() > th_rot_deg.to_radians() {
        return None;
    }
    let d = tk.position() - ti.position();
    let reach = xy(&d).norm();
    let (dmin, dmax) = rect_distance_range(pj, pl);
    let horizontal = (dmin - reach).max(reach - dmax).max(0.0);
    let (lz_lo, lz_hi) = z_range(pl);
    let z = pj.center.z + d.z;
    let vertical = (lz_lo - z).max(z - lz_hi).max(0.0);
    let slack = horizontal.hypot(vertical);
    (slack <= th_trans).then_some(slack)
}

fn corners(p: &PlaneSegment) -> [Vector3<f64>; 4] {
    let h = p.half_extents();
    [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
        .map(|(sx, sy)| p.center + p.basis * Vector3::new(sx * h.x, sy * h.y, 0.0))
}

fn z_range(p: &PlaneSegment) -> (f64, f64) {
    corners(p)
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c.z), hi.max(c.z)))
}

/// Smallest and largest horizontal distance between points of two
/// near-horizontal segments.
fn rect_distance_range(p: &PlaneSegment, q: &PlaneSegment) -> (f64, f64) {
    let (cp, cq) = (corners(p), corners(q));
    let dmax = cp
        .iter()
        .flat_map(|a| cq.iter().map(move |b| xy(&(a - b)).norm()))
        .fold(0.0, f64::max);
    let (plo, phi) = xy_bounds(&cp);
    let (qlo, qhi) = xy_bounds(&cq);
    let gx = (qlo.x - phi.x).max(plo.x - qhi.x).max(0.0);
    let gy = (qlo.y - phi.y).max(plo.y - qhi.y).max(0.0);
    (gx.hypot(gy), dmax)
}

fn xy_bounds(c: &[Vector3<f64>; 4]) -> (Vector3<f64>, Vector3<f64>) {
    c.iter().fold(
        (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    )
}

/// Dense bitset rows.
#[derive(Clone, Debug, PartialEq)]
struct Bits(Vec<u64>);

impl Bits {
    fn new(n: usize) -> Self {
        Bits(vec![0; n.div_ceil(64)])
    }
    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }
    fn clear(&mut self, i: usize) {
        self.0[i / 64] &= !(1 << (i % 64));
    }
    fn get(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }
    fn and(&self, o: &Bits) -> Bits {
        Bits(self.0.iter().zip(&o.0).map(|(a, b)| a & b).collect())
    }
    fn and_not_assign(&mut self, o: &Bits) {
        self.0.iter_mut().zip(&o.0).for_each(|(a, b)| *a &= !b);
    }
    fn is_empty(&self) -> bool {
        self.0.iter().all(|w| *w == 0)
    }
    fn count(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }
    fn first(&self) -> Option<usize> {
        self.0
            .iter()
            .enumerate()
            .find(|(_, w)| **w != 0)
            .map(|(i, w)| i * 64 + w.trailing_zeros() as usize)
    }
}

/// Undirected graph over hypotheses; edges carry the summed consistency slack.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyGraph {
    pub vertices: Vec<Hypothesis>,
    adjacency: Vec<Bits>,
    /// Sorted by neighbor index.
    neighbors: Vec<Vec<(u32, f64)>>,
}

impl ConsistencyGraph {
    /// Graph from an explicit edge list; every vertex gets a dummy hypothesis.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let vertices = (0..n).map(|i| Hypothesis { tag: i, plane: i }).collect();
        Self::from_weighted_edges(vertices, edges.iter().map(|&(u, v)| (u, v, 0.0)))
    }

    fn from_weighted_edges(vertices: Vec<Hypothesis>, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let n = vertices.len();
        let mut adjacency = vec![Bits::new(n); n];
        let mut neighbors = vec![Vec::new(); n];
        for (u, v, w) in edges {
            if u == v || adjacency[u].get(v) {
                continue;
            }
            adjacency[u].set(v);
            adjacency[v].set(u);
            neighbors[u].push((v as u32, w));
            neighbors[v].push((u as u32, w));
        }
        for l in neighbors.iter_mut() {
            l.sort_by_key(|e| e.0);
        }
        Self {
            vertices,
            adjacency,
            neighbors,
        }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn adjacent(&self, u: usize, v: usize) -> bool {
        self.adjacency[u].get(v)
    }

    pub fn degree(&self, u: usize) -> usize {
        self.neighbors[u].len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn neighbors(&self, u: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighbors[u].iter().map(|e| e.0 as usize)
    }

    fn edge_slack(&self, u: usize, v: usize) -> f64 {
        let l = &self.neighbors[u];
        l.binary_search_by_key(&(v as u32), |e| e.0).map_or(0.0, |k| l[k].1)
    }

    pub fn is_clique(&self, vs: &[usize]) -> bool {
        vs.iter()
            .enumerate()
            .all(|(i, &u)| vs[i + 1..].iter().all(|&v| self.adjacent(u, v)))
    }

    /// Sum of edge slacks inside a vertex set.
    pub fn clique_slack(&self, vs: &[usize]) -> f64 {
        let mut s = 0.0;
        for (i, &u) in vs.iter().enumerate() {
            for &v in &vs[i + 1..] {
                s += self.edge_slack(u, v);
            }
        }
        s
    }

    /// Core number of every vertex.
    pub fn core_numbers(&self) -> Vec<usize> {
        let n = self.len();
        let mut deg: Vec<usize> = (0..n).map(|u| self.degree(u)).collect();
        let maxd = deg.iter().copied().max().unwrap_or(0);
        let mut bins = vec![Vec::new(); maxd + 1];
        for u in 0..n {
            bins[deg[u]].push(u);
        }
        let mut core = vec![0; n];
        let mut removed = vec![false; n];
        let mut d = 0;
        let mut done = 0;
        while done < n {
            let Some(u) = bins[d].pop() else {
                d += 1;
                continue;
            };
            if removed[u] || deg[u] != d {
                continue;
            }
            removed[u] = true;
            core[u] = d;
            done += 1;
            for v in self.neighbors(u) {
                if !removed[v] && deg[v] > d {
                    deg[v] -= 1;
                    bins[deg[v]].push(v);
                }
            }
            d = d.saturating_sub(1);
        }
        core
    }
}

/// Cheap per-hypothesis test: the tag fits on the plane and the tag and
/// plane normals have compatible elevation.
pub fn hypothesis_feasible(tag: &TagModel, plane: &PlaneSegment, config: &RegistrationConfig) -> bool {
    tag.diagonal() <= plane.max_extent() + config.th_trans
        && (elevation(&tag.normal()) - elevation(&plane.normal)).abs() <= config.th_rot_deg.to_radians()
}

/// All feasible hypotheses and the bidirectional consistency edges between
/// mutually exclusive pairs.
pub fn build_consistency_graph(
    tags: &[TagModel],
    planes: &[PlaneSegment],
    config: &RegistrationConfig,
) -> Result<ConsistencyGraph> {
    if tags.is_empty() || planes.is_empty() {
        return Err(Error::UnmatchedScene("registration needs at least one tag and one plane".into()));
    }
    let vertices: Vec<Hypothesis> = (0..tags.len())
        .flat_map(|tag| (0..planes.len()).map(move |plane| Hypothesis { tag, plane }))
        .filter(|h| hypothesis_feasible(&tags[h.tag], &planes[h.plane], config))
        .collect();
    if vertices.is_empty() {
        return Err(Error::UnmatchedScene("no tag fits any extracted plane".into()));
    }
    let (tt, tr) = (config.th_trans, config.th_rot_deg);
    let edges: Vec<Vec<(usize, usize, f64)>> = (0..vertices.len())
        .into_par_iter()
        .map(|u| {
            let hu = vertices[u];
            let mut out = Vec::new();
            for (v, &hv) in vertices.iter().enumerate().skip(u + 1) {
                if hu.tag == hv.tag || hu.plane == hv.plane {
                    continue;
                }
                let Some(a) = consistency_slack(hu, hv, tags, planes, tt, tr) else { continue };
                let Some(b) = consistency_slack(hv, hu, tags, planes, tt, tr) else { continue };
                out.push((u, v, a + b));
            }
            out
        })
        .collect();
    Ok(ConsistencyGraph::from_weighted_edges(vertices, edges.into_iter().flatten()))
}

/// Vertex indices, ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Clique {
    pub vertices: Vec<usize>,
}

impl Clique {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

/// Outcome of a clique search: the chosen clique and every distinct clique
/// of the same size that the search met.
#[derive(Clone, Debug)]
pub struct CliqueSearch {
    pub best: Clique,
    pub alternatives: Vec<Clique>,
}

/// True when some tag is assigned to different planes by the two cliques.
pub fn assignments_conflict(g: &ConsistencyGraph, a: &Clique, b: &Clique) -> bool {
    a.vertices.iter().any(|&u| {
        let hu = g.vertices[u];
        b.vertices.iter().any(|&v| {
            let hv = g.vertices[v];
            hu.tag == hv.tag && hu.plane != hv.plane
        })
    })
}

/// Maximum clique with ties broken by smallest total slack, then by vertex
/// order.
pub fn max_clique(g: &ConsistencyGraph, mode: CliqueMode) -> Clique {
    search_max_clique(g, mode).best
}

pub fn search_max_clique(g: &ConsistencyGraph, mode: CliqueMode) -> CliqueSearch {
    if g.is_empty() {
        return CliqueSearch {
            best: Clique::default(),
            alternatives: Vec::new(),
        };
    }
    let core = g.core_numbers();
    let heuristic = heuristic_cliques(g, &core);
    let mut found = match mode {
        CliqueMode::Heuristic => heuristic,
        CliqueMode::Exact => {
            let lower = heuristic.iter().map(Vec::len).max().unwrap_or(1);
            exact_cliques(g, &core, lower)
        }
    };
    let size = found.iter().map(Vec::len).max().unwrap_or(0);
    found.retain(|c| c.len() == size);
    for c in found.iter_mut() {
        c.sort_unstable();
    }
    found.sort();
    found.dedup();
    let scored: Vec<(f64, Vec<usize>)> = found.into_iter().map(|c| (g.clique_slack(&c), c)).collect();
    let best_idx = scored
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then_with(|| a.1 .1.cmp(&b.1 .1)))
        .map(|(i, _)| i)
        .unwrap();
    let best = Clique {
        vertices: scored[best_idx].1.clone(),
    };
    let alternatives = scored
        .into_iter()
        .enumerate()
        .filter(|(i, _)| *i != best_idx)
        .map(|(_, (_, c))| Clique { vertices: c })
        .collect();
    CliqueSearch { best, alternatives }
}

/// Greedy clique growth from every vertex, neighbors taken in descending
/// core-number order.
fn heuristic_cliques(g: &ConsistencyGraph, core: &[usize]) -> Vec<Vec<usize>> {
    let incumbent = AtomicUsize::new(1);
    let mut roots: Vec<usize> = (0..g.len()).collect();
    roots.sort_by(|&a, &b| core[b].cmp(&core[a]).then(g.degree(b).cmp(&g.degree(a))).then(a.cmp(&b)));
    roots
        .par_iter()
        .filter_map(|&v| {
            if core[v] + 1 < incumbent.load(Ordering::Relaxed) {
                return None;
            }
            let mut cand: Vec<usize> = g.neighbors(v).collect();
            cand.sort_by(|&a, &b| core[b].cmp(&core[a]).then(a.cmp(&b)));
            let mut clique = vec![v];
            for u in cand {
                if clique.iter().all(|&w| g.adjacent(u, w)) {
                    clique.push(u);
                }
            }
            incumbent.fetch_max(clique.len(), Ordering::Relaxed);
            Some(clique)
        })
        .collect()
}

const MAX_TIES_PER_ROOT: usize = 16;

/// Branch and bound with greedy-coloring bounds, one subproblem per root in
/// degeneracy order. Branches are cut only when they cannot reach the
/// incumbent size, so every maximum clique stays reachable.
fn exact_cliques(g: &ConsistencyGraph, core: &[usize], lower: usize) -> Vec<Vec<usize>> {
    let n = g.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| core[a].cmp(&core[b]).then(g.degree(a).cmp(&g.degree(b))).then(a.cmp(&b)));
    let mut rank = vec![0; n];
    for (i, &v) in order.iter().enumerate() {
        rank[v] = i;
    }
    let incumbent = AtomicUsize::new(lower);
    order
        .par_iter()
        .flat_map_iter(|&v| {
            if core[v] + 1 < incumbent.load(Ordering::Relaxed) {
                return Vec::new();
            }
            let mut p = Bits::new(n);
            for u in g.neighbors(v) {
                if rank[u] > rank[v] {
                    p.set(u);
                }
            }
            if p.count() + 1 < incumbent.load(Ordering::Relaxed) {
                return Vec::new();
            }
            let mut search = Expand {
                g,
                incumbent: &incumbent,
                local_best: 0,
                found: Vec::new(),
            };
            let mut c = vec![v];
            if p.is_empty() {
                search.record(&c);
            } else {
                search.expand(&mut c, p);
            }
            search.found
        })
        .collect()
}

struct Expand<'a> {
    g: &'a ConsistencyGraph,
    incumbent: &'a AtomicUsize,
    local_best: usize,
    found: Vec<Vec<usize>>,
}

impl Expand<'_> {
    fn threshold(&self) -> usize {
        let global = self.incumbent.load(Ordering::Relaxed);
        if self.found.len() >= MAX_TIES_PER_ROOT {
            global.max(self.local_best + 1)
        } else {
            global.max(self.local_best)
        }
    }

    fn record(&mut self, c: &[usize]) {
        if c.len() < self.threshold() {
            return;
        }
        if c.len() > self.local_best {
            self.local_best = c.len();
            self.found.clear();
        }
        if self.found.len() < MAX_TIES_PER_ROOT {
            self.found.push(c.to_vec());
        }
        self.incumbent.fetch_max(c.len(), Ordering::Relaxed);
    }

    fn expand(&mut self, c: &mut Vec<usize>, mut p: Bits) {
        let (order, colors) = color_sort(self.g, &p);
        for idx in (0..order.len()).rev() {
            if c.len() + colors[idx] < self.threshold() {
                return;
            }
            let v = order[idx];
            c.push(v);
            let np = p.and(&self.g.adjacency[v]);
            if np.is_empty() {
                self.record(c);
            } else {
                self.expand(c, np);
            }
            c.pop();
            p.clear(v);
        }
    }
}

/// Greedy sequential coloring; vertices returned in nondecreasing color.
fn color_sort(g: &ConsistencyGraph, p: &Bits) -> (Vec<usize>, Vec<usize>) {
    let mut uncolored = p.clone();
    let mut order = Vec::new();
    let mut colors = Vec::new();
    let mut color = 0;
    while !uncolored.is_empty() {
        color += 1;
        let mut q = uncolored.clone();
        while let Some(v) = q.first() {
            q.clear(v);
            q.and_not_assign(&g.adjacency[v]);
            uncolored.clear(v);
            order.push(v);
            colors.push(color);
        }
    }
    (order, colors)
}

/// Residual of one tag sample point against its plane, using the sum of the
/// transformed tag normal and the plane normal.
fn symmetric_residual(t: &Pose, tag: &TagModel, plane: &PlaneSegment, q: &Vector3<f64>) -> f64 {
    let x = t.transform_point(q);
    let l = plane.to_local(&x);
    let h = plane.half_extents();
    let proj = plane.center + plane.basis * Vector3::new(l.x.clamp(-h.x, h.x), l.y.clamp(-h.y, h.y), 0.0);
    let n = t.transform_vector(&tag.normal()) + plane.normal;
    (x - proj).dot(&n)
}

fn residuals(t: &Pose, pairs: &[(&TagModel, &PlaneSegment)]) -> Vec<f64> {
    pairs
        .iter()
        .flat_map(|(tag, plane)| tag.sample_points().map(|q| symmetric_residual(t, tag, plane, &q)))
        .collect()
}

/// Sum of squared symmetric point-to-plane residuals.
pub fn alignment_cost(t: &Pose, pairs: &[(&TagModel, &PlaneSegment)]) -> f64 {
    residuals(t, pairs).iter().map(|r| r * r).sum()
}

/// Gravity-aligned closed form: yaw from the horizontal normal pairs,
/// translation from centroid matching corrected by point-to-plane terms.
pub fn initial_transform(pairs: &[(&TagModel, &PlaneSegment)]) -> Pose {
    let (mut s, mut c) = (0.0, 0.0);
    for (tag, plane) in pairs {
        let a = xy(&tag.normal());
        let b = xy(&plane.normal);
        s += a.cross(&b).z;
        c += a.dot(&b);
    }
    let yaw = if s == 0.0 && c == 0.0 { 0.0 } else { s.atan2(c) };
    let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
    let n = pairs.len() as f64;
    let mean_tag: Vector3<f64> = pairs.iter().map(|(t, _)| rot * t.position()).sum::<Vector3<f64>>() / n;
    let mean_plane: Vector3<f64> = pairs.iter().map(|(_, p)| p.center).sum::<Vector3<f64>>() / n;
    let t0 = mean_plane - mean_tag;
    // min sum ((R p_t + t - c_p) . n_p)^2 + mu |t - t0|^2
    let mu = 1e-3 * n;
    let mut a = Matrix3::identity() * mu;
    let mut b = t0 * mu;
    for (tag, plane) in pairs {
        let np = plane.normal;
        a += np * np.transpose();
        b += np * np.dot(&(plane.center - rot * tag.position()));
    }
    let t = a.cholesky().map_or(t0, |ch| ch.solve(&b));
    Pose::new(rot, t)
}

/// Fits `map_from_tagframe` to the correspondences.
pub fn estimate_transform(tags: &[TagModel], planes: &[PlaneSegment], clique: &[Hypothesis]) -> Result<Pose> {
    if clique.len() < 3 {
        return Err(Error::DegenerateRegistration(format!(
            "transform needs at least 3 correspondences, got {}",
            clique.len()
        )));
    }
    let pairs: Vec<(&TagModel, &PlaneSegment)> = clique.iter().map(|h| (&tags[h.tag], &planes[h.plane])).collect();
    check_normal_rank(&pairs)?;
    let init = initial_transform(&pairs);
    Ok(refine_transform(init, &pairs))
}

fn check_normal_rank(pairs: &[(&TagModel, &PlaneSegment)]) -> Result<()> {
    let scatter: Matrix3<f64> = pairs.iter().map(|(_, p)| p.normal * p.normal.transpose()).sum();
    let eig = SymmetricEigen::new(scatter);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let top = eig.eigenvalues[idx[2]];
    let rank = idx.iter().filter(|&&i| eig.eigenvalues[i] > 1e-3 * top).count();
    let null = eig.eigenvectors.column(idx[0]);
    if rank < 2 || (rank == 2 && null.z.abs() < 0.9) {
        return Err(Error::DegenerateRegistration(format!(
            "plane normals of the correspondences span rank {rank}"
        )));
    }
    if rank == 2 {
        log::warn!("no horizontal plane among correspondences; height comes from centroid matching");
    }
    Ok(())
}

/// Levenberg-Marquardt over a left perturbation with a central-difference
/// Jacobian.
fn refine_transform(init: Pose, pairs: &[(&TagModel, &PlaneSegment)]) -> Pose {
    // pull toward the gravity-aligned initial estimate: weak on translation
    // and yaw, stronger on roll and pitch
    let n = pairs.len() as f64;
    let w = (1e-3 * n).sqrt();
    let w_tilt = n.sqrt();
    let weights = [w, w, w, w_tilt, w_tilt, w];
    let residuals = |t: &Pose, pairs: &[(&TagModel, &PlaneSegment)]| {
        let mut r = residuals(t, pairs);
        let d = (*t * init.inverse()).ln().to_vector();
        r.extend(d.iter().zip(weights).map(|(v, w)| w * v));
        r
    };
    let mut t = init;
    let mut r = nalgebra::DVector::from_vec(residuals(&t, pairs));
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let h = 1e-7;
    for _ in 0..100 {
        let m = r.len();
        let mut j = nalgebra::DMatrix::zeros(m, 6);
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let tp = Pose::exp(&Twist::from_vector(&d)) * t;
            let tm = Pose::exp(&Twist::from_vector(&-d)) * t;
            let col = (nalgebra::DVector::from_vec(residuals(&tp, pairs))
                - nalgebra::DVector::from_vec(residuals(&tm, pairs)))
                / (2.0 * h);
            j.set_column(k, &col);
        }
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let mut improved = false;
        while lambda < 1e10 {
            let mut a = jtj.clone();
            for i in 0..6 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-9);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let cand = Pose::exp(&Twist::from_vector(&Vector6::from_column_slice(step.as_slice()))) * t;
            let rc = nalgebra::DVector::from_vec(residuals(&cand, pairs));
            let cc = rc.norm_squared();
            if cc < cost {
                let rel = (cost - cc) / cost.max(f64::MIN_POSITIVE);
                t = cand;
                r = rc;
                cost = cc;
                lambda = (lambda / 10.0).max(1e-12);
                improved = rel > 1e-12 && step.norm() > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    t
}

/// One clique member, reported with the tag id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub tag_id: u32,
    pub plane: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistrationDiagnostics {
    pub tags: usize,
    pub planes: usize,
    pub vertices: usize,
    pub edges: usize,
    pub clique_size: usize,
    /// Other maximum-size cliques whose tag-to-plane assignment differs.
    pub alternative_cliques: usize,
    pub ambiguous: bool,
    pub graph_ms: f64,
    pub clique_ms: f64,
    pub transform_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    #[serde(with = "pose_array")]
    pub map_from_tag: Pose,
    pub clique: Vec<Correspondence>,
    pub diagnostics: RegistrationDiagnostics,
}

/// Graph, clique and transform in one call. `tags` are in the tag (odometry)
/// frame.
pub fn register(tags: &[TagModel], planes: &[PlaneSegment], config: &RegistrationConfig) -> Result<Registration> {
    let mut diag = RegistrationDiagnostics {
        tags: tags.len(),
        planes: planes.len(),
        ..Default::default()
    };
    let t0 = Instant::now();
    let graph = build_consistency_graph(tags, planes, config)?;
    diag.graph_ms = t0.elapsed().as_secs_f64() * 1e3;
    diag.vertices = graph.len();
    diag.edges = graph.edge_count();

    let t1 = Instant::now();
    let search = search_max_clique(&graph, config.clique_mode);
    diag.clique_ms = t1.elapsed().as_secs_f64() * 1e3;
    diag.clique_size = search.best.len();
    diag.alternative_cliques = search
        .alternatives
        .iter()
        .filter(|c| assignments_conflict(&graph, &search.best, c))
        .count();
    diag.ambiguous = !search.alternatives.is_empty();
    if diag.alternative_cliques > 0 {
        log::warn!(
            "{} other cliques of size {} assign tags differently",
            diag.alternative_cliques,
            diag.clique_size
        );
    }
    log::info!(
        "consistency graph: {} vertices, {} edges, max clique {}",
        diag.vertices,
        diag.edges,
        diag.clique_size
    );
    if search.best.len() < config.min_clique_size {
        return Err(Error::RegistrationFailed(format!(
            "maximum clique has {} correspondences, need {}",
            search.best.len(),
            config.min_clique_size
        )));
    }
    let hyps: Vec<Hypothesis> = search.best.vertices.iter().map(|&v| graph.vertices[v]).collect();
    let t2 = Instant::now();
    let map_from_tag = estimate_transform(tags, planes, &hyps)?;
    diag.transform_ms = t2.elapsed().as_secs_f64() * 1e3;
    Ok(Registration {
        map_from_tag,
        clique: hyps
            .iter()
            .map(|h| Correspondence {
                tag_id: tags[h.tag].tag_id,
                plane: h.plane,
            })
            .collect(),
        diagnostics: diag,
    })
}

/// Tag list in a reference frame, as stored in `tags.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagsFile {
    pub tags: Vec<TagEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagEntry {
    pub id: u32,
    #[serde(with = "pose_array")]
    pub pose: Pose,
    pub edge_length: f64,
}

impl TagsFile {
    pub fn from_models(tags: &[TagModel]) -> Self {
        Self {
            tags: tags
                .iter()
                .map(|t| TagEntry {
                    id: t.tag_id,
                    pose: t.pose,
                    edge_length: t.edge_length,
                })
                .collect(),
        }
    }

    pub fn to_models(&self) -> Result<Vec<TagModel>> {
        self.tags.iter().map(|e| TagModel::new(e.id, e.edge_length, e.pose)).collect()
    }
}

/// Random rotation about +z, for tests and simulation.
pub fn yaw_rotation(yaw: f64) -> UnitQuaternion<f64> {
    so3_exp(&Vector3::new(0.0, 0.0, yaw))
}
