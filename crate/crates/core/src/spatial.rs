//! Uniform voxel hash grid for neighbor queries.

use std::collections::HashMap;

use nalgebra::Vector3;

type Key = (i32, i32, i32);

pub struct VoxelGrid<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    cells: HashMap<Key, Vec<u32>>,
}

impl<'a> VoxelGrid<'a> {
    pub fn new(points: &'a [Vector3<f64>], cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut cells: HashMap<Key, Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(key(p, cell)).or_default().push(i as u32);
        }
        Self {
            points,
            cell,
            cells,
        }
    }

    /// Grid with cell size twice the mean nearest-neighbor spacing.
    pub fn with_auto_cell(points: &'a [Vector3<f64>]) -> Self {
        let spacing = mean_spacing(points);
        Self::new(points, 2.0 * spacing)
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    /// The `k` nearest points to `q` (including a point at `q` itself if any),
    /// ordered by distance, ties broken by index.
    pub fn knn(&self, q: &Vector3<f64>, k: usize) -> Vec<(u32, f64)> {
        let mut best: Vec<(u32, f64)> = Vec::with_capacity(k + 1);
        if k == 0 || self.points.is_empty() {
            return best;
        }
        let c = key(q, self.cell);
        let k = k.min(self.points.len());
        let mut ring = 0i32;
        loop {
            self.visit_ring(c, ring, |i| {
                let d2 = (self.points[i as usize] - q).norm_squared();
                if best.len() < k || less(&(i, d2), best.last().unwrap()) {
                    let pos = best.partition_point(|e| less(e, &(i, d2)));
                    best.insert(pos, (i, d2));
                    best.truncate(k);
                }
            });
            if best.len() == k {
                let reach = ring as f64 * self.cell;
                if best[k - 1].1 <= reach * reach {
                    break;
                }
            }
            ring += 1;
            let side = (2 * ring as i64 + 1).pow(3);
            if side > 8 * self.cells.len() as i64 {
                // sparse grid: a linear scan is cheaper than more rings
                best.clear();
                for (i, p) in self.points.iter().enumerate() {
                    let e = (i as u32, (p - q).norm_squared());
                    if best.len() < k || less(&e, best.last().unwrap()) {
                        let pos = best.partition_point(|b| less(b, &e));
                        best.insert(pos, e);
                        best.truncate(k);
                    }
                }
                break;
            }
        }
        best.into_iter().map(|(i, d2)| (i, d2.sqrt())).collect()
    }

    /// Indices of all points within `radius` of `q`, ascending.
    pub fn radius(&self, q: &Vector3<f64>, radius: f64) -> Vec<u32> {
        let c = key(q, self.cell);
        let reach = (radius / self.cell).ceil() as i32;
        let r2 = radius * radius;
        let mut out = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(v) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                        out.extend(
                            v.iter()
                                .copied()
                                .filter(|&i| (self.points[i as usize] - q).norm_squared() <= r2),
                        );
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    fn visit_ring(&self, c: Key, r: i32, mut f: impl FnMut(u32)) {
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                        continue;
                    }
                    if let Some(v) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                        v.iter().for_each(|&i| f(i));
                    }
                }
            }
        }
    }
}

#[inline]
fn less(a: &(u32, f64), b: &(u32, f64)) -> bool {
    a.1 < b.1 || (a.1 == b.1 && a.0 < b.0)
}

#[inline]
fn key(p: &Vector3<f64>, cell: f64) -> Key {
    (
        (p.x / cell).floor() as i32,
        (p.y / cell).floor() as i32,
        (p.z / cell).floor() as i32,
    )
}

/// Mean nearest-neighbor distance estimated on a deterministic subsample.
pub fn mean_spacing(points: &[Vector3<f64>]) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let (mut lo, mut hi) = (points[0], points[0]);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let ext = hi - lo;
    // surface-like clouds: spread points over the two largest extents
    let mut e = [ext.x, ext.y, ext.z];
    e.sort_by(|a, b| b.total_cmp(a));
    let area = (e[0] * e[1]).max(e[0] * e[0] * 1e-6).max(1e-12);
    let guess = (area / points.len() as f64).sqrt().max(1e-6);
    let coarse = VoxelGrid::new(points, guess * 4.0);
    let step = (points.len() / 1000).max(1);
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in points.iter().step_by(step) {
        let nn = coarse.knn(p, 2);
        if nn.len() == 2 && nn[1].1 > 0.0 {
            sum += nn[1].1;
            n += 1;
        }
    }
    if n == 0 {
        guess
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<_> = (0..2000)
            .map(|_| Vector3::new(rng.gen_range(0.0..2.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.5)))
            .collect();
        let grid = VoxelGrid::with_auto_cell(&pts);
        for q in pts.iter().take(50) {
            let got: Vec<u32> = grid.knn(q, 12).into_iter().map(|e| e.0).collect();
            let mut all: Vec<(u32, f64)> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i as u32, (p - q).norm_squared()))
                .collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let want: Vec<u32> = all[..12].iter().map(|e| e.0).collect();
            assert_eq!(got, want);
            let r = grid.radius(q, 0.1);
            let mut brute: Vec<u32> = all.iter().filter(|e| e.1 <= 0.01).map(|e| e.0).collect();
            brute.sort_unstable();
            assert_eq!(r, brute);
        }
    }
}
