//! Uniform hash grid for nearest-neighbor queries over point sets.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::geometry::Vec3;

type Cell = (i64, i64, i64);

#[derive(Debug, Clone)]
pub struct PointGrid {
    cell: f64,
    points: Vec<Vec3>,
    cells: HashMap<Cell, Vec<usize>>,
    lo: Cell,
    hi: Cell,
}

impl PointGrid {
    /// Buckets `points` into cubes of side `cell` (must be positive).
    pub fn new(points: Vec<Vec3>, cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        let mut lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let c = key(p, cell);
            lo = (lo.0.min(c.0), lo.1.min(c.1), lo.2.min(c.2));
            hi = (hi.0.max(c.0), hi.1.max(c.1), hi.2.max(c.2));
            cells.entry(c).or_default().push(i);
        }
        PointGrid {
            cell,
            points,
            cells,
            lo,
            hi,
        }
    }

    /// Grid whose cell holds a handful of points on average.
    pub fn auto(points: Vec<Vec3>) -> Self {
        let cell = auto_cell(&points);
        Self::new(points, cell)
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn max_ring(&self, c: Cell) -> i64 {
        let span = |a: i64, lo: i64, hi: i64| (a - lo).abs().max((hi - a).abs());
        span(c.0, self.lo.0, self.hi.0)
            .max(span(c.1, self.lo.1, self.hi.1))
            .max(span(c.2, self.lo.2, self.hi.2))
    }

    fn visit_ring(&self, c: Cell, r: i64, mut f: impl FnMut(usize)) {
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                        continue;
                    }
                    if let Some(ids) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                        ids.iter().for_each(|&i| f(i));
                    }
                }
            }
        }
    }

    /// The `k` nearest points as `(index, distance)`, closest first; ties
    /// are broken by index.
    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let c = key(q, self.cell);
        let last = self.max_ring(c);
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        let mut r = 0;
        loop {
            self.visit_ring(c, r, |i| {
                let d = (self.points[i] - q).norm();
                best.push((i, d));
            });
            best.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            best.truncate(k);
            // any point in ring r + 1 lies at least r cells away
            if (best.len() == k && best[k - 1].1 < r as f64 * self.cell) || r >= last {
                return best;
            }
            r += 1;
        }
    }

    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        self.knn(q, 1).into_iter().next()
    }

    /// True if some point lies within `radius` of `q`.
    pub fn any_within(&self, q: &Vec3, radius: f64) -> bool {
        let c = key(q, self.cell);
        let reach = (radius / self.cell).ceil() as i64;
        for r in 0..=reach.min(self.max_ring(c)) {
            let mut hit = false;
            self.visit_ring(c, r, |i| hit |= (self.points[i] - q).norm() <= radius);
            if hit {
                return true;
            }
        }
        false
    }
}

fn key(p: &Vec3, cell: f64) -> Cell {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

fn auto_cell(points: &[Vec3]) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let size = hi - lo;
    let longest = size.max();
    if !(longest > 0.0) {
        return 1.0;
    }
    // treat the set as a surface: cells of ~4 points each
    let area = (size.x * size.y + size.y * size.z + size.x * size.z).max(longest * longest * 1e-3);
    (4.0 * area / points.len() as f64).sqrt().max(longest * 1e-4)
}

/// Unit normal (smallest principal axis of the `k` nearest neighbors) and
/// the mean neighbor distance, per point.
pub fn pca_normals(grid: &PointGrid, k: usize) -> Vec<(Vec3, f64)> {
    let pts = grid.points();
    pts.par_iter()
        .enumerate()
        .map(|(i, p)| {
            let nn: Vec<(usize, f64)> = grid
                .knn(p, k + 1)
                .into_iter()
                .filter(|(j, _)| *j != i)
                .take(k)
                .collect();
            if nn.len() < 3 {
                let mean = if nn.is_empty() {
                    0.0
                } else {
                    nn.iter().map(|n| n.1).sum::<f64>() / nn.len() as f64
                };
                return (Vec3::z(), mean);
            }
            let centroid = nn.iter().map(|(j, _)| pts[*j]).sum::<Vec3>() / nn.len() as f64;
            let mut cov = Matrix3::zeros();
            for (j, _) in &nn {
                let d = pts[*j] - centroid;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let mut idx = 0;
            for a in 1..3 {
                if eig.eigenvalues[a] < eig.eigenvalues[idx] {
                    idx = a;
                }
            }
            let n: Vec3 = eig.eigenvectors.column(idx).into();
            let mean = nn.iter().map(|n| n.1).sum::<f64>() / nn.len() as f64;
            (n.normalize(), mean)
        })
        .collect()
}
