//! Dense initialization: partition the image graph by normalized cut, order
//! views into connectivity batches, align per-view pointmaps to the SfM frame
//! with a closed-form similarity fit, and merge them into one cloud.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Rgb, Sim3, Vec3, ViewId};
use crate::io;
use crate::sfm::{SceneGraph, SparseScene};

/// Cluster assignment for every graph node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignment: BTreeMap<ViewId, usize>,
    pub clusters: usize,
}

impl Partition {
    pub fn members(&self, k: usize) -> Vec<ViewId> {
        self.assignment
            .iter()
            .filter(|(_, &c)| c == k)
            .map(|(v, _)| *v)
            .collect()
    }
}

/// `Σ_k Cut(A_k, Ā_k) / Vol(A_k)`.
pub fn ncut_value(graph: &SceneGraph, partition: &Partition) -> Result<f64> {
    let n = graph.len();
    let mut label = vec![usize::MAX; n];
    for (i, v) in graph.nodes.iter().enumerate() {
        label[i] = *partition.assignment.get(v).ok_or(Error::UnknownView(*v))?;
        if label[i] >= partition.clusters {
            return Err(Error::InvalidScene(format!(
                "view {v} assigned to cluster {} of {}",
                label[i], partition.clusters
            )));
        }
    }
    let mut cut = vec![0.0; partition.clusters];
    let mut vol = vec![0.0; partition.clusters];
    for i in 0..n {
        for j in 0..n {
            let w = graph.weight_at(i, j);
            vol[label[i]] += w;
            if label[i] != label[j] {
                cut[label[i]] += w;
            }
        }
    }
    let mut total = 0.0;
    for k in 0..partition.clusters {
        if vol[k] <= 0.0 {
            return Err(Error::ZeroVolumeCluster(k));
        }
        total += cut[k] / vol[k];
    }
    Ok(total)
}

/// Spectral relaxation of the normalized cut followed by k-means on the
/// row-normalized embedding.
pub fn partition_ncut(graph: &SceneGraph, clusters: usize) -> Result<Partition> {
    let n = graph.len();
    if clusters == 0 {
        return Err(Error::ConfigInvalid("cluster count must be ≥ 1".into()));
    }
    if n < clusters {
        return Err(Error::TooFewNodes { nodes: n, clusters });
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d = graph.degree_at(i);
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let lap = DMatrix::from_fn(n, n, |i, j| {
        let off = graph.weight_at(i, j) * inv_sqrt[i] * inv_sqrt[j];
        if i == j {
            1.0 - off
        } else {
            -off
        }
    });
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let mut embed: Vec<Vec<f64>> = (0..n)
        .map(|i| order[..clusters].iter().map(|&c| eig.eigenvectors[(i, c)]).collect())
        .collect();
    for row in &mut embed {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-300 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let labels = kmeans_farthest_point(&embed, clusters);
    Ok(Partition {
        assignment: graph.nodes.iter().copied().zip(labels).collect(),
        clusters,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations seeded deterministically: first seed is point 0, each
/// further seed is the point farthest from the chosen ones.
fn kmeans_farthest_point(points: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = points.len();
    let mut seeds = vec![0usize];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[0])).collect();
    while seeds.len() < k {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        seeds.push(best);
        for i in 0..n {
            nearest[i] = nearest[i].min(sq_dist(&points[i], &points[best]));
        }
    }
    let mut centroids: Vec<Vec<f64>> = seeds.iter().map(|&s| points[s].clone()).collect();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cen) in centroids.iter().enumerate() {
                let d = sq_dist(&points[i], cen);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        fill_empty_clusters(points, &mut labels, k, &centroids);
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for d in 0..dim {
                sums[labels[i]][d] += points[i][d];
            }
        }
        for c in 0..k {
            for d in 0..dim {
                centroids[c][d] = sums[c][d] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

fn fill_empty_clusters(points: &[Vec<f64>], labels: &mut [usize], k: usize, centroids: &[Vec<f64>]) {
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        // farthest member (from its centroid) of any cluster with spare members
        let mut pick: Option<(f64, usize)> = None;
        for (i, &l) in labels.iter().enumerate() {
            if counts[l] < 2 {
                continue;
            }
            let d = sq_dist(&points[i], &centroids[l]);
            if pick.is_none_or(|(bd, _)| d > bd) {
                pick = Some((d, i));
            }
        }
        match pick {
            Some((_, i)) => labels[i] = empty,
            None => return,
        }
    }
}

/// Greedy connectivity ordering of `cluster`, chunked into batches.
pub fn order_batches(graph: &SceneGraph, cluster: &[ViewId], batch_size: usize) -> Result<Vec<Vec<ViewId>>> {
    if batch_size == 0 {
        return Err(Error::ConfigInvalid("batch size must be ≥ 1".into()));
    }
    let mut nodes: Vec<ViewId> = cluster.to_vec();
    nodes.sort();
    nodes.dedup();
    let idx: Vec<usize> = nodes
        .iter()
        .map(|v| graph.index_of(*v).ok_or(Error::UnknownView(*v)))
        .collect::<Result<_>>()?;
    let m = nodes.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let inner = |a: usize, b: usize| graph.weight_at(idx[a], idx[b]);
    let mut start = 0;
    let mut best_deg = f64::NEG_INFINITY;
    for a in 0..m {
        let d: f64 = (0..m).filter(|&b| b != a).map(|b| inner(a, b)).sum();
        if d > best_deg {
            best_deg = d;
            start = a;
        }
    }
    let mut visited = vec![false; m];
    let mut link = vec![0.0; m];
    let mut order = Vec::with_capacity(m);
    let mut cur = start;
    loop {
        visited[cur] = true;
        order.push(nodes[cur]);
        for b in 0..m {
            if !visited[b] {
                link[b] += inner(cur, b);
            }
        }
        let mut next: Option<usize> = None;
        for b in 0..m {
            if !visited[b] && next.is_none_or(|n| link[b] > link[n]) {
                next = Some(b);
            }
        }
        match next {
            Some(b) => cur = b,
            None => break,
        }
    }
    Ok(order.chunks(batch_size).map(<[ViewId]>::to_vec).collect())
}

/// Least-squares similarity `target ≈ s R source + t` (closed-form Umeyama).
pub fn estimate_sim3(source: &[Vec3], target: &[Vec3]) -> Result<Sim3> {
    if source.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} source vs {} target points",
            source.len(),
            target.len()
        )));
    }
    let n = source.len();
    if n < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "need at least 3 correspondences, got {n}"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mu_x = source.iter().sum::<Vec3>() * inv_n;
    let mu_y = target.iter().sum::<Vec3>() * inv_n;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in source.iter().zip(target) {
        let dx = x - mu_x;
        cov += (y - mu_y) * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov *= inv_n;
    var_x *= inv_n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv = svd.singular_values;
    // nalgebra does not guarantee ordering
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if var_x <= 0.0 || sorted[0] <= 0.0 || sorted[1] <= 1e-12 * sorted[0] {
        return Err(Error::DegenerateConfiguration(
            "correspondence covariance is rank-deficient (collinear points)".into(),
        ));
    }
    let mut s_mat = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        // flip the axis with the smallest singular value
        let (min_i, _) = sv.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        s_mat[(min_i, min_i)] = -1.0;
        sv[min_i] = -sv[min_i];
    }
    let rotation = u * s_mat * vt;
    let scale = sv.sum() / var_x;
    let translation = mu_y - scale * (rotation * mu_x);
    Sim3::new(scale, rotation, translation)
}

/// Per-pixel 3D prediction for one view, in the predictor's own frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointmap {
    pub view_id: ViewId,
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vec3>,
    pub valid: Vec<bool>,
}

impl Pointmap {
    pub fn at(&self, x: usize, y: usize) -> Option<Vec3> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.points[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Reads `<dir>/<view>.pfm` (3-channel) and the `<view>.mask.pgm` sidecar
    /// when present; without a sidecar, finite points are valid.
    pub fn load(dir: &Path, view_id: ViewId) -> Result<Self> {
        let pfm = io::read_pfm(&dir.join(format!("{}.pfm", view_id.0)))?;
        if pfm.channels != 3 {
            return Err(Error::format("PFM", "pointmaps need 3 channels"));
        }
        let points: Vec<Vec3> = pfm
            .data
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64))
            .collect();
        let mask_path = dir.join(format!("{}.mask.pgm", view_id.0));
        let valid: Vec<bool> = if mask_path.exists() {
            let mask = io::read_pgm(&mask_path)?;
            if mask.width != pfm.width || mask.height != pfm.height {
                return Err(Error::ShapeMismatch("pointmap mask resolution".into()));
            }
            mask.data
                .iter()
                .zip(&points)
                .map(|(&m, p)| m > 127 && p.iter().all(|v| v.is_finite()))
                .collect()
        } else {
            points.iter().map(|p| p.iter().all(|v| v.is_finite())).collect()
        };
        Ok(Pointmap {
            view_id,
            width: pfm.width,
            height: pfm.height,
            points,
            valid,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let pfm = io::Pfm {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self
                .points
                .iter()
                .flat_map(|p| [p.x as f32, p.y as f32, p.z as f32])
                .collect(),
        };
        io::write_pfm(&dir.join(format!("{}.pfm", self.view_id.0)), &pfm)?;
        io::mask_to_pgm(
            &dir.join(format!("{}.mask.pgm", self.view_id.0)),
            self.width,
            self.height,
            &self.valid,
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct MergedCloud {
    pub positions: Vec<Vec3>,
    pub colors: Vec<Rgb>,
    /// Fitted pointmap-to-SfM transform per view.
    pub transforms: Vec<(ViewId, Sim3)>,
}

fn fit_with_trim(source: &[Vec3], target: &[Vec3]) -> Result<Sim3> {
    let first = estimate_sim3(source, target)?;
    let residuals: Vec<f64> = source
        .iter()
        .zip(target)
        .map(|(x, y)| (first.apply(x) - y).norm())
        .collect();
    let mut sorted = residuals.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let keep: Vec<usize> = (0..residuals.len()).filter(|&i| residuals[i] <= 3.0 * median).collect();
    if keep.len() == residuals.len() || keep.len() < 3 {
        return Ok(first);
    }
    let src: Vec<Vec3> = keep.iter().map(|&i| source[i]).collect();
    let dst: Vec<Vec3> = keep.iter().map(|&i| target[i]).collect();
    estimate_sim3(&src, &dst).or(Ok(first))
}

fn align_one(pm: &Pointmap, scene: &SparseScene, stride: usize) -> Result<(Sim3, Vec<Vec3>, Vec<Rgb>)> {
    let cam = scene.camera(pm.view_id).ok_or(Error::UnknownView(pm.view_id))?;
    if cam.width != pm.width || cam.height != pm.height {
        return Err(Error::ShapeMismatch(format!(
            "pointmap {} is {}x{}, view is {}x{}",
            pm.view_id, pm.width, pm.height, cam.width, cam.height
        )));
    }
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for obs in scene.tracks.get(&pm.view_id).map(Vec::as_slice).unwrap_or(&[]) {
        let Some(point) = scene.point(obs.point_id) else {
            continue;
        };
        let (x, y) = (obs.pixel.x.round(), obs.pixel.y.round());
        if x < 0.0 || y < 0.0 || x >= pm.width as f64 || y >= pm.height as f64 {
            continue;
        }
        if let Some(p) = pm.at(x as usize, y as usize) {
            src.push(p);
            dst.push(point.position);
        }
    }
    let sim = fit_with_trim(&src, &dst)?;
    let image = cam.image();
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut k = 0usize;
    for (i, p) in pm.points.iter().enumerate() {
        if !pm.valid[i] {
            continue;
        }
        if k.is_multiple_of(stride) {
            positions.push(sim.apply(p));
            colors.push(image.map(|img| img.data[i]).unwrap_or([0.5; 3]));
        }
        k += 1;
    }
    Ok((sim, positions, colors))
}

/// Aligns every pointmap to the SfM frame through its track correspondences
/// and concatenates the stride-subsampled valid points by ascending view id.
pub fn align_and_merge(pointmaps: &[Pointmap], scene: &SparseScene, sample_rate: f64) -> Result<MergedCloud> {
    if !(sample_rate > 0.0 && sample_rate <= 1.0) {
        return Err(Error::ConfigInvalid(format!(
            "sample rate must lie in (0, 1], got {sample_rate}"
        )));
    }
    let stride = ((1.0 / sample_rate).round() as usize).max(1);
    let mut sorted: Vec<&Pointmap> = pointmaps.iter().collect();
    sorted.sort_by_key(|p| p.view_id);
    let parts: Vec<_> = sorted
        .par_iter()
        .map(|pm| align_one(pm, scene, stride))
        .collect::<Result<_>>()?;
    let mut out = MergedCloud::default();
    for (pm, (sim, pos, col)) in sorted.iter().zip(parts) {
        out.transforms.push((pm.view_id, sim));
        out.positions.extend(pos);
        out.colors.extend(col);
    }
    if out.positions.is_empty() {
        return Err(Error::EmptyResult);
    }
    Ok(out)
}

/// Pixel of `view` whose pointmap entry pairs with each SfM track point.
pub fn track_pixels(scene: &SparseScene, view: ViewId) -> Vec<Vector2<f64>> {
    scene
        .tracks
        .get(&view)
        .map(|t| t.iter().map(|o| o.pixel).collect())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(i: u32) -> ViewId {
        ViewId(i)
    }

    fn chain() -> SceneGraph {
        SceneGraph::from_edges(
            vec![v(0), v(1), v(2), v(3)],
            &[(v(0), v(1), 10.0), (v(2), v(3), 10.0), (v(1), v(2), 1.0)],
        )
        .unwrap()
    }

    fn part(pairs: &[(u32, usize)], k: usize) -> Partition {
        Partition {
            assignment: pairs.iter().map(|&(a, c)| (v(a), c)).collect(),
            clusters: k,
        }
    }

    #[test]
    fn ncut_hand_example() {
        let value = ncut_value(&chain(), &part(&[(0, 0), (1, 0), (2, 1), (3, 1)], 2)).unwrap();
        assert!((value - 2.0 / 21.0).abs() < 1e-15);
        // relabeling clusters
        let relabeled = ncut_value(&chain(), &part(&[(0, 1), (1, 1), (2, 0), (3, 0)], 2)).unwrap();
        assert_eq!(value, relabeled);
        let single = ncut_value(&chain(), &part(&[(0, 0), (1, 0), (2, 0), (3, 0)], 1)).unwrap();
        assert_eq!(single, 0.0);
    }

    #[test]
    fn ncut_zero_volume() {
        let g = SceneGraph::from_edges(vec![v(0), v(1), v(2)], &[(v(0), v(1), 1.0)]).unwrap();
        assert!(matches!(
            ncut_value(&g, &part(&[(0, 0), (1, 0), (2, 1)], 2)),
            Err(Error::ZeroVolumeCluster(1))
        ));
    }

    fn two_cliques() -> SceneGraph {
        let nodes: Vec<ViewId> = (0..10).map(v).collect();
        let mut edges = Vec::new();
        for base in [0, 5] {
            for a in base..base + 5 {
                for b in a + 1..base + 5 {
                    edges.push((v(a), v(b), 1.0));
                }
            }
        }
        SceneGraph::from_edges(nodes, &edges).unwrap()
    }

    #[test]
    fn disconnected_cliques_split_exactly() {
        let g = two_cliques();
        let p = partition_ncut(&g, 2).unwrap();
        assert_eq!(ncut_value(&g, &p).unwrap(), 0.0);
        let c0 = p.assignment[&v(0)];
        for i in 0..5 {
            assert_eq!(p.assignment[&v(i)], c0);
            assert_ne!(p.assignment[&v(i + 5)], c0);
        }
    }

    #[test]
    fn one_cluster_per_node() {
        let g = two_cliques();
        let p = partition_ncut(&g, 10).unwrap();
        let mut seen: Vec<usize> = p.assignment.values().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert!(matches!(partition_ncut(&g, 11), Err(Error::TooFewNodes { .. })));
    }

    #[test]
    fn batches_follow_greedy_connectivity() {
        let g = SceneGraph::from_edges(
            vec![v(0), v(1), v(2), v(3)],
            &[(v(0), v(1), 1.0), (v(1), v(2), 1.0), (v(2), v(3), 1.0)],
        )
        .unwrap();
        let b = order_batches(&g, &[v(0), v(1), v(2), v(3)], 2).unwrap();
        assert_eq!(b, vec![vec![v(1), v(0)], vec![v(2), v(3)]]);
        assert_eq!(order_batches(&g, &[v(2)], 3).unwrap(), vec![vec![v(2)]]);
        let mut edges = Vec::new();
        for a in 0..5 {
            for c in a + 1..5 {
                edges.push((v(a), v(c), 1.0));
            }
        }
        let k5 = SceneGraph::from_edges((0..5).map(v).collect(), &edges).unwrap();
        let b = order_batches(&k5, &[v(4), v(2), v(0), v(3), v(1)], 10).unwrap();
        assert_eq!(b, vec![(0..5).map(v).collect::<Vec<_>>()]);
    }

    #[test]
    fn sim3_identity_and_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..20)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let s = estimate_sim3(&pts, &pts).unwrap();
        assert!((s.scale - 1.0).abs() < 1e-12);
        assert!((s.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!(s.translation.amax() < 1e-12);
        assert!(matches!(
            estimate_sim3(&pts[..2], &pts[..2]),
            Err(Error::DegenerateConfiguration(_))
        ));
        let line: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(
            estimate_sim3(&line, &line),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn sim3_recovers_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src: Vec<Vec3> = (0..50)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let rz = exp_so3(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let t = Vec3::new(1.0, 0.0, 0.0);
        let dst: Vec<Vec3> = src.iter().map(|p| 2.0 * rz * p + t).collect();
        let s = estimate_sim3(&src, &dst).unwrap();
        assert!((s.scale - 2.0).abs() < 1e-9);
        assert!((s.rotation - rz).amax() < 1e-9);
        assert!((s.translation - t).amax() < 1e-9);
    }

    #[test]
    fn sim3_residual_invariant_under_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src: Vec<Vec3> = (0..40)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let dst: Vec<Vec3> = src
            .iter()
            .map(|p| 1.5 * p + Vec3::new(rng.random::<f64>() * 0.1, 0.0, rng.random::<f64>() * 0.1))
            .collect();
        let residual = |a: &[Vec3], b: &[Vec3]| {
            let s = estimate_sim3(a, b).unwrap();
            a.iter()
                .zip(b)
                .map(|(x, y)| (s.apply(x) - y).norm_squared())
                .sum::<f64>()
        };
        let base = residual(&src, &dst);
        let r = exp_so3(&Vec3::new(0.3, -1.2, 0.7));
        let t = Vec3::new(4.0, -2.0, 1.0);
        let move_all = |pts: &[Vec3]| pts.iter().map(|p| r * p + t).collect::<Vec<_>>();
        let moved = residual(&move_all(&src), &move_all(&dst));
        assert!((base - moved).abs() < 1e-9);
    }
}
