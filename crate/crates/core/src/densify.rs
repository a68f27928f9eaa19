//! Densification: gradient-driven clone/split plus the sparsity-compensation
//! split of surfels that cover a large screen area in a sparsely populated voxel.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;
use crate::render::RenderOutput;
use crate::surfel::{Surfel, SurfelCloud, SurfelId};

/// Statistics accumulated between two densification steps, aligned with the
/// storage order of the cloud they were created for.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyStats {
    pub ids: Vec<SurfelId>,
    pub contrib_area: Vec<u64>,
    pub voxel_density: Vec<u32>,
    grad_sum: Vec<f64>,
    grad_count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(cloud: &SurfelCloud) -> Self {
        let n = cloud.len();
        DensifyStats {
            ids: cloud.ids.clone(),
            contrib_area: vec![0; n],
            voxel_density: vec![0; n],
            grad_sum: vec![0.0; n],
            grad_count: vec![0; n],
        }
    }

    /// Adds one render's contribution areas and the positional gradient of
    /// every surfel visible in it.
    pub fn accumulate(&mut self, out: &RenderOutput, center_grads: &[Vec3]) {
        for i in 0..self.ids.len() {
            self.contrib_area[i] += out.contrib_area[i] as u64;
            if out.visible[i] {
                self.grad_sum[i] += center_grads[i].norm();
                self.grad_count[i] += 1;
            }
        }
    }

    /// Running mean of the positional gradient magnitude.
    pub fn pos_grad_norm(&self, i: usize) -> f64 {
        if self.grad_count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.grad_count[i] as f64
        }
    }

    pub fn set_pos_grad(&mut self, i: usize, mean: f64, count: u32) {
        self.grad_sum[i] = mean * count as f64;
        self.grad_count[i] = count;
    }

    pub fn is_aligned_with(&self, cloud: &SurfelCloud) -> bool {
        self.ids == cloud.ids
    }
}

fn voxel_key(p: &Vec3, size: f64) -> [i64; 3] {
    [
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    ]
}

/// Number of surfel centers sharing each surfel's voxel (itself included),
/// in storage order.
pub fn voxel_density(cloud: &SurfelCloud, voxel_size: f64) -> Vec<u32> {
    assert!(voxel_size > 0.0, "voxel size must be positive");
    let keys: Vec<[i64; 3]> = cloud.surfels.iter().map(|s| voxel_key(&s.center, voxel_size)).collect();
    let mut counts: HashMap<[i64; 3], u32> = HashMap::new();
    for k in &keys {
        *counts.entry(*k).or_default() += 1;
    }
    keys.iter().map(|k| counts[k]).collect()
}

/// Ids with `S_i > S_th` and `V_i < V_th`, ascending.
pub fn select_sparsity_split(stats: &DensifyStats, s_th: u64, v_th: u32) -> Vec<SurfelId> {
    let mut out: Vec<SurfelId> = (0..stats.ids.len())
        .filter(|&i| stats.contrib_area[i] > s_th && stats.voxel_density[i] < v_th)
        .map(|i| stats.ids[i])
        .collect();
    out.sort_unstable();
    out
}

pub const SPLIT_SHRINK: f64 = 1.6;

/// Two children offset by ±½·s_max along the longer tangent (tangent_u on ties).
pub fn split_surfel(s: &Surfel) -> [Surfel; 2] {
    let axis = if s.scales[0] >= s.scales[1] {
        s.tangent_u
    } else {
        s.tangent_v
    };
    let offset = axis * (0.5 * s.max_scale());
    let scales = [s.scales[0] / SPLIT_SHRINK, s.scales[1] / SPLIT_SHRINK];
    let child = |c: Vec3| Surfel {
        center: c,
        scales,
        ..*s
    };
    [child(s.center + offset), child(s.center - offset)]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Mean positional-gradient magnitude above which a surfel is densified.
    pub grad_threshold: f64,
    /// Surfels with `s_max ≤ percent_dense · extent` are cloned, larger ones split.
    pub percent_dense: f64,
    pub s_th: u64,
    pub v_th: u32,
    pub voxel_size: f64,
    /// Hard cap on the cloud size; candidates beyond it are skipped.
    pub max_surfels: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            s_th: 20,
            v_th: 10,
            voxel_size: 0.1,
            max_surfels: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensifyOutcome {
    pub cloud: SurfelCloud,
    /// For each new storage slot, the old slot it continues (`None` for new surfels).
    pub origin: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
}

/// One densification step. Untouched surfels keep their ids and relative
/// order; clones and split children are appended with fresh ids.
pub fn densify_step(
    cloud: &SurfelCloud,
    stats: &DensifyStats,
    cfg: &DensifyConfig,
    scene_extent: f64,
) -> DensifyOutcome {
    assert!(stats.is_aligned_with(cloud), "densify stats out of sync with the cloud");
    let index = cloud.index_map();
    let sparse: BTreeSet<usize> = select_sparsity_split(stats, cfg.s_th, cfg.v_th)
        .iter()
        .map(|id| index[id])
        .collect();
    let mut by_grad: Vec<(f64, usize)> = (0..cloud.len())
        .map(|i| (stats.pos_grad_norm(i), i))
        .filter(|(g, i)| *g > cfg.grad_threshold && !sparse.contains(i))
        .collect();
    by_grad.sort_by(|a, b| b.0.total_cmp(&a.0).then(cloud.ids[a.1].cmp(&cloud.ids[b.1])));

    let small = cfg.percent_dense * scene_extent;
    let mut budget = cfg.max_surfels.saturating_sub(cloud.len());
    let mut split = BTreeSet::new();
    let mut clone = BTreeSet::new();
    for &i in &sparse {
        if budget == 0 {
            break;
        }
        split.insert(i);
        budget -= 1;
    }
    for &(_, i) in &by_grad {
        if budget == 0 {
            break;
        }
        if cloud.surfels[i].max_scale() <= small {
            clone.insert(i);
        } else {
            split.insert(i);
        }
        budget -= 1;
    }

    let mut origin = Vec::new();
    let mut kept_ids = Vec::new();
    let mut kept = Vec::new();
    for i in 0..cloud.len() {
        if !split.contains(&i) {
            kept.push(cloud.surfels[i]);
            kept_ids.push(cloud.ids[i]);
            origin.push(Some(i));
        }
    }
    let mut out = SurfelCloud::with_ids(kept, kept_ids).expect("ids stay unique");
    out.reserve_ids(cloud.next_id());
    // new surfels in ascending parent id order
    let mut parents: Vec<usize> = split.iter().chain(clone.iter()).copied().collect();
    parents.sort_by_key(|&i| cloud.ids[i]);
    for i in parents {
        if split.contains(&i) {
            for c in split_surfel(&cloud.surfels[i]) {
                out.push(c);
                origin.push(None);
            }
        } else {
            out.push(cloud.surfels[i]);
            origin.push(None);
        }
    }
    DensifyOutcome {
        cloud: out,
        origin,
        cloned: clone.len(),
        split: split.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn at(p: [f64; 3]) -> Surfel {
        Surfel::oriented(Vec3::from(p), Vec3::z(), [0.05, 0.05], 0.5, [0.5; 3])
    }

    #[test]
    fn voxel_counting() {
        let c = SurfelCloud::new(vec![
            at([0.01, 0.02, 0.03]),
            at([0.05, 0.05, 0.05]),
            at([0.09, 0.01, 0.0]),
        ]);
        assert_eq!(voxel_density(&c, 0.1), vec![3, 3, 3]);
        let c = SurfelCloud::new(vec![at([0.05, 0.0, 0.0]), at([0.15, 0.0, 0.0])]);
        assert_eq!(voxel_density(&c, 0.1), vec![1, 1]);
    }

    #[test]
    fn voxel_density_matches_pairwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = SurfelCloud::new(
            (0..1000)
                .map(|_| {
                    at([
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-0.2..0.2),
                    ])
                })
                .collect(),
        );
        let fast = voxel_density(&c, 0.25);
        for i in 0..c.len() {
            let ki = voxel_key(&c.surfels[i].center, 0.25);
            let brute = c.surfels.iter().filter(|s| voxel_key(&s.center, 0.25) == ki).count();
            assert_eq!(fast[i] as usize, brute);
        }
    }

    fn stats(s: &[u64], v: &[u32]) -> DensifyStats {
        let c = SurfelCloud::new(vec![at([0.0; 3]); s.len()]);
        let mut st = DensifyStats::new(&c);
        st.contrib_area = s.to_vec();
        st.voxel_density = v.to_vec();
        st
    }

    #[test]
    fn sparsity_selection() {
        assert_eq!(
            select_sparsity_split(&stats(&[25, 25, 5], &[5, 15, 5]), 20, 10),
            vec![0]
        );
        assert!(select_sparsity_split(&stats(&[5, 20, 1], &[1, 1, 1]), 20, 10).is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: Vec<u64> = (0..10_000).map(|_| rng.random_range(0..50)).collect();
        let v: Vec<u32> = (0..10_000).map(|_| rng.random_range(1..30)).collect();
        let st = stats(&s, &v);
        let brute: Vec<u32> = (0..10_000u32)
            .filter(|&i| s[i as usize] > 20 && v[i as usize] < 10)
            .collect();
        assert_eq!(select_sparsity_split(&st, 20, 10), brute);
        // monotone in both thresholds
        assert!(select_sparsity_split(&st, 30, 10).len() <= brute.len());
        assert!(select_sparsity_split(&st, 20, 5).len() <= brute.len());
    }

    #[test]
    fn split_geometry() {
        let mut s = at([1.0, 2.0, 3.0]);
        s.scales = [0.4, 0.1];
        let [a, b] = split_surfel(&s);
        assert!((a.center - (s.center + s.tangent_u * 0.2)).norm() < 1e-15);
        assert!((b.center - (s.center - s.tangent_u * 0.2)).norm() < 1e-15);
        assert_eq!(a.scales, [0.25, 0.0625]);
        assert!(a.is_valid() && b.is_valid());
        assert_eq!(a.opacity, s.opacity);
        let tie = split_surfel(&at([0.0; 3]));
        assert!((tie[0].center - at([0.0; 3]).tangent_u * 0.025).norm() < 1e-15);
    }

    #[test]
    fn densify_counts_and_idempotence() {
        let cloud = SurfelCloud::new(vec![at([0.0; 3]), at([1.0, 0.0, 0.0]), at([2.0, 0.0, 0.0])]);
        let st = DensifyStats::new(&cloud);
        let cfg = DensifyConfig::default();
        let same = densify_step(&cloud, &st, &cfg, 1.0);
        assert_eq!(same.cloud, cloud);
        assert_eq!(
            densify_step(&same.cloud, &DensifyStats::new(&same.cloud), &cfg, 1.0).cloud,
            cloud
        );

        let mut st = DensifyStats::new(&cloud);
        st.contrib_area[1] = 50;
        st.voxel_density[1] = 1;
        st.voxel_density[0] = 1;
        let out = densify_step(&cloud, &st, &cfg, 1.0);
        assert_eq!(out.cloud.len(), 4);
        assert_eq!(out.cloud.ids, vec![0, 2, 3, 4]);
        assert_eq!(out.origin, vec![Some(0), Some(2), None, None]);
        assert!(out.cloud.validate().is_ok());
    }

    #[test]
    fn gradient_clone_versus_split() {
        let mut big = at([0.0; 3]);
        big.scales = [0.3, 0.1];
        let cloud = SurfelCloud::new(vec![at([1.0, 0.0, 0.0]), big]);
        let mut st = DensifyStats::new(&cloud);
        st.set_pos_grad(0, 1.0, 1);
        st.set_pos_grad(1, 1.0, 1);
        let out = densify_step(&cloud, &st, &DensifyConfig::default(), 10.0);
        assert_eq!((out.cloned, out.split), (1, 1));
        assert_eq!(out.cloud.len(), 4);
        assert_eq!(out.cloud.ids, vec![0, 2, 3, 4]);
        assert_eq!(out.cloud.surfels[1], cloud.surfels[0]);
    }
}
