//! Multi-view depth refinement for the second training stage: PatchMatch on
//! rendered depth, forward-backward consistency filtering, per-tile
//! restoration from the monocular prior, and the resulting depth loss.

use std::path::Path;

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_refine::{fit_affine, sign, DepthLoss, GeoLoss, LossWeights, NormalLoss};
use crate::geometry::{CameraView, DepthMap, Grid, Mat3, ScalarMap, Vec3};
use crate::io;
use crate::render::RenderGrads;

/// Plane through the point at `depth` on a pixel's ray; camera frame, `normal.z < 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneHypothesis {
    pub depth: f64,
    pub normal: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthSource {
    PatchMatch,
    Restored,
    Invalid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedDepth {
    pub depth: DepthMap,
    pub source: Vec<DepthSource>,
}

impl RefinedDepth {
    /// Every valid pixel tagged as a PatchMatch result.
    pub fn from_depth(depth: DepthMap) -> Self {
        let source = depth
            .valid
            .iter()
            .map(|&v| {
                if v {
                    DepthSource::PatchMatch
                } else {
                    DepthSource::Invalid
                }
            })
            .collect();
        RefinedDepth { depth, source }
    }

    pub fn is_consistent(&self) -> bool {
        self.depth
            .valid
            .iter()
            .zip(&self.source)
            .all(|(&v, &s)| v == (s != DepthSource::Invalid))
    }

    /// Writes `<stem>.pfm` and a `<stem>.source.pgm` tag map (0 invalid, 1 PatchMatch, 2 restored).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        io::write_depth(&dir.join(format!("{stem}.pfm")), &self.depth)?;
        let tags: Vec<u8> = self
            .source
            .iter()
            .map(|s| match s {
                DepthSource::Invalid => 0,
                DepthSource::PatchMatch => 1,
                DepthSource::Restored => 2,
            })
            .collect();
        io::write_pgm(
            &dir.join(format!("{stem}.source.pgm")),
            self.depth.width,
            self.depth.height,
            &tags,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchMatchConfig {
    /// Patch half-widths, applied in the given order (coarse to fine).
    pub scales: Vec<usize>,
    pub iters: usize,
    /// Initial multiplicative depth jitter; the range halves every round.
    pub depth_jitter: f64,
    /// Initial normal perturbation magnitude; halves every round.
    pub normal_jitter: f64,
    pub seed: u64,
}

impl Default for PatchMatchConfig {
    fn default() -> Self {
        PatchMatchConfig {
            scales: vec![5, 3, 2],
            iters: 3,
            depth_jitter: 0.1,
            normal_jitter: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatchResult {
    pub depth: DepthMap,
    /// Final matching cost; 2 (the maximum) where no hypothesis exists.
    pub cost: ScalarMap,
    /// True if no pixel's cost rose within any scale.
    pub monotone: bool,
}

/// Counter-based uniform in `[0, 1)` keyed by every index of the draw.
fn uniform(key: &[u64]) -> f64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &k in key {
        h = splitmix(h ^ k);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Neighbor {
    rotation: Mat3,
    translation: Vec3,
    cam: CameraView,
    gray: ScalarMap,
}

struct Matcher<'a> {
    reference: &'a CameraView,
    gray: ScalarMap,
    neighbors: Vec<Neighbor>,
}

impl Matcher<'_> {
    /// `1 − mean NCC` of the plane-induced warp; invalid or flat patches count as NCC 0.
    fn cost(&self, x: usize, y: usize, hyp: &PlaneHypothesis, half: usize) -> f64 {
        let r0 = self.reference.ray(x as f64, y as f64);
        let offset = hyp.normal.dot(&(r0 * hyp.depth));
        let (w, h) = (self.gray.width as i64, self.gray.height as i64);
        let half = half as i64;
        let total = ((2 * half + 1) * (2 * half + 1)) as usize;
        let mut ncc_sum = 0.0;
        let mut a = Vec::with_capacity(total);
        let mut b = Vec::with_capacity(total);
        for nb in &self.neighbors {
            a.clear();
            b.clear();
            for dy in -half..=half {
                let qy = y as i64 + dy;
                if qy < 0 || qy >= h {
                    continue;
                }
                for dx in -half..=half {
                    let qx = x as i64 + dx;
                    if qx < 0 || qx >= w {
                        continue;
                    }
                    let r = self.reference.ray(qx as f64, qy as f64);
                    let denom = hyp.normal.dot(&r);
                    if denom.abs() < 1e-12 {
                        continue;
                    }
                    let t = offset / denom;
                    if t <= 0.0 {
                        continue;
                    }
                    let p = nb.rotation * (r * t) + nb.translation;
                    let Ok((px, _)) = nb.cam.project_camera(&p) else {
                        continue;
                    };
                    if let Some(v) = nb.gray.sample(px.x, px.y) {
                        a.push(*self.gray.get(qx as usize, qy as usize));
                        b.push(v);
                    }
                }
            }
            if 2 * a.len() >= total {
                ncc_sum += ncc(&a, &b);
            }
        }
        1.0 - ncc_sum / self.neighbors.len() as f64
    }
}

/// Normalized cross-correlation; 0 when either patch has no variance.
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa <= 1e-12 || sbb <= 1e-12 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Depth at pixel `(x, y)` of the plane carried by `hyp` from pixel `from`.
fn transfer(
    cam: &CameraView,
    from: (usize, usize),
    hyp: &PlaneHypothesis,
    to: (usize, usize),
) -> Option<PlaneHypothesis> {
    let x0 = cam.ray(from.0 as f64, from.1 as f64) * hyp.depth;
    let r = cam.ray(to.0 as f64, to.1 as f64);
    let denom = hyp.normal.dot(&r);
    if denom >= -1e-6 {
        return None;
    }
    let depth = hyp.normal.dot(&x0) / denom;
    (depth > 0.0 && depth.is_finite()).then_some(PlaneHypothesis {
        depth,
        normal: hyp.normal,
    })
}

fn gray_of(cam: &CameraView) -> Result<ScalarMap> {
    cam.image()
        .map(|im| im.gray())
        .ok_or_else(|| Error::InvalidScene(format!("view {} has no image", cam.view_id)))
}

/// PatchMatch refinement of a rendered depth map against neighbor images.
pub fn patchmatch_refine(
    reference: &CameraView,
    ref_depth: &DepthMap,
    ref_normal: &Grid<[f64; 3]>,
    neighbors: &[CameraView],
    cfg: &PatchMatchConfig,
) -> Result<PatchMatchResult> {
    let (w, h) = (reference.width, reference.height);
    if ref_depth.width != w || ref_depth.height != h || ref_normal.width != w || ref_normal.height != h {
        return Err(Error::ShapeMismatch(
            "seed buffers do not match the reference view".into(),
        ));
    }
    if neighbors.is_empty() || cfg.scales.is_empty() {
        return Err(Error::ConfigInvalid(
            "PatchMatch needs neighbors and at least one scale".into(),
        ));
    }
    if ref_depth.valid_count() == 0 {
        return Err(Error::NoValidSeeds);
    }
    let ref_inv = reference.pose.inverse();
    let matcher = Matcher {
        reference,
        gray: gray_of(reference)?,
        neighbors: neighbors
            .iter()
            .map(|c| {
                let rel = c.pose.compose(&ref_inv);
                Ok(Neighbor {
                    rotation: rel.rotation,
                    translation: rel.translation,
                    cam: c.clone(),
                    gray: gray_of(c)?,
                })
            })
            .collect::<Result<_>>()?,
    };

    let mut state: Vec<Option<PlaneHypothesis>> = (0..w * h)
        .map(|i| {
            if !ref_depth.valid[i] {
                return None;
            }
            let (x, y) = (i % w, i / w);
            let r = reference.ray(x as f64, y as f64);
            let mut n = Vec3::from(ref_normal.data[i]);
            if !(n.norm() > 0.5) || n.dot(&r) >= -1e-6 {
                n = -Vec3::z();
            }
            Some(PlaneHypothesis {
                depth: ref_depth.values[i],
                normal: n.normalize(),
            })
        })
        .collect();
    let mut cost = vec![2.0; w * h];
    let mut monotone = true;
    let view_key = reference.view_id.0 as u64;

    for (scale_idx, &half) in cfg.scales.iter().enumerate() {
        let fresh: Vec<f64> = (0..w * h)
            .into_par_iter()
            .map(|i| state[i].map_or(2.0, |hyp| matcher.cost(i % w, i / w, &hyp, half)))
            .collect();
        cost = fresh;
        for round in 0..cfg.iters {
            let shrink = 0.5f64.powi(round as i32);
            for color in 0..2 {
                let updates: Vec<(usize, PlaneHypothesis, f64)> = (0..h)
                    .into_par_iter()
                    .flat_map_iter(|y| {
                        let state = &state;
                        let cost = &cost;
                        let matcher = &matcher;
                        (0..w).filter(move |x| (x + y) % 2 == color).filter_map(move |x| {
                            let i = y * w + x;
                            let current = state[i]?;
                            let mut best = (current, cost[i]);
                            let consider = |best: &mut (PlaneHypothesis, f64), cand: PlaneHypothesis| {
                                let c = matcher.cost(x, y, &cand, half);
                                if c < best.1 {
                                    *best = (cand, c);
                                }
                            };
                            let nbs = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
                            for (nx, ny) in nbs {
                                if nx >= w || ny >= h {
                                    continue;
                                }
                                if let Some(hyp) = state[ny * w + nx] {
                                    if let Some(c) = transfer(reference, (nx, ny), &hyp, (x, y)) {
                                        consider(&mut best, c);
                                    }
                                }
                            }
                            let r = reference.ray(x as f64, y as f64);
                            for cand in 0..3u64 {
                                let key = |k: u64| {
                                    uniform(&[cfg.seed, view_key, i as u64, scale_idx as u64, round as u64, cand, k])
                                };
                                let base = best.0;
                                let depth = if cand != 1 {
                                    base.depth * (1.0 + cfg.depth_jitter * shrink * (2.0 * key(0) - 1.0))
                                } else {
                                    base.depth
                                };
                                let normal = if cand != 0 {
                                    let j = Vec3::new(2.0 * key(1) - 1.0, 2.0 * key(2) - 1.0, 2.0 * key(3) - 1.0);
                                    (base.normal + j * (cfg.normal_jitter * shrink)).normalize()
                                } else {
                                    base.normal
                                };
                                if depth > 0.0 && normal.dot(&r) < -1e-6 {
                                    consider(&mut best, PlaneHypothesis { depth, normal });
                                }
                            }
                            (best.1 < cost[i]).then_some((i, best.0, best.1))
                        })
                    })
                    .collect();
                for (i, hyp, c) in updates {
                    if c > cost[i] {
                        monotone = false;
                    }
                    state[i] = Some(hyp);
                    cost[i] = c;
                }
            }
        }
    }

    let mut depth = DepthMap::invalid(w, h);
    for (i, s) in state.iter().enumerate() {
        if let Some(hyp) = s {
            depth.set(i % w, i / w, Some(hyp.depth));
        }
    }
    Ok(PatchMatchResult {
        depth,
        cost: Grid::from_vec(w, h, cost)?,
        monotone,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub px_tol: f64,
    pub rel_tol: f64,
    pub min_views: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            px_tol: 1.0,
            rel_tol: 0.01,
            min_views: 2,
        }
    }
}

/// Keeps pixels whose depth is confirmed by at least `min_views` neighbors
/// under forward-backward reprojection.
pub fn geometric_filter(
    reference: &CameraView,
    refined: &DepthMap,
    neighbors: &[(CameraView, DepthMap)],
    cfg: &FilterConfig,
) -> RefinedDepth {
    let (w, h) = (refined.width, refined.height);
    let keep: Vec<bool> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            if !refined.valid[i] || neighbors.is_empty() {
                return false;
            }
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let d = refined.values[i];
            let Ok(world) = reference.backproject(&Vector2::new(x, y), d) else {
                return false;
            };
            let agree = neighbors
                .iter()
                .filter(|(cam, depth)| {
                    let Ok((q, _)) = cam.project(&world) else {
                        return false;
                    };
                    let Some(dn) = depth.sample_inverse(q.x, q.y) else {
                        return false;
                    };
                    let Ok(back) = cam.backproject(&q, dn) else {
                        return false;
                    };
                    let Ok((p, z)) = reference.project(&back) else {
                        return false;
                    };
                    let err = ((p.x - x).powi(2) + (p.y - y).powi(2)).sqrt();
                    err <= cfg.px_tol && (z - d).abs() / d <= cfg.rel_tol
                })
                .count();
            agree >= cfg.min_views
        })
        .collect();
    let mut depth = refined.clone();
    for (i, k) in keep.iter().enumerate() {
        if !k {
            depth.values[i] = 0.0;
            depth.valid[i] = false;
        }
    }
    RefinedDepth::from_depth(depth)
}

/// Per-tile affine fit of the monocular depth to the filtered depth; holes
/// of well-fitting tiles are filled, valid filtered pixels never change.
pub fn restore_with_mono(filtered: &RefinedDepth, mono: &DepthMap, patch: usize, err_th: f64) -> Result<RefinedDepth> {
    if patch < 8 {
        return Err(Error::ConfigInvalid(format!("restoration patch {patch} is below 8")));
    }
    let (w, h) = (filtered.depth.width, filtered.depth.height);
    if !filtered.depth.same_shape(mono) {
        return Err(Error::ShapeMismatch(
            "monocular depth and filtered depth differ in size".into(),
        ));
    }
    let min_samples = 20usize.max((0.05 * (patch * patch) as f64).ceil() as usize);
    let mut out = filtered.clone();
    for ty in (0..h).step_by(patch) {
        for tx in (0..w).step_by(patch) {
            let pixels: Vec<usize> = (ty..(ty + patch).min(h))
                .flat_map(|y| (tx..(tx + patch).min(w)).map(move |x| y * w + x))
                .collect();
            let samples: Vec<(f64, f64)> = pixels
                .iter()
                .filter(|&&i| filtered.depth.valid[i] && mono.valid[i])
                .map(|&i| (mono.values[i], filtered.depth.values[i]))
                .collect();
            if samples.len() < min_samples {
                continue;
            }
            let Ok((s, t)) = fit_affine(&samples) else {
                continue;
            };
            let mut residuals: Vec<f64> = samples.iter().map(|(m, d)| (d - (s * m + t)).abs()).collect();
            residuals.sort_by(f64::total_cmp);
            let median = residuals[residuals.len() / 2];
            if median > err_th {
                continue;
            }
            for &i in &pixels {
                if !filtered.depth.valid[i] && mono.valid[i] {
                    let v = s * mono.values[i] + t;
                    if v > 0.0 && v.is_finite() {
                        out.depth.values[i] = v;
                        out.depth.valid[i] = true;
                        out.source[i] = DepthSource::Restored;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Mean absolute difference between rendered depth and the restored target,
/// normalized by the number of valid target pixels.
pub fn loss_mv(rendered: &DepthMap, restored: &RefinedDepth) -> Result<DepthLoss> {
    let target = &restored.depth;
    if !rendered.same_shape(target) {
        return Err(Error::ShapeMismatch(
            "rendered depth and refinement target differ in size".into(),
        ));
    }
    let count = target.valid_count();
    if count == 0 {
        return Err(Error::EmptyTarget);
    }
    let k = count as f64;
    let mut grad = Grid::new(target.width, target.height, 0.0);
    let mut value = 0.0;
    for i in 0..target.values.len() {
        if target.valid[i] && rendered.valid[i] {
            let r = rendered.values[i] - target.values[i];
            value += r.abs();
            grad.data[i] = sign(r) / k;
        }
    }
    Ok(DepthLoss { value: value / k, grad })
}

/// `λ_mv L_mv + λ_n L_n`.
pub fn stage2_loss(mv: &DepthLoss, normal: &NormalLoss, w: &LossWeights) -> GeoLoss {
    let mut render = RenderGrads::default();
    render.add_mean_depth(&mv.grad, w.lambda_mv);
    render.add(&normal.grads, w.lambda_n);
    GeoLoss {
        value: w.lambda_mv * mv.value + w.lambda_n * normal.value,
        render,
        scales: Vec::new(),
    }
}
