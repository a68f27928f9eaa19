//! Single-view geometric supervision: monocular inverse-depth alignment and
//! the depth, depth-normal and scale losses of the first training stage.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraView, DepthMap, Grid, ScalarMap, Vec3, ViewId};
use crate::io;
use crate::render::{RenderGrads, RenderOutput};
use crate::surfel::{SurfelCloud, SurfelId};

/// Relative inverse depth from a monocular network (or the synthetic stand-in).
#[derive(Debug, Clone, PartialEq)]
pub struct MonoPrior {
    pub view_id: ViewId,
    pub inverse_depth: ScalarMap,
    pub valid: Vec<bool>,
}

impl MonoPrior {
    /// Validity is `value > 0 && finite`.
    pub fn new(view_id: ViewId, inverse_depth: ScalarMap) -> Self {
        let valid = inverse_depth.data.iter().map(|v| *v > 0.0 && v.is_finite()).collect();
        MonoPrior {
            view_id,
            inverse_depth,
            valid,
        }
    }

    pub fn at(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.inverse_depth.width + x;
        self.valid[i].then_some(self.inverse_depth.data[i])
    }

    /// Reads `<view_id>.pfm` from `dir`.
    pub fn load(dir: &Path, view_id: ViewId) -> Result<Self> {
        let pfm = io::read_pfm(&dir.join(format!("{}.pfm", view_id.0)))?;
        if pfm.channels != 1 {
            return Err(Error::format("PFM", "monocular priors need 1 channel"));
        }
        let map = Grid::from_vec(pfm.width, pfm.height, pfm.data.iter().map(|&v| v as f64).collect())?;
        Ok(Self::new(view_id, map))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut map = self.inverse_depth.clone();
        for (v, ok) in map.data.iter_mut().zip(&self.valid) {
            if !ok {
                *v = 0.0;
            }
        }
        io::write_pfm(&dir.join(format!("{}.pfm", self.view_id.0)), &io::scalar_to_pfm(&map))
    }

    /// Depth map `1 / inverse_depth` over the valid pixels.
    pub fn to_depth(&self) -> DepthMap {
        let (w, h) = (self.inverse_depth.width, self.inverse_depth.height);
        let mut d = DepthMap::invalid(w, h);
        for y in 0..h {
            for x in 0..w {
                d.set(x, y, self.at(x, y).map(|v| 1.0 / v));
            }
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_n: f64,
    pub lambda_s: f64,
    pub lambda_mv: f64,
    pub lambda_app_mix: f64,
    pub tau_s: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_d: 0.5,
            lambda_n: 0.0125,
            lambda_s: 0.1,
            lambda_mv: 2.5,
            lambda_app_mix: 0.8,
            tau_s: 0.05,
            epsilon: 1e-8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_d,
            self.lambda_n,
            self.lambda_s,
            self.lambda_mv,
            self.lambda_app_mix,
            self.tau_s,
            self.epsilon,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::ConfigInvalid(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if self.lambda_app_mix > 1.0 || self.tau_s <= 0.0 || self.epsilon <= 0.0 {
            return Err(Error::ConfigInvalid(
                "lambda_app_mix must lie in [0, 1]; tau_s and epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPrior {
    pub scale: f64,
    pub shift: f64,
    /// `scale · prior + shift`, valid where the prior is valid and the result positive.
    pub inverse_depth: MonoPrior,
}

/// Least-squares affine fit of the prior to sparse inverse depths.
pub fn align_inverse_depth(prior: &MonoPrior, sparse: &[(Vector2<f64>, f64)]) -> Result<AlignedPrior> {
    let (w, h) = (prior.inverse_depth.width, prior.inverse_depth.height);
    let samples: Vec<(f64, f64)> = sparse
        .iter()
        .filter(|(_, d)| *d > 0.0 && d.is_finite())
        .filter_map(|(p, d)| {
            let (x, y) = (p.x.round(), p.y.round());
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                return None;
            }
            prior.at(x as usize, y as usize).map(|m| (m, 1.0 / d))
        })
        .collect();
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples(samples.len()));
    }
    let (scale, shift) = fit_affine(&samples)?;
    let mut out = prior.clone();
    for (v, ok) in out.inverse_depth.data.iter_mut().zip(out.valid.iter_mut()) {
        if *ok {
            *v = scale * *v + shift;
            *ok = *v > 0.0 && v.is_finite();
        }
    }
    Ok(AlignedPrior {
        scale,
        shift,
        inverse_depth: out,
    })
}

/// `(s, t)` minimizing `Σ (s·m + t − y)²` over `(m, y)` samples.
pub fn fit_affine(samples: &[(f64, f64)]) -> Result<(f64, f64)> {
    let n = samples.len() as f64;
    let mean_m = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let mean_y = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let (mut smm, mut smy) = (0.0, 0.0);
    for (m, y) in samples {
        smm += (m - mean_m) * (m - mean_m);
        smy += (m - mean_m) * (y - mean_y);
    }
    if smm <= 1e-300 {
        return Err(Error::DegenerateFit("prior values have zero variance".into()));
    }
    let s = smy / smm;
    Ok((s, mean_y - s * mean_m))
}

/// Value of a loss term and its gradient with respect to one render buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthLoss {
    pub value: f64,
    pub grad: ScalarMap,
}

/// Mean absolute difference of rendered and aligned inverse depth.
pub fn loss_depth(rendered: &DepthMap, aligned: &MonoPrior) -> Result<DepthLoss> {
    let (w, h) = (rendered.width, rendered.height);
    if aligned.inverse_depth.width != w || aligned.inverse_depth.height != h {
        return Err(Error::ShapeMismatch("prior and render resolution differ".into()));
    }
    let joint: Vec<usize> = (0..w * h).filter(|&i| rendered.valid[i] && aligned.valid[i]).collect();
    if joint.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    let k = joint.len() as f64;
    let mut grad = Grid::new(w, h, 0.0);
    let mut value = 0.0;
    for &i in &joint {
        let d = rendered.values[i];
        let r = 1.0 / d - aligned.inverse_depth.data[i];
        value += r.abs();
        grad.data[i] = sign(r) * (-1.0 / (d * d)) / k;
    }
    Ok(DepthLoss { value: value / k, grad })
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalLoss {
    pub value: f64,
    pub grads: RenderGrads,
}

/// Camera-frame point of pixel `(x, y)` at the rendered mean depth.
fn depth_point(out: &RenderOutput, cam: &CameraView, x: usize, y: usize) -> Option<(Vec3, Vec3)> {
    let d = out.mean_depth.at(x, y)?;
    let r = cam.ray(x as f64, y as f64);
    Some((r * d, r))
}

/// Depth–normal consistency: `mean_p α_p (1 − n_p · N_p)` over interior
/// pixels with α > 0.5, where `N_p` is the normal of the surface traced by
/// the mean-depth points (central differences, oriented toward the camera).
pub fn loss_normal(out: &RenderOutput, cam: &CameraView) -> NormalLoss {
    let (w, h) = (out.width, out.height);
    let mut domain = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if *out.alpha.get(x, y) <= 0.5 {
                continue;
            }
            let (Some(l), Some(r), Some(u), Some(d)) = (
                depth_point(out, cam, x - 1, y),
                depth_point(out, cam, x + 1, y),
                depth_point(out, cam, x, y - 1),
                depth_point(out, cam, x, y + 1),
            ) else {
                continue;
            };
            let dx = r.0 - l.0;
            let dy = d.0 - u.0;
            let c = dy.cross(&dx);
            let len = c.norm();
            if len <= 1e-15 {
                continue;
            }
            domain.push((x, y, dx, dy, c / len, len, [l.1, r.1, u.1, d.1]));
        }
    }
    let mut grads = RenderGrads::default();
    if domain.is_empty() {
        return NormalLoss { value: 0.0, grads };
    }
    let k = domain.len() as f64;
    let mut g_depth = Grid::new(w, h, 0.0);
    let mut g_normal = Grid::new(w, h, [0.0; 3]);
    let mut g_alpha = Grid::new(w, h, 0.0);
    let mut value = 0.0;
    for (x, y, dx, dy, nd, len, rays) in domain {
        let a = *out.alpha.get(x, y);
        let n = Vec3::from(*out.normal.get(x, y));
        let dot = n.dot(&nd);
        value += a * (1.0 - dot);
        *g_alpha.get_mut(x, y) = (1.0 - dot) / k;
        let gn = -nd * (a / k);
        *g_normal.get_mut(x, y) = [gn.x, gn.y, gn.z];
        let g_nd = -n * (a / k);
        let gc = (g_nd - nd * nd.dot(&g_nd)) / len;
        let g_dy = dx.cross(&gc);
        let g_dx = gc.cross(&dy);
        *g_depth.get_mut(x + 1, y) += g_dx.dot(&rays[1]);
        *g_depth.get_mut(x - 1, y) -= g_dx.dot(&rays[0]);
        *g_depth.get_mut(x, y + 1) += g_dy.dot(&rays[3]);
        *g_depth.get_mut(x, y - 1) -= g_dy.dot(&rays[2]);
    }
    grads.mean_depth = Some(g_depth);
    grads.normal = Some(g_normal);
    grads.alpha = Some(g_alpha);
    NormalLoss {
        value: value / k,
        grads,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleLoss {
    pub value: f64,
    /// Per-surfel gradient in storage order.
    pub grad: Vec<[f64; 2]>,
}

/// `(1/|M|) Σ_{i∈M} max(max(s_u, s_v) − τ_s, ε)` over the visible set `M`.
pub fn loss_scale(cloud: &SurfelCloud, visible: &[SurfelId], tau_s: f64, epsilon: f64) -> Result<ScaleLoss> {
    if visible.is_empty() {
        return Err(Error::EmptyVisibleSet);
    }
    let index: HashMap<SurfelId, usize> = cloud.index_map();
    let m = visible.len() as f64;
    let mut grad = vec![[0.0; 2]; cloud.len()];
    let mut value = 0.0;
    for id in visible {
        let i = *index
            .get(id)
            .ok_or_else(|| Error::InvalidScene(format!("visible surfel {id} is not in the cloud")))?;
        let s = cloud.surfels[i].scales;
        let axis = if s[0] >= s[1] { 0 } else { 1 };
        let excess = s[axis] - tau_s;
        if excess > epsilon {
            value += excess;
            grad[i][axis] += 1.0 / m;
        } else {
            value += epsilon;
        }
    }
    Ok(ScaleLoss { value: value / m, grad })
}

/// Weighted geometric loss with gradients on render buffers and on scales.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoLoss {
    pub value: f64,
    pub render: RenderGrads,
    pub scales: Vec<[f64; 2]>,
}

/// `λ_d L_d + λ_n L_n + λ_s L_s`; a missing depth term counts as zero.
pub fn stage1_loss(depth: Option<&DepthLoss>, normal: &NormalLoss, scale: &ScaleLoss, w: &LossWeights) -> GeoLoss {
    let mut render = RenderGrads::default();
    let mut value = w.lambda_n * normal.value + w.lambda_s * scale.value;
    if let Some(d) = depth {
        value += w.lambda_d * d.value;
        render.add_mean_depth(&d.grad, w.lambda_d);
    }
    render.add(&normal.grads, w.lambda_n);
    let scales = scale
        .grad
        .iter()
        .map(|g| [g[0] * w.lambda_s, g[1] * w.lambda_s])
        .collect();
    GeoLoss { value, render, scales }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};
    use crate::gradcheck::check_vector_grad;
    use crate::render::{render, RenderConfig};
    use crate::surfel::Surfel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prior(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> f64) -> MonoPrior {
        let data = (0..w * h).map(|i| f(i % w, i / w)).collect();
        MonoPrior::new(ViewId(0), Grid::from_vec(w, h, data).unwrap())
    }

    #[test]
    fn align_recovers_exact_affine() {
        let p = prior(8, 8, |x, y| 0.1 + 0.05 * x as f64 + 0.01 * y as f64);
        let sparse: Vec<_> = (0..8)
            .map(|i| {
                let m = p.at(i, 7 - i).unwrap();
                (Vector2::new(i as f64, (7 - i) as f64), 1.0 / (3.0 * m + 0.2))
            })
            .collect();
        let a = align_inverse_depth(&p, &sparse).unwrap();
        assert!((a.scale - 3.0).abs() < 1e-12 && (a.shift - 0.2).abs() < 1e-12);
        // scale equivariance: inverse depths × k scale (s, t) by k
        let scaled: Vec<_> = sparse.iter().map(|(px, d)| (*px, d / 4.0)).collect();
        let b = align_inverse_depth(&p, &scaled).unwrap();
        assert!((b.scale - 12.0).abs() < 1e-10 && (b.shift - 0.8).abs() < 1e-10);
    }

    #[test]
    fn align_rejects_bad_samples() {
        let p = prior(4, 4, |x, _| 1.0 + x as f64);
        let one = [(Vector2::new(1.0, 1.0), 2.0)];
        assert!(matches!(
            align_inverse_depth(&p, &one),
            Err(Error::InsufficientSamples(1))
        ));
        let flat = prior(4, 4, |_, _| 1.0);
        let two = [(Vector2::new(1.0, 1.0), 2.0), (Vector2::new(2.0, 1.0), 3.0)];
        assert!(matches!(align_inverse_depth(&flat, &two), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn depth_loss_values() {
        let d = DepthMap::from_values(1, 1, vec![2.0]).unwrap();
        let l = loss_depth(&d, &prior(1, 1, |_, _| 0.7)).unwrap();
        assert!((l.value - 0.2).abs() < 1e-15);
        assert_eq!(loss_depth(&d, &prior(1, 1, |_, _| 0.5)).unwrap().value, 0.0);
        let none = DepthMap::invalid(1, 1);
        assert!(matches!(
            loss_depth(&none, &prior(1, 1, |_, _| 0.5)),
            Err(Error::EmptyOverlap)
        ));
    }

    #[test]
    fn depth_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f64> = (0..64).map(|_| rng.random_range(0.5..3.0)).collect();
        let p = prior(8, 8, |_, _| rng.random_range(0.3..2.0));
        let f = |v: &[f64]| {
            loss_depth(&DepthMap::from_values(8, 8, v.to_vec()).unwrap(), &p)
                .unwrap()
                .value
        };
        let g = loss_depth(&DepthMap::from_values(8, 8, vals.clone()).unwrap(), &p).unwrap();
        let r = check_vector_grad(&vals, &g.grad.data, f, "depth");
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn scale_loss_values() {
        let cloud = SurfelCloud::new(vec![
            Surfel::oriented(Vec3::zeros(), Vec3::z(), [0.5, 0.1], 1.0, [0.0; 3]),
            Surfel::oriented(Vec3::zeros(), Vec3::z(), [0.1, 0.05], 1.0, [0.0; 3]),
        ]);
        let one = loss_scale(&cloud, &[0], 0.2, 1e-8).unwrap();
        assert!((one.value - 0.3).abs() < 1e-15);
        assert_eq!(one.grad[0], [1.0, 0.0]);
        let two = loss_scale(&cloud, &[0, 1], 0.2, 1e-8).unwrap();
        assert!((two.value - (0.3 + 1e-8) / 2.0).abs() < 1e-15);
        assert_eq!(loss_scale(&cloud, &[1], 0.2, 1e-8).unwrap().value, 1e-8);
        assert!(matches!(
            loss_scale(&cloud, &[], 0.2, 1e-8),
            Err(Error::EmptyVisibleSet)
        ));
        // non-increasing in tau
        assert!(loss_scale(&cloud, &[0, 1], 0.3, 1e-8).unwrap().value <= two.value);
    }

    #[test]
    fn stage1_weighting() {
        let d = DepthLoss {
            value: 1.0,
            grad: Grid::new(1, 1, 0.0),
        };
        let n = NormalLoss {
            value: 2.0,
            grads: RenderGrads::default(),
        };
        let s = ScaleLoss {
            value: 3.0,
            grad: vec![],
        };
        let w = LossWeights {
            lambda_d: 0.5,
            lambda_n: 0.0125,
            lambda_s: 0.1,
            ..Default::default()
        };
        assert!((stage1_loss(Some(&d), &n, &s, &w).value - 0.825).abs() < 1e-15);
        let zero = LossWeights {
            lambda_d: 0.0,
            lambda_n: 0.0,
            lambda_s: 0.0,
            ..Default::default()
        };
        assert_eq!(stage1_loss(Some(&d), &n, &s, &zero).value, 0.0);
    }

    fn plane_camera() -> CameraView {
        CameraView::new(
            ViewId(0),
            Intrinsics {
                fx: 16.0,
                fy: 16.0,
                cx: 7.5,
                cy: 7.5,
            },
            16,
            16,
            Pose::identity(),
        )
        .unwrap()
    }

    #[test]
    fn fronto_parallel_plane_is_consistent() {
        let cloud = SurfelCloud::new(vec![Surfel::oriented(
            Vec3::new(0.0, 0.0, 2.0),
            -Vec3::z(),
            [50.0, 50.0],
            1.0,
            [0.5; 3],
        )]);
        let cam = plane_camera();
        let out = render(&cloud, &cam, &RenderConfig::default());
        let l = loss_normal(&out, &cam);
        assert!(l.value.abs() < 1e-12, "{}", l.value);
    }

    #[test]
    fn orthogonal_normal_costs_one() {
        let cam = plane_camera();
        let cloud = SurfelCloud::new(vec![Surfel::oriented(
            Vec3::new(0.0, 0.0, 2.0),
            -Vec3::z(),
            [50.0, 50.0],
            1.0,
            [0.5; 3],
        )]);
        let mut out = render(&cloud, &cam, &RenderConfig::default());
        for n in out.normal.data.iter_mut() {
            *n = [1.0, 0.0, 0.0];
        }
        out.alpha.data.fill(1.0);
        assert!((loss_normal(&out, &cam).value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normal_loss_gradient() {
        let cam = plane_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = SurfelCloud::new(vec![Surfel::oriented(
            Vec3::new(0.0, 0.0, 2.0),
            -Vec3::z(),
            [50.0, 50.0],
            1.0,
            [0.5; 3],
        )]);
        let mut out = render(&cloud, &cam, &RenderConfig::default());
        for i in 0..out.alpha.len() {
            out.mean_depth.values[i] = rng.random_range(1.5..2.5);
            out.alpha.data[i] = rng.random_range(0.6..1.0);
            let n = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), -1.0).normalize();
            out.normal.data[i] = [n.x, n.y, n.z];
        }
        let l = loss_normal(&out, &cam);
        // pack depth, alpha and normal buffers into one vector
        let n = out.alpha.len();
        let pack = |o: &RenderOutput| -> Vec<f64> {
            let mut v = o.mean_depth.values.clone();
            v.extend(&o.alpha.data);
            v.extend(o.normal.data.iter().flatten());
            v
        };
        let unpack = |v: &[f64]| {
            let mut o = out.clone();
            o.mean_depth.values.copy_from_slice(&v[..n]);
            o.alpha.data.copy_from_slice(&v[n..2 * n]);
            for i in 0..n {
                o.normal.data[i] = [v[2 * n + 3 * i], v[2 * n + 3 * i + 1], v[2 * n + 3 * i + 2]];
            }
            o
        };
        let mut analytic = l.grads.mean_depth.clone().unwrap().data;
        analytic.extend(&l.grads.alpha.clone().unwrap().data);
        analytic.extend(l.grads.normal.clone().unwrap().data.iter().flatten());
        let r = check_vector_grad(
            &pack(&out),
            &analytic,
            |v| loss_normal(&unpack(v), &cam).value,
            "normal",
        );
        assert!(r.passes(1e-4), "{r:?}");
    }
}
