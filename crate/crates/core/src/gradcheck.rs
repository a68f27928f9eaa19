//! Central finite-difference checking of analytic gradients.
//!
//! Used by the unit tests of every differentiable operation and by the
//! acceptance suite. The relative error of an analytic value `a` against a
//! numeric value `n` is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
//! entries that are zero in both from being judged on round-off alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{CameraView, Intrinsics, Pose, Vec3, ViewId};
use crate::render::{composited_ids, RenderConfig, SurfelGrads};
use crate::surfel::{Surfel, SurfelCloud, SurfelId};

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn central_difference(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradReport {
    pub fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = rel_err(analytic, numeric);
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = format!("{} analytic {analytic:.10e} numeric {numeric:.10e}", label());
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfelParam {
    Center(usize),
    Rotation(usize),
    Scale(usize),
    Opacity,
    Color(usize),
}

pub const SURFEL_PARAMS: [SurfelParam; 12] = [
    SurfelParam::Center(0),
    SurfelParam::Center(1),
    SurfelParam::Center(2),
    SurfelParam::Rotation(0),
    SurfelParam::Rotation(1),
    SurfelParam::Rotation(2),
    SurfelParam::Scale(0),
    SurfelParam::Scale(1),
    SurfelParam::Opacity,
    SurfelParam::Color(0),
    SurfelParam::Color(1),
    SurfelParam::Color(2),
];

/// Copy of `s` with one parameter moved by `h` (rotations are left-multiplied).
pub fn perturb(s: &Surfel, p: SurfelParam, h: f64) -> Surfel {
    let mut out = *s;
    match p {
        SurfelParam::Center(k) => out.center[k] += h,
        SurfelParam::Rotation(k) => {
            let mut w = Vec3::zeros();
            w[k] = h;
            out.rotate(&w);
        }
        SurfelParam::Scale(k) => out.scales[k] += h,
        SurfelParam::Opacity => out.opacity += h,
        SurfelParam::Color(k) => out.color[k] += h,
    }
    out
}

pub fn grad_entry(g: &SurfelGrads, i: usize, p: SurfelParam) -> f64 {
    match p {
        SurfelParam::Center(k) => g.center[i][k],
        SurfelParam::Rotation(k) => g.rotation[i][k],
        SurfelParam::Scale(k) => g.scales[i][k],
        SurfelParam::Opacity => g.opacity[i],
        SurfelParam::Color(k) => g.color[i][k],
    }
}

/// Small camera looking down +z from the origin.
pub fn test_camera(width: usize, height: usize) -> CameraView {
    CameraView::new(
        ViewId(0),
        Intrinsics {
            fx: width as f64,
            fy: width as f64,
            cx: width as f64 / 2.0 - 0.5,
            cy: height as f64 / 2.0 - 0.5,
        },
        width,
        height,
        Pose::identity(),
    )
    .expect("valid test camera")
}

/// Random surfels in the frustum of [`test_camera`], tilted at most ~60° away
/// from facing the camera.
pub fn random_cloud(rng: &mut impl Rng, n: usize) -> SurfelCloud {
    let surfels = (0..n)
        .map(|_| {
            let z = rng.random_range(1.5..3.0);
            let center = Vec3::new(rng.random_range(-0.4..0.4) * z, rng.random_range(-0.4..0.4) * z, z);
            let normal = Vec3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), -1.0);
            let mut s = Surfel::oriented(
                center,
                normal,
                [rng.random_range(0.08..0.4), rng.random_range(0.08..0.4)],
                rng.random_range(0.3..0.95),
                [
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                ],
            );
            // random in-plane spin so tangents are not axis aligned
            s.rotate(&(s.normal() * rng.random_range(0.0..std::f64::consts::PI)));
            s
        })
        .collect();
    SurfelCloud::new(surfels)
}

/// True when no ±`FD_STEP` perturbation of any parameter changes which
/// surfels are composited where, i.e. the rendered buffers are smooth in
/// every direction the check will probe.
pub fn is_smooth_at(cloud: &SurfelCloud, cam: &CameraView, cfg: &RenderConfig) -> bool {
    let base = composited_ids(cloud, cam, cfg);
    for i in 0..cloud.len() {
        for p in SURFEL_PARAMS {
            if matches!(p, SurfelParam::Color(_)) {
                continue;
            }
            for h in [FD_STEP, -FD_STEP] {
                let mut c = cloud.clone();
                c.surfels[i] = perturb(&cloud.surfels[i], p, h);
                if composited_ids(&c, cam, cfg) != base {
                    return false;
                }
            }
        }
    }
    true
}

/// Draws random clouds from `seed` until one is smooth under every probe.
pub fn smooth_random_scene(seed: u64, n: usize, width: usize, height: usize) -> (SurfelCloud, CameraView) {
    let cam = test_camera(width, height);
    let cfg = RenderConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let cloud = random_cloud(&mut rng, n);
        if is_smooth_at(&cloud, &cam, &cfg) {
            return (cloud, cam);
        }
    }
}

/// Compares analytic per-surfel gradients with central differences of `loss`.
pub fn check_surfel_grads(
    cloud: &SurfelCloud,
    analytic: &SurfelGrads,
    loss: impl Fn(&SurfelCloud) -> f64,
) -> GradReport {
    let mut report = GradReport::default();
    let ids: &[SurfelId] = &cloud.ids;
    for i in 0..cloud.len() {
        for p in SURFEL_PARAMS {
            let numeric = central_difference(
                |h| {
                    let mut c = cloud.clone();
                    c.surfels[i] = perturb(&cloud.surfels[i], p, h);
                    loss(&c)
                },
                FD_STEP,
            );
            report.record(
                || format!("surfel {} {p:?}", ids[i]),
                grad_entry(analytic, i, p),
                numeric,
            );
        }
    }
    report
}

/// Checks a gradient of a function over a flat parameter vector.
pub fn check_vector_grad(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64, label: &str) -> GradReport {
    let mut report = GradReport::default();
    for i in 0..x.len() {
        let numeric = central_difference(
            |h| {
                let mut y = x.to_vec();
                y[i] += h;
                f(&y)
            },
            FD_STEP,
        );
        report.record(|| format!("{label}[{i}]"), analytic[i], numeric);
    }
    report
}
