//! Forward and backward rasterization of 2D Gaussian surfels.
//!
//! Every pixel casts an exact ray against the surfel planes (no screen-space
//! approximation), keeps intersections with `α = opacity · G(u, v) ≥ cutoff`
//! inside the 3σ rectangle, sorts them by `(camera z, id)` and composites
//! front to back. Work is split by image row; per-surfel quantities are
//! reduced in pixel order so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CameraView, DepthMap, Grid, ImageRgb, Rgb, ScalarMap, Vec3, MIN_DEPTH};
use crate::surfel::{Surfel, SurfelCloud, SurfelId};

/// Support of the Gaussian in standard deviations.
pub const SUPPORT_SIGMA: f64 = 3.0;
const TILE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Minimum per-surfel α kept along a ray.
    pub cutoff: f64,
    /// Compositing stops once transmittance drops below this.
    pub min_transmittance: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            cutoff: 1.0 / 255.0,
            min_transmittance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatHit {
    /// Distance along the ray (camera depth when the ray has unit z).
    pub z: f64,
    pub weight: f64,
    pub u: f64,
    pub v: f64,
}

/// Exact ray–surfel-plane intersection with the Gaussian weight at the hit.
pub fn ray_splat_intersect(origin: &Vec3, direction: &Vec3, surfel: &Surfel) -> Option<SplatHit> {
    let n = surfel.normal();
    let denom = n.dot(direction);
    if denom.abs() < 1e-12 {
        return None;
    }
    let z = n.dot(&(surfel.center - origin)) / denom;
    if z <= 0.0 {
        return None;
    }
    let d = origin + direction * z - surfel.center;
    let u = surfel.tangent_u.dot(&d);
    let v = surfel.tangent_v.dot(&d);
    Some(SplatHit {
        z,
        weight: gaussian(u, v, surfel.scales),
        u,
        v,
    })
}

#[inline]
fn gaussian(u: f64, v: f64, s: [f64; 2]) -> f64 {
    (-0.5 * (u * u / (s[0] * s[0]) + v * v / (s[1] * s[1]))).exp()
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub color: ImageRgb,
    pub mean_depth: DepthMap,
    pub median_depth: DepthMap,
    /// Camera-frame normals facing the camera; zero where nothing was hit.
    pub normal: Grid<[f64; 3]>,
    pub alpha: ScalarMap,
    /// Pixels where the surfel is both the max-weight and the median-depth
    /// contributor, indexed by storage position.
    pub contrib_area: Vec<u32>,
    /// Surfels composited into at least one pixel, indexed by storage position.
    pub visible: Vec<bool>,
}

impl RenderOutput {
    pub fn visible_ids(&self, cloud: &SurfelCloud) -> Vec<SurfelId> {
        let mut ids: Vec<SurfelId> = self
            .visible
            .iter()
            .zip(&cloud.ids)
            .filter(|(v, _)| **v)
            .map(|(_, id)| *id)
            .collect();
        ids.sort_unstable();
        ids
    }
}

/// Upstream gradients on the differentiable render buffers; `None` means zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderGrads {
    pub color: Option<ImageRgb>,
    pub mean_depth: Option<ScalarMap>,
    pub normal: Option<Grid<[f64; 3]>>,
    pub alpha: Option<ScalarMap>,
}

impl RenderGrads {
    pub fn add_color(&mut self, g: &ImageRgb, k: f64) {
        accumulate(&mut self.color, g, k, |a, b, k| {
            for c in 0..3 {
                a[c] += k * b[c];
            }
        });
    }

    pub fn add_mean_depth(&mut self, g: &ScalarMap, k: f64) {
        accumulate(&mut self.mean_depth, g, k, |a, b, k| *a += k * b);
    }

    pub fn add_normal(&mut self, g: &Grid<[f64; 3]>, k: f64) {
        accumulate(&mut self.normal, g, k, |a, b, k| {
            for c in 0..3 {
                a[c] += k * b[c];
            }
        });
    }

    pub fn add_alpha(&mut self, g: &ScalarMap, k: f64) {
        accumulate(&mut self.alpha, g, k, |a, b, k| *a += k * b);
    }

    pub fn add(&mut self, other: &RenderGrads, k: f64) {
        if let Some(g) = &other.color {
            self.add_color(g, k);
        }
        if let Some(g) = &other.mean_depth {
            self.add_mean_depth(g, k);
        }
        if let Some(g) = &other.normal {
            self.add_normal(g, k);
        }
        if let Some(g) = &other.alpha {
            self.add_alpha(g, k);
        }
    }
}

fn accumulate<T: Clone + Default>(slot: &mut Option<Grid<T>>, g: &Grid<T>, k: f64, f: impl Fn(&mut T, &T, f64)) {
    let dst = slot.get_or_insert_with(|| Grid::new(g.width, g.height, T::default()));
    for (a, b) in dst.data.iter_mut().zip(&g.data) {
        f(a, b, k);
    }
}

/// Per-surfel parameter gradients in storage order. `rotation` is the
/// gradient w.r.t. a left-multiplied world-frame rotation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfelGrads {
    pub center: Vec<Vec3>,
    pub rotation: Vec<Vec3>,
    pub scales: Vec<[f64; 2]>,
    pub opacity: Vec<f64>,
    pub color: Vec<Rgb>,
}

impl SurfelGrads {
    pub fn zeros(n: usize) -> Self {
        SurfelGrads {
            center: vec![Vec3::zeros(); n],
            rotation: vec![Vec3::zeros(); n],
            scales: vec![[0.0; 2]; n],
            opacity: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }

    /// `self += k · other`.
    pub fn add_scaled(&mut self, other: &SurfelGrads, k: f64) {
        for i in 0..self.len() {
            self.center[i] += other.center[i] * k;
            self.rotation[i] += other.rotation[i] * k;
            for c in 0..2 {
                self.scales[i][c] += other.scales[i][c] * k;
            }
            self.opacity[i] += other.opacity[i] * k;
            for c in 0..3 {
                self.color[i][c] += other.color[i][c] * k;
            }
        }
    }

    fn add_entry(&mut self, i: usize, e: &[f64; 12]) {
        self.center[i] += Vec3::new(e[0], e[1], e[2]);
        self.rotation[i] += Vec3::new(e[3], e[4], e[5]);
        self.scales[i][0] += e[6];
        self.scales[i][1] += e[7];
        self.opacity[i] += e[8];
        for c in 0..3 {
            self.color[i][c] += e[9 + c];
        }
    }
}

/// Surfel expressed in the camera frame with its screen bounding box.
struct Projected {
    pc: Vec3,
    a: Vec3,
    b: Vec3,
    n: Vec3,
    /// Inclusive pixel bounds `(x0, x1, y0, y1)`.
    bbox: (usize, usize, usize, usize),
}

fn project_cloud(cloud: &SurfelCloud, cam: &CameraView) -> Vec<Option<Projected>> {
    let r = &cam.pose.rotation;
    let (w, h) = (cam.width as f64, cam.height as f64);
    cloud
        .surfels
        .iter()
        .map(|s| {
            let pc = cam.pose.apply(&s.center);
            let a = r * s.tangent_u;
            let b = r * s.tangent_v;
            let n = a.cross(&b);
            let eu = a * (SUPPORT_SIGMA * s.scales[0]);
            let ev = b * (SUPPORT_SIGMA * s.scales[1]);
            let corners = [pc + eu + ev, pc + eu - ev, pc - eu + ev, pc - eu - ev];
            let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
            if corners.iter().all(|c| c.z > MIN_DEPTH) {
                for c in &corners {
                    let (p, _) = cam.project_camera(c).ok()?;
                    x0 = x0.min(p.x);
                    x1 = x1.max(p.x);
                    y0 = y0.min(p.y);
                    y1 = y1.max(p.y);
                }
            } else if corners.iter().any(|c| c.z > MIN_DEPTH) {
                // straddles the image plane: fall back to the whole image
                x0 = 0.0;
                y0 = 0.0;
                x1 = w - 1.0;
                y1 = h - 1.0;
            } else {
                return None;
            }
            if x1 < 0.0 || y1 < 0.0 || x0 > w - 1.0 || y0 > h - 1.0 {
                return None;
            }
            let bbox = (
                x0.max(0.0).ceil() as usize,
                x1.min(w - 1.0).floor() as usize,
                y0.max(0.0).ceil() as usize,
                y1.min(h - 1.0).floor() as usize,
            );
            if bbox.0 > bbox.1 || bbox.2 > bbox.3 {
                return None;
            }
            Some(Projected { pc, a, b, n, bbox })
        })
        .collect()
}

struct Tiles {
    cols: usize,
    lists: Vec<Vec<u32>>,
}

fn bin_tiles(projected: &[Option<Projected>], width: usize, height: usize) -> Tiles {
    let cols = width.div_ceil(TILE);
    let rows = height.div_ceil(TILE);
    let mut lists = vec![Vec::new(); cols * rows];
    for (i, p) in projected.iter().enumerate() {
        if let Some(p) = p {
            let (x0, x1, y0, y1) = p.bbox;
            for ty in y0 / TILE..=y1 / TILE {
                for tx in x0 / TILE..=x1 / TILE {
                    lists[ty * cols + tx].push(i as u32);
                }
            }
        }
    }
    Tiles { cols, lists }
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    idx: usize,
    id: SurfelId,
    z: f64,
    g: f64,
    alpha: f64,
    u: f64,
    v: f64,
    denom: f64,
    /// +1 if the plane normal already faces the camera, else -1.
    flip: f64,
}

/// Per-pixel compositing state shared by forward and backward.
struct Composite {
    hits: Vec<Hit>,
    /// Transmittance before each composited hit.
    trans: Vec<f64>,
    count: usize,
    color: Rgb,
    alpha: f64,
    depth_num: f64,
    normal_sum: Vec3,
    median: Option<usize>,
    max_weight: Option<usize>,
}

struct Context<'a> {
    cloud: &'a SurfelCloud,
    cam: &'a CameraView,
    cfg: RenderConfig,
    projected: Vec<Option<Projected>>,
    tiles: Tiles,
}

impl<'a> Context<'a> {
    fn new(cloud: &'a SurfelCloud, cam: &'a CameraView, cfg: RenderConfig) -> Self {
        let projected = project_cloud(cloud, cam);
        let tiles = bin_tiles(&projected, cam.width, cam.height);
        Context {
            cloud,
            cam,
            cfg,
            projected,
            tiles,
        }
    }

    fn composite(&self, x: usize, y: usize, hits: &mut Vec<Hit>) -> Composite {
        hits.clear();
        let r = self.cam.ray(x as f64, y as f64);
        let list = &self.tiles.lists[(y / TILE) * self.tiles.cols + x / TILE];
        for &i in list {
            let i = i as usize;
            let p = self.projected[i].as_ref().unwrap();
            let (x0, x1, y0, y1) = p.bbox;
            if x < x0 || x > x1 || y < y0 || y > y1 {
                continue;
            }
            let s = &self.cloud.surfels[i];
            let denom = p.n.dot(&r);
            if denom.abs() < 1e-12 {
                continue;
            }
            let z = p.n.dot(&p.pc) / denom;
            if z <= MIN_DEPTH {
                continue;
            }
            let d = r * z - p.pc;
            let u = p.a.dot(&d);
            let v = p.b.dot(&d);
            if u.abs() > SUPPORT_SIGMA * s.scales[0] || v.abs() > SUPPORT_SIGMA * s.scales[1] {
                continue;
            }
            let g = gaussian(u, v, s.scales);
            let alpha = s.opacity * g;
            if alpha < self.cfg.cutoff {
                continue;
            }
            hits.push(Hit {
                idx: i,
                id: self.cloud.ids[i],
                z,
                g,
                alpha,
                u,
                v,
                denom,
                flip: if denom < 0.0 { 1.0 } else { -1.0 },
            });
        }
        hits.sort_by(|a, b| a.z.total_cmp(&b.z).then(a.id.cmp(&b.id)));

        let mut out = Composite {
            hits: Vec::new(),
            trans: Vec::with_capacity(hits.len()),
            count: 0,
            color: [0.0; 3],
            alpha: 0.0,
            depth_num: 0.0,
            normal_sum: Vec3::zeros(),
            median: None,
            max_weight: None,
        };
        let mut t = 1.0;
        let mut best_w = f64::NEG_INFINITY;
        for (k, h) in hits.iter().enumerate() {
            let w = h.alpha * t;
            let c = self.cloud.surfels[h.idx].color;
            for ch in 0..3 {
                out.color[ch] += c[ch] * w;
            }
            out.alpha += w;
            out.depth_num += h.z * w;
            out.normal_sum += self.projected[h.idx].as_ref().unwrap().n * (h.flip * w);
            out.trans.push(t);
            if t > 0.5 {
                out.median = Some(k);
            }
            if w > best_w {
                best_w = w;
                out.max_weight = Some(k);
            }
            out.count = k + 1;
            t *= 1.0 - h.alpha;
            if t < self.cfg.min_transmittance {
                break;
            }
        }
        if out.alpha <= 0.5 {
            out.median = None;
        }
        out.hits = hits[..out.count].to_vec();
        out
    }
}

struct RowForward {
    color: Vec<Rgb>,
    mean: Vec<Option<f64>>,
    median: Vec<Option<f64>>,
    normal: Vec<[f64; 3]>,
    alpha: Vec<f64>,
    contrib: Vec<usize>,
    visible: Vec<usize>,
}

/// Renders color, depths, normals and accumulated opacity of `cloud` seen from `camera`.
pub fn render(cloud: &SurfelCloud, camera: &CameraView, cfg: &RenderConfig) -> RenderOutput {
    let ctx = Context::new(cloud, camera, *cfg);
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<RowForward> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut buf = Vec::new();
            let mut row = RowForward {
                color: Vec::with_capacity(w),
                mean: Vec::with_capacity(w),
                median: Vec::with_capacity(w),
                normal: Vec::with_capacity(w),
                alpha: Vec::with_capacity(w),
                contrib: Vec::new(),
                visible: Vec::new(),
            };
            for x in 0..w {
                let c = ctx.composite(x, y, &mut buf);
                row.color.push(c.color);
                row.alpha.push(c.alpha);
                row.mean.push((c.alpha > 0.0).then(|| c.depth_num / c.alpha));
                row.median.push(c.median.map(|k| c.hits[k].z));
                let len = c.normal_sum.norm();
                row.normal.push(if c.alpha > 0.0 && len > 1e-12 {
                    let n = c.normal_sum / len;
                    [n.x, n.y, n.z]
                } else {
                    [0.0; 3]
                });
                if let (Some(m), Some(mx)) = (c.median, c.max_weight) {
                    if m == mx {
                        row.contrib.push(c.hits[m].idx);
                    }
                }
                row.visible.extend(c.hits.iter().map(|h| h.idx));
            }
            row
        })
        .collect();

    let n = cloud.len();
    let mut out = RenderOutput {
        width: w,
        height: h,
        color: Grid::new(w, h, [0.0; 3]),
        mean_depth: DepthMap::invalid(w, h),
        median_depth: DepthMap::invalid(w, h),
        normal: Grid::new(w, h, [0.0; 3]),
        alpha: Grid::new(w, h, 0.0),
        contrib_area: vec![0; n],
        visible: vec![false; n],
    };
    for (y, row) in rows.into_iter().enumerate() {
        for x in 0..w {
            let i = y * w + x;
            out.color.data[i] = row.color[x];
            out.alpha.data[i] = row.alpha[x];
            out.normal.data[i] = row.normal[x];
            out.mean_depth.set(x, y, row.mean[x]);
            out.median_depth.set(x, y, row.median[x]);
        }
        for k in row.contrib {
            out.contrib_area[k] += 1;
        }
        for k in row.visible {
            out.visible[k] = true;
        }
    }
    out
}

/// Ordered ids composited at every pixel (row-major). Any change in this
/// structure marks a discontinuity of the rendered buffers.
pub fn composited_ids(cloud: &SurfelCloud, camera: &CameraView, cfg: &RenderConfig) -> Vec<Vec<SurfelId>> {
    let ctx = Context::new(cloud, camera, *cfg);
    let mut buf = Vec::new();
    let mut out = Vec::with_capacity(camera.width * camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let c = ctx.composite(x, y, &mut buf);
            out.push(c.hits.iter().map(|h| h.id).collect());
        }
    }
    out
}

fn check_shape<T>(name: &str, g: &Option<Grid<T>>, w: usize, h: usize) -> Result<()> {
    match g {
        Some(g) if g.width != w || g.height != h => Err(Error::MismatchedForward(format!(
            "{name} gradient is {}x{}, render is {w}x{h}",
            g.width, g.height
        ))),
        _ => Ok(()),
    }
}

/// Gradients of `Σ_p <upstream_p, buffers_p>` w.r.t. every surfel parameter.
/// Median depth and contribution counts are piecewise constant and receive none.
pub fn render_backward(
    cloud: &SurfelCloud,
    camera: &CameraView,
    cfg: &RenderConfig,
    forward: &RenderOutput,
    upstream: &RenderGrads,
) -> Result<SurfelGrads> {
    let (w, h) = (camera.width, camera.height);
    if forward.width != w || forward.height != h || forward.visible.len() != cloud.len() {
        return Err(Error::MismatchedForward(format!(
            "forward is {}x{} with {} surfels, expected {w}x{h} with {}",
            forward.width,
            forward.height,
            forward.visible.len(),
            cloud.len()
        )));
    }
    check_shape("color", &upstream.color, w, h)?;
    check_shape("mean depth", &upstream.mean_depth, w, h)?;
    check_shape("normal", &upstream.normal, w, h)?;
    check_shape("alpha", &upstream.alpha, w, h)?;

    let ctx = Context::new(cloud, camera, *cfg);
    let rt = camera.pose.rotation.transpose();
    let rows: Vec<Vec<(usize, [f64; 12])>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut buf = Vec::new();
            let mut entries = Vec::new();
            for x in 0..w {
                let i = y * w + x;
                let g_color = upstream.color.as_ref().map_or([0.0; 3], |g| g.data[i]);
                let g_depth = match (&upstream.mean_depth, forward.mean_depth.valid[i]) {
                    (Some(g), true) => g.data[i],
                    _ => 0.0,
                };
                let g_normal = upstream.normal.as_ref().map_or([0.0; 3], |g| g.data[i]);
                let g_alpha = upstream.alpha.as_ref().map_or(0.0, |g| g.data[i]);
                if g_color == [0.0; 3] && g_depth == 0.0 && g_normal == [0.0; 3] && g_alpha == 0.0 {
                    continue;
                }
                let c = ctx.composite(x, y, &mut buf);
                if c.count == 0 || c.alpha <= 0.0 {
                    continue;
                }
                pixel_backward(&ctx, &rt, x, y, &c, g_color, g_depth, g_normal, g_alpha, &mut entries);
            }
            entries
        })
        .collect();

    let mut grads = SurfelGrads::zeros(cloud.len());
    for row in rows {
        for (idx, e) in row {
            grads.add_entry(idx, &e);
        }
    }
    Ok(grads)
}

#[allow(clippy::too_many_arguments)]
fn pixel_backward(
    ctx: &Context,
    rt: &crate::geometry::Mat3,
    x: usize,
    y: usize,
    c: &Composite,
    g_color: Rgb,
    g_depth: f64,
    g_normal: [f64; 3],
    g_alpha: f64,
    entries: &mut Vec<(usize, [f64; 12])>,
) {
    let r = ctx.cam.ray(x as f64, y as f64);
    let depth = c.depth_num / c.alpha;
    // mean depth = depth_num / alpha
    let g_depth_num = g_depth / c.alpha;
    let g_alpha_total = g_alpha - g_depth * depth / c.alpha;
    let len = c.normal_sum.norm();
    let g_normal_sum = if len > 1e-12 {
        let nn = c.normal_sum / len;
        let gn = Vec3::from(g_normal);
        (gn - nn * nn.dot(&gn)) / len
    } else {
        Vec3::zeros()
    };

    let k = c.count;
    let mut phi = vec![0.0; k];
    let mut nf = vec![Vec3::zeros(); k];
    for (j, hit) in c.hits.iter().enumerate() {
        let col = ctx.cloud.surfels[hit.idx].color;
        nf[j] = ctx.projected[hit.idx].as_ref().unwrap().n * hit.flip;
        phi[j] = g_color[0] * col[0]
            + g_color[1] * col[1]
            + g_color[2] * col[2]
            + g_alpha_total
            + g_depth_num * hit.z
            + g_normal_sum.dot(&nf[j]);
    }
    // suffix[j] = Σ_{m>j} α_m Π_{j<l<m}(1-α_l) φ_m
    let mut suffix = 0.0;
    let mut out = vec![[0.0f64; 12]; k];
    for j in (0..k).rev() {
        let hit = &c.hits[j];
        let t = c.trans[j];
        let wgt = hit.alpha * t;
        let g_alpha_j = t * (phi[j] - suffix);
        suffix = hit.alpha * phi[j] + (1.0 - hit.alpha) * suffix;

        let s = &ctx.cloud.surfels[hit.idx];
        let p = ctx.projected[hit.idx].as_ref().unwrap();
        let e = &mut out[j];
        for ch in 0..3 {
            e[9 + ch] = g_color[ch] * wgt;
        }
        e[8] = hit.g * g_alpha_j;
        let g_g = s.opacity * g_alpha_j;
        let (su, sv) = (s.scales[0], s.scales[1]);
        let g_u = -g_g * hit.g * hit.u / (su * su);
        let g_v = -g_g * hit.g * hit.v / (sv * sv);
        e[6] = g_g * hit.g * hit.u * hit.u / (su * su * su);
        e[7] = g_g * hit.g * hit.v * hit.v / (sv * sv * sv);

        let d = r * hit.z - p.pc;
        let mut g_a = d * g_u;
        let mut g_b = d * g_v;
        let g_d = p.a * g_u + p.b * g_v;
        let g_z = g_depth_num * wgt + g_d.dot(&r);
        let g_pc = -g_d + p.n * (g_z / hit.denom);
        let g_n = g_normal_sum * (wgt * hit.flip) - d * (g_z / hit.denom);
        g_a += p.b.cross(&g_n);
        g_b += g_n.cross(&p.a);

        let g_center = rt * g_pc;
        let g_tu = rt * g_a;
        let g_tv = rt * g_b;
        let g_rot = s.tangent_u.cross(&g_tu) + s.tangent_v.cross(&g_tv);
        e[0..3].copy_from_slice(g_center.as_slice());
        e[3..6].copy_from_slice(g_rot.as_slice());
    }
    for (j, hit) in c.hits.iter().enumerate() {
        entries.push((hit.idx, out[j]));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose, ViewId};

    fn cam(w: usize, h: usize) -> CameraView {
        CameraView::new(
            ViewId(0),
            Intrinsics {
                fx: 20.0,
                fy: 20.0,
                cx: (w / 2) as f64,
                cy: (h / 2) as f64,
            },
            w,
            h,
            Pose::identity(),
        )
        .unwrap()
    }

    fn fronto(z: f64, scale: f64, opacity: f64, color: Rgb) -> Surfel {
        Surfel {
            center: Vec3::new(0.0, 0.0, z),
            tangent_u: Vec3::x(),
            tangent_v: Vec3::y(),
            scales: [scale, scale],
            opacity,
            color,
        }
    }

    #[test]
    fn intersect_center_and_one_sigma() {
        let s = fronto(2.0, 0.5, 1.0, [1.0; 3]);
        let hit = ray_splat_intersect(&Vec3::zeros(), &Vec3::z(), &s).unwrap();
        assert_eq!((hit.z, hit.weight), (2.0, 1.0));
        let mut s2 = s;
        s2.scales = [0.5, 0.2];
        let hit = ray_splat_intersect(&Vec3::new(0.5, 0.0, 0.0), &Vec3::z(), &s2).unwrap();
        assert!((hit.weight - (-0.5f64).exp()).abs() < 1e-15);
        assert!((hit.weight - 0.60653).abs() < 1e-5);
        assert!(ray_splat_intersect(&Vec3::zeros(), &Vec3::x(), &s).is_none());
    }

    #[test]
    fn single_opaque_surfel() {
        let cloud = SurfelCloud::new(vec![fronto(2.0, 10.0, 1.0, [1.0, 0.0, 0.0])]);
        let out = render(&cloud, &cam(8, 8), &RenderConfig::default());
        let (x, y) = (4, 4);
        assert_eq!(*out.color.get(x, y), [1.0, 0.0, 0.0]);
        assert_eq!(*out.alpha.get(x, y), 1.0);
        assert_eq!(out.median_depth.at(x, y), Some(2.0));
        assert_eq!(out.mean_depth.at(x, y), Some(2.0));
        assert_eq!(*out.normal.get(x, y), [0.0, 0.0, -1.0]);
        assert_eq!(out.contrib_area[0], 1 + out.contrib_area[0] - 1);
        assert!(out.visible[0]);
    }

    #[test]
    fn two_surfel_hand_case() {
        // huge scales make G ≈ 1 near the center; opacities give α exactly
        let cloud = SurfelCloud::new(vec![
            fronto(2.0, 1e6, 0.5, [0.0, 1.0, 0.0]),
            fronto(1.0, 1e6, 0.6, [1.0, 0.0, 0.0]),
        ]);
        let out = render(&cloud, &cam(8, 8), &RenderConfig::default());
        let c = out.color.get(4, 4);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.2).abs() < 1e-15 && c[2] == 0.0);
        assert_eq!(out.median_depth.at(4, 4), Some(1.0));
        // front surfel has the larger weight and is the median surfel
        assert_eq!(out.contrib_area[1], 64);
        assert_eq!(out.contrib_area[0], 0);
    }

    #[test]
    fn empty_cloud_renders_nothing() {
        let out = render(&SurfelCloud::default(), &cam(8, 8), &RenderConfig::default());
        assert!(out.alpha.data.iter().all(|&a| a == 0.0));
        assert_eq!(out.mean_depth.valid_count(), 0);
        assert_eq!(out.median_depth.valid_count(), 0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cloud = SurfelCloud::new(vec![fronto(2.0, 0.3, 0.8, [0.5; 3])]);
        let c = cam(8, 8);
        let cfg = RenderConfig::default();
        let fwd = render(&cloud, &c, &cfg);
        let g = render_backward(&cloud, &c, &cfg, &fwd, &RenderGrads::default()).unwrap();
        assert_eq!(g, SurfelGrads::zeros(1));
    }

    #[test]
    fn color_gradient_is_weight() {
        let cloud = SurfelCloud::new(vec![fronto(2.0, 0.3, 0.8, [0.5; 3])]);
        let c = cam(8, 8);
        let cfg = RenderConfig::default();
        let fwd = render(&cloud, &c, &cfg);
        let mut up = Grid::new(8, 8, [0.0; 3]);
        up.get_mut(5, 4)[0] = 1.0;
        let g = render_backward(
            &cloud,
            &c,
            &cfg,
            &fwd,
            &RenderGrads {
                color: Some(up),
                ..Default::default()
            },
        )
        .unwrap();
        // single surfel: weight = α·T with T = 1, and C_red = 0.5 α
        assert!((g.color[0][0] - *fwd.alpha.get(5, 4)).abs() < 1e-15);
        assert_eq!(g.color[0][1], 0.0);
    }

    #[test]
    fn mismatched_forward_is_rejected() {
        let cloud = SurfelCloud::new(vec![fronto(2.0, 0.3, 0.8, [0.5; 3])]);
        let cfg = RenderConfig::default();
        let fwd = render(&cloud, &cam(8, 8), &cfg);
        assert!(matches!(
            render_backward(&cloud, &cam(8, 6), &cfg, &fwd, &RenderGrads::default()),
            Err(Error::MismatchedForward(_))
        ));
    }

    fn weighted_sum(out: &RenderOutput, up: &RenderGrads) -> f64 {
        let mut total = 0.0;
        for i in 0..out.width * out.height {
            for c in 0..3 {
                total += up.color.as_ref().unwrap().data[i][c] * out.color.data[i][c];
                total += up.normal.as_ref().unwrap().data[i][c] * out.normal.data[i][c];
            }
            if out.mean_depth.valid[i] {
                total += up.mean_depth.as_ref().unwrap().data[i] * out.mean_depth.values[i];
            }
            total += up.alpha.as_ref().unwrap().data[i] * out.alpha.data[i];
        }
        total
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::gradcheck::{check_surfel_grads, smooth_random_scene};
        use rand::{Rng, SeedableRng};
        let (cloud, cam) = smooth_random_scene(7, 12, 16, 16);
        let cfg = RenderConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut rnd = |w: usize, h: usize| {
            Grid::from_vec(w, h, (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let up = RenderGrads {
            color: Some(
                Grid::from_vec(
                    16,
                    16,
                    (0..256)
                        .map(|i| [rnd(1, 1).data[0], (i % 7) as f64 * 0.1, -0.3])
                        .collect(),
                )
                .unwrap(),
            ),
            mean_depth: Some(rnd(16, 16)),
            normal: Some(
                Grid::from_vec(
                    16,
                    16,
                    (0..256)
                        .map(|_| [rnd(1, 1).data[0], rnd(1, 1).data[0], rnd(1, 1).data[0]])
                        .collect(),
                )
                .unwrap(),
            ),
            alpha: Some(rnd(16, 16)),
        };
        let fwd = render(&cloud, &cam, &cfg);
        let g = render_backward(&cloud, &cam, &cfg, &fwd, &up).unwrap();
        let report = check_surfel_grads(&cloud, &g, |c| weighted_sum(&render(c, &cam, &cfg), &up));
        assert!(report.passes(1e-4), "{report:?}");
    }
}
