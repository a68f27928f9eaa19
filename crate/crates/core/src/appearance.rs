//! Depth-guided appearance modulation.
//!
//! Every rendered pixel is lifted to 3D with its (detached) mean depth, the
//! point queries three axis-aligned mip-mapped feature planes, and a small MLP
//! combines those features with a per-image embedding into a per-channel gain
//! and bias applied to the rendered color.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nearest_pose, CameraView, ImageRgb, Pose, Vec3, ViewId};
use crate::metrics::{dssim_with_grad, l1_with_grad};
use crate::render::RenderOutput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppearanceConfig {
    /// Level-0 texels per plane side.
    pub resolution: usize,
    pub channels: usize,
    pub levels: usize,
    pub embedding_dim: usize,
    pub hidden: usize,
    /// Standard deviation of the random plane and embedding initialization.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        AppearanceConfig {
            resolution: 128,
            channels: 8,
            levels: 4,
            embedding_dim: 16,
            hidden: 32,
            init_std: 0.1,
            seed: 0,
        }
    }
}

impl AppearanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.levels == 0 || self.hidden == 0 {
            return Err(Error::ConfigInvalid("appearance sizes must be positive".into()));
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(1 << (self.levels - 1)) {
            return Err(Error::ConfigInvalid(format!(
                "resolution {} is not divisible by 2^{}",
                self.resolution,
                self.levels - 1
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        3 * self.channels + self.embedding_dim
    }
}

/// Three orthogonal feature planes (XY, XZ, YZ), each a mip pyramid whose
/// coarser levels are 2×2 averages of the level below.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMipField {
    pub resolution: usize,
    pub channels: usize,
    pub levels: usize,
    /// Minimum corner of the cubic bounding box.
    pub origin: Vec3,
    /// Side length of the cubic bounding box.
    pub extent: f64,
    /// `pyramids[plane][level]`, texel-major with `channels` values per texel.
    pyramids: [Vec<Vec<f64>>; 3],
}

/// One bilinear tap of a query: `(plane, level, texel, weight)`.
type Tap = (usize, usize, usize, f64);

const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

impl TriMipField {
    pub fn new(resolution: usize, channels: usize, levels: usize, origin: Vec3, extent: f64) -> Result<Self> {
        AppearanceConfig {
            resolution,
            channels,
            levels,
            ..Default::default()
        }
        .validate()?;
        if !(extent > 0.0) {
            return Err(Error::ConfigInvalid("feature box extent must be positive".into()));
        }
        let pyramid = || {
            (0..levels)
                .map(|l| vec![0.0; (resolution >> l).pow(2) * channels])
                .collect::<Vec<_>>()
        };
        Ok(TriMipField {
            resolution,
            channels,
            levels,
            origin,
            extent,
            pyramids: [pyramid(), pyramid(), pyramid()],
        })
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        self.resolution >> level
    }

    pub fn level(&self, plane: usize, level: usize) -> &[f64] {
        &self.pyramids[plane][level]
    }

    /// Learnable level-0 texels; call [`TriMipField::rebuild`] after editing.
    pub fn base_mut(&mut self, plane: usize) -> &mut [f64] {
        &mut self.pyramids[plane][0]
    }

    pub fn rebuild(&mut self) {
        let ch = self.channels;
        for plane in self.pyramids.iter_mut() {
            for l in 1..self.levels {
                let r = self.resolution >> l;
                let (fine, coarse) = plane.split_at_mut(l);
                let src = &fine[l - 1];
                let dst = &mut coarse[0];
                for y in 0..r {
                    for x in 0..r {
                        for c in 0..ch {
                            let at = |xx: usize, yy: usize| src[(yy * 2 * r + xx) * ch + c];
                            dst[(y * r + x) * ch + c] = 0.25
                                * (at(2 * x, 2 * y)
                                    + at(2 * x + 1, 2 * y)
                                    + at(2 * x, 2 * y + 1)
                                    + at(2 * x + 1, 2 * y + 1));
                        }
                    }
                }
            }
        }
    }

    /// Continuous mip level for a world-space footprint.
    pub fn mip_level(&self, footprint: f64) -> f64 {
        let l = (footprint * self.resolution as f64 / self.extent).log2();
        if l.is_nan() {
            return 0.0;
        }
        l.clamp(0.0, (self.levels - 1) as f64)
    }

    fn taps(&self, point: &Vec3, footprint: f64) -> Vec<Tap> {
        let u = ((point - self.origin) / self.extent).map(|v| v.clamp(0.0, 1.0));
        let level = self.mip_level(footprint);
        let lo = level.floor() as usize;
        let hi = (lo + 1).min(self.levels - 1);
        let f = level - lo as f64;
        let mut taps = Vec::with_capacity(24);
        for (plane, &(a, b)) in PLANE_AXES.iter().enumerate() {
            for (l, lw) in [(lo, 1.0 - f), (hi, f)] {
                if lw == 0.0 {
                    continue;
                }
                let r = self.level_resolution(l);
                let tx = (u[a] * r as f64 - 0.5).clamp(0.0, (r - 1) as f64);
                let ty = (u[b] * r as f64 - 0.5).clamp(0.0, (r - 1) as f64);
                let x0 = (tx.floor() as usize).min(r.saturating_sub(2));
                let y0 = (ty.floor() as usize).min(r.saturating_sub(2));
                let (fx, fy) = (tx - x0 as f64, ty - y0 as f64);
                let x1 = (x0 + 1).min(r - 1);
                let y1 = (y0 + 1).min(r - 1);
                for (x, y, w) in [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x1, y0, fx * (1.0 - fy)),
                    (x0, y1, (1.0 - fx) * fy),
                    (x1, y1, fx * fy),
                ] {
                    if w != 0.0 {
                        taps.push((plane, l, y * r + x, w * lw));
                    }
                }
            }
        }
        taps
    }

    fn gather(&self, taps: &[Tap]) -> Vec<f64> {
        let ch = self.channels;
        let mut out = vec![0.0; 3 * ch];
        for &(plane, l, texel, w) in taps {
            let src = &self.pyramids[plane][l][texel * ch..(texel + 1) * ch];
            for (o, v) in out[plane * ch..(plane + 1) * ch].iter_mut().zip(src) {
                *o += w * v;
            }
        }
        out
    }

    /// Concatenated XY, XZ and YZ features at `point` (clamped to the box).
    pub fn query(&self, point: &Vec3, footprint: f64) -> Vec<f64> {
        self.gather(&self.taps(point, footprint))
    }

    /// Pulls gradients from every level back onto the level-0 texels.
    fn fold_to_base(&self, level_grads: &[Vec<Vec<f64>>; 3]) -> [Vec<f64>; 3] {
        let ch = self.channels;
        let r0 = self.resolution;
        let fold = |grads: &Vec<Vec<f64>>| {
            let mut base = grads[0].clone();
            for (l, g) in grads.iter().enumerate().skip(1) {
                let r = r0 >> l;
                let share = 0.25f64.powi(l as i32);
                for y in 0..r0 {
                    for x in 0..r0 {
                        let coarse = ((y >> l) * r + (x >> l)) * ch;
                        for c in 0..ch {
                            base[(y * r0 + x) * ch + c] += share * g[coarse + c];
                        }
                    }
                }
            }
            base
        };
        [fold(&level_grads[0]), fold(&level_grads[1]), fold(&level_grads[2])]
    }
}

/// Two-layer perceptron with ReLU, mapping features plus embedding to
/// per-channel `(γ raw, β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToneMlp {
    pub input: usize,
    pub hidden: usize,
    /// `hidden × input`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `6 × hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

pub const MLP_OUTPUTS: usize = 6;
pub const GAIN_RANGE: f64 = 0.5;

impl ToneMlp {
    fn forward(&self, x: &[f64]) -> (Vec<f64>, [f64; MLP_OUTPUTS]) {
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &self.w1[j * self.input..(j + 1) * self.input];
                (self.b1[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).max(0.0)
            })
            .collect();
        let mut out = [0.0; MLP_OUTPUTS];
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.w2[k * self.hidden..(k + 1) * self.hidden];
            *o = self.b2[k] + row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
        }
        (h, out)
    }
}

/// Per-channel gain and bias from raw MLP outputs.
fn modulation(out: &[f64; MLP_OUTPUTS]) -> ([f64; 3], [f64; 3]) {
    let gamma = [0, 1, 2].map(|c| 1.0 + GAIN_RANGE * out[c].tanh());
    let beta = [out[3], out[4], out[5]];
    (gamma, beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceModel {
    pub config: AppearanceConfig,
    pub field: TriMipField,
    pub mlp: ToneMlp,
    pub embeddings: BTreeMap<ViewId, Vec<f64>>,
}

impl AppearanceModel {
    /// Randomly initialized planes, embeddings and hidden layer; the output
    /// head is zero so the model starts as the identity.
    pub fn new(config: &AppearanceConfig, views: &[ViewId], bounds: (Vec3, Vec3)) -> Result<Self> {
        config.validate()?;
        let (lo, hi) = bounds;
        let size = hi - lo;
        let extent = size.max() * 1.2;
        let extent = if extent > 0.0 { extent } else { 1.0 };
        let origin = (lo + hi) / 2.0 - Vec3::repeat(extent / 2.0);
        let mut field = TriMipField::new(config.resolution, config.channels, config.levels, origin, extent)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let init = Normal::new(0.0, config.init_std.max(0.0)).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        for p in 0..3 {
            for v in field.base_mut(p) {
                *v = init.sample(&mut rng);
            }
        }
        field.rebuild();
        let input = config.input_dim();
        let he = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("positive std");
        let w1 = (0..config.hidden * input).map(|_| he.sample(&mut rng)).collect();
        let embeddings = views
            .iter()
            .map(|&v| (v, (0..config.embedding_dim).map(|_| init.sample(&mut rng)).collect()))
            .collect();
        Ok(AppearanceModel {
            config: config.clone(),
            field,
            mlp: ToneMlp {
                input,
                hidden: config.hidden,
                w1,
                b1: vec![0.0; config.hidden],
                w2: vec![0.0; MLP_OUTPUTS * config.hidden],
                b2: vec![0.0; MLP_OUTPUTS],
            },
            embeddings,
        })
    }

    pub fn embedding(&self, view: ViewId) -> Result<&[f64]> {
        self.embeddings
            .get(&view)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownView(view))
    }

    /// `(γ, β)` for a world point seen with the given footprint.
    pub fn modulation_at(&self, embedding: &[f64], point: &Vec3, footprint: f64) -> ([f64; 3], [f64; 3]) {
        let mut x = self.field.query(point, footprint);
        x.extend_from_slice(embedding);
        modulation(&self.mlp.forward(&x).1)
    }

    pub fn param_count(&self) -> usize {
        3 * self.field.level(0, 0).len()
            + self.mlp.w1.len()
            + self.mlp.b1.len()
            + self.mlp.w2.len()
            + self.mlp.b2.len()
            + self.embeddings.values().map(Vec::len).sum::<usize>()
    }

    /// Visits every learnable tensor with its gradient, in a fixed order.
    /// The pyramid is rebuilt afterwards.
    pub fn update_with(&mut self, grads: &AppearanceGrads, mut f: impl FnMut(&str, &mut [f64], &[f64])) {
        for p in 0..3 {
            f(
                ["plane_xy", "plane_xz", "plane_yz"][p],
                self.field.base_mut(p),
                &grads.planes[p],
            );
        }
        f("mlp_w1", &mut self.mlp.w1, &grads.w1);
        f("mlp_b1", &mut self.mlp.b1, &grads.b1);
        f("mlp_w2", &mut self.mlp.w2, &grads.w2);
        f("mlp_b2", &mut self.mlp.b2, &grads.b2);
        let zero = vec![0.0; self.config.embedding_dim];
        for (id, e) in self.embeddings.iter_mut() {
            let g = grads.embeddings.get(id).unwrap_or(&zero);
            f(&format!("embedding_{}", id.0), e, g);
        }
        self.field.rebuild();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceGrads {
    pub planes: [Vec<f64>; 3],
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Only views that received gradient appear.
    pub embeddings: BTreeMap<ViewId, Vec<f64>>,
}

impl AppearanceGrads {
    pub fn zeros(model: &AppearanceModel) -> Self {
        let n = model.field.level(0, 0).len();
        AppearanceGrads {
            planes: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            w1: vec![0.0; model.mlp.w1.len()],
            b1: vec![0.0; model.mlp.b1.len()],
            w2: vec![0.0; model.mlp.w2.len()],
            b2: vec![0.0; model.mlp.b2.len()],
            embeddings: BTreeMap::new(),
        }
    }

    pub fn add_scaled(&mut self, other: &AppearanceGrads, k: f64) {
        let axpy = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += k * y);
        for p in 0..3 {
            axpy(&mut self.planes[p], &other.planes[p]);
        }
        axpy(&mut self.w1, &other.w1);
        axpy(&mut self.b1, &other.b1);
        axpy(&mut self.w2, &other.w2);
        axpy(&mut self.b2, &other.b2);
        for (id, g) in &other.embeddings {
            let e = self.embeddings.entry(*id).or_insert_with(|| vec![0.0; g.len()]);
            axpy(e, g);
        }
    }
}

/// Point and footprint for a pixel, if it carries geometry.
fn lift(rendered: &RenderOutput, camera: &CameraView, i: usize) -> Option<(Vec3, f64)> {
    if !(rendered.alpha.data[i] > 0.0) || !rendered.mean_depth.valid[i] {
        return None;
    }
    let w = rendered.width;
    let d = rendered.mean_depth.values[i];
    let p = camera
        .backproject(&Vector2::new((i % w) as f64, (i / w) as f64), d)
        .ok()?;
    Some((p, d / camera.intrinsics.fx))
}

fn check_render(rendered: &RenderOutput, camera: &CameraView) -> Result<()> {
    if rendered.width != camera.width || rendered.height != camera.height {
        return Err(Error::ShapeMismatch("render does not match camera".into()));
    }
    Ok(())
}

/// Modulated image using an explicit embedding.
pub fn tone_map_with(
    model: &AppearanceModel,
    embedding: &[f64],
    rendered: &RenderOutput,
    camera: &CameraView,
) -> Result<ImageRgb> {
    check_render(rendered, camera)?;
    if embedding.len() != model.config.embedding_dim {
        return Err(Error::ShapeMismatch(format!("embedding of length {}", embedding.len())));
    }
    let w = rendered.width;
    let mut out = rendered.color.clone();
    out.data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, px) in row.iter_mut().enumerate() {
            if let Some((p, fp)) = lift(rendered, camera, y * w + x) {
                let (g, b) = model.modulation_at(embedding, &p, fp);
                for c in 0..3 {
                    px[c] = (g[c] * px[c] + b[c]).clamp(0.0, 1.0);
                }
            }
        }
    });
    Ok(out)
}

pub fn tone_map(
    model: &AppearanceModel,
    view: ViewId,
    rendered: &RenderOutput,
    camera: &CameraView,
) -> Result<ImageRgb> {
    tone_map_with(model, model.embedding(view)?, rendered, camera)
}

pub struct ToneMapGrads {
    pub model: AppearanceGrads,
    pub embedding: Vec<f64>,
    /// Gradient routed onto the raw rendered color.
    pub rendered: ImageRgb,
}

/// Backpropagates `upstream = ∂L/∂I_t` through the tone map. Depth is
/// treated as a constant, so no gradient reaches geometry through this path.
pub fn tone_map_backward(
    model: &AppearanceModel,
    embedding: &[f64],
    rendered: &RenderOutput,
    camera: &CameraView,
    upstream: &ImageRgb,
) -> Result<ToneMapGrads> {
    check_render(rendered, camera)?;
    if upstream.width != rendered.width || upstream.height != rendered.height {
        return Err(Error::ShapeMismatch("upstream gradient does not match render".into()));
    }
    let (w, h) = (rendered.width, rendered.height);
    let mlp = &model.mlp;
    let (inp, hid) = (mlp.input, mlp.hidden);
    let feat = 3 * model.config.channels;

    struct RowGrads {
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
        emb: Vec<f64>,
        // per pixel: taps and feature gradient
        scatter: Vec<(Vec<Tap>, Vec<f64>)>,
        rendered: Vec<[f64; 3]>,
    }

    let rows: Vec<RowGrads> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut g = RowGrads {
                w1: vec![0.0; hid * inp],
                b1: vec![0.0; hid],
                w2: vec![0.0; MLP_OUTPUTS * hid],
                b2: vec![0.0; MLP_OUTPUTS],
                emb: vec![0.0; embedding.len()],
                scatter: Vec::new(),
                rendered: vec![[0.0; 3]; w],
            };
            for x in 0..w {
                let i = y * w + x;
                let up = upstream.data[i];
                let Some((p, fp)) = lift(rendered, camera, i) else {
                    g.rendered[x] = up;
                    continue;
                };
                let taps = model.field.taps(&p, fp);
                let mut input = model.field.gather(&taps);
                input.extend_from_slice(embedding);
                let (hidden, out) = mlp.forward(&input);
                let (gamma, beta) = modulation(&out);
                let ir = rendered.color.data[i];
                let mut d_out = [0.0; MLP_OUTPUTS];
                for c in 0..3 {
                    let v = gamma[c] * ir[c] + beta[c];
                    if !(0.0..=1.0).contains(&v) {
                        continue;
                    }
                    g.rendered[x][c] = gamma[c] * up[c];
                    d_out[c] = up[c] * ir[c] * GAIN_RANGE * (1.0 - out[c].tanh().powi(2));
                    d_out[3 + c] = up[c];
                }
                if d_out.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let mut d_hidden = vec![0.0; hid];
                for k in 0..MLP_OUTPUTS {
                    g.b2[k] += d_out[k];
                    for j in 0..hid {
                        g.w2[k * hid + j] += d_out[k] * hidden[j];
                        d_hidden[j] += d_out[k] * mlp.w2[k * hid + j];
                    }
                }
                let mut d_input = vec![0.0; inp];
                for j in 0..hid {
                    if hidden[j] <= 0.0 {
                        continue;
                    }
                    let dj = d_hidden[j];
                    g.b1[j] += dj;
                    let row = &mlp.w1[j * inp..(j + 1) * inp];
                    for t in 0..inp {
                        g.w1[j * inp + t] += dj * input[t];
                        d_input[t] += dj * row[t];
                    }
                }
                for (e, d) in g.emb.iter_mut().zip(&d_input[feat..]) {
                    *e += d;
                }
                d_input.truncate(feat);
                g.scatter.push((taps, d_input));
            }
            g
        })
        .collect();

    let ch = model.config.channels;
    let mut level_grads: [Vec<Vec<f64>>; 3] = std::array::from_fn(|p| {
        (0..model.config.levels)
            .map(|l| vec![0.0; model.field.level(p, l).len()])
            .collect()
    });
    let mut grads = AppearanceGrads::zeros(model);
    let mut emb = vec![0.0; embedding.len()];
    let mut rendered_grad = ImageRgb::new(w, h, [0.0; 3]);
    for (y, row) in rows.into_iter().enumerate() {
        let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut grads.w1, &row.w1);
        add(&mut grads.b1, &row.b1);
        add(&mut grads.w2, &row.w2);
        add(&mut grads.b2, &row.b2);
        add(&mut emb, &row.emb);
        rendered_grad.data[y * w..(y + 1) * w].copy_from_slice(&row.rendered);
        for (taps, d) in &row.scatter {
            for &(plane, l, texel, wt) in taps {
                let dst = &mut level_grads[plane][l][texel * ch..(texel + 1) * ch];
                for (o, v) in dst.iter_mut().zip(&d[plane * ch..(plane + 1) * ch]) {
                    *o += wt * v;
                }
            }
        }
    }
    grads.planes = model.field.fold_to_base(&level_grads);
    Ok(ToneMapGrads {
        model: grads,
        embedding: emb,
        rendered: rendered_grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceLoss {
    pub value: f64,
    pub l1: f64,
    pub dssim: f64,
    /// Gradient w.r.t. the tone-mapped image (L1 branch only).
    pub grad_toned: ImageRgb,
    /// Gradient w.r.t. the raw rendered image (D-SSIM branch only).
    pub grad_rendered: ImageRgb,
}

/// `λ·L1(I_t, I_gt) + (1 − λ)·D-SSIM(I_r, I_gt)`.
pub fn loss_app(toned: &ImageRgb, rendered: &ImageRgb, gt: &ImageRgb, lambda: f64) -> Result<AppearanceLoss> {
    if toned.width != rendered.width || toned.height != rendered.height {
        return Err(Error::ShapeMismatch(
            "tone-mapped and rendered images differ in size".into(),
        ));
    }
    let (l1, mut gt_grad) = l1_with_grad(toned, gt)?;
    let (dssim, mut gr_grad) = dssim_with_grad(rendered, gt)?;
    for p in gt_grad.data.iter_mut() {
        *p = p.map(|v| v * lambda);
    }
    for p in gr_grad.data.iter_mut() {
        *p = p.map(|v| v * (1.0 - lambda));
    }
    Ok(AppearanceLoss {
        value: lambda * l1 + (1.0 - lambda) * dssim,
        l1,
        dssim,
        grad_toned: gt_grad,
        grad_rendered: gr_grad,
    })
}

/// Embedding of the training view whose pose is closest to `test`.
pub fn assign_test_embedding(model: &AppearanceModel, test: &CameraView, train: &[CameraView]) -> Result<Vec<f64>> {
    let known: Vec<&CameraView> = train
        .iter()
        .filter(|c| model.embeddings.contains_key(&c.view_id))
        .collect();
    let poses: Vec<Pose> = known.iter().map(|c| c.pose).collect();
    let k = nearest_pose(&test.pose, &poses).ok_or(Error::NoTrainingViews)?;
    Ok(model.embeddings[&known[k].view_id].clone())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MKAP";
const CHECKPOINT_VERSION: u32 = 1;

fn write_tensor(out: &mut impl Write, name: &str, dims: &[usize], data: &[f64]) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(name.len() as u32)?;
    out.write_all(name.as_bytes())?;
    out.write_u32::<LittleEndian>(dims.len() as u32)?;
    for &d in dims {
        out.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in data {
        out.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_tensor(inp: &mut impl Read) -> std::io::Result<(String, Vec<usize>, Vec<f64>)> {
    let n = inp.read_u32::<LittleEndian>()? as usize;
    let mut name = vec![0u8; n];
    inp.read_exact(&mut name)?;
    let nd = inp.read_u32::<LittleEndian>()? as usize;
    let dims: Vec<usize> = (0..nd)
        .map(|_| inp.read_u64::<LittleEndian>().map(|d| d as usize))
        .collect::<std::io::Result<_>>()?;
    let len: usize = dims.iter().product();
    let mut data = vec![0.0; len];
    inp.read_f64_into::<LittleEndian>(&mut data)?;
    Ok((String::from_utf8_lossy(&name).into_owned(), dims, data))
}

impl AppearanceModel {
    /// Little-endian container of named tensors behind a versioned header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let c = &self.config;
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = vec![
            (
                "meta".into(),
                vec![5],
                vec![
                    c.resolution as f64,
                    c.channels as f64,
                    c.levels as f64,
                    c.embedding_dim as f64,
                    c.hidden as f64,
                ],
            ),
            (
                "box".into(),
                vec![4],
                vec![
                    self.field.origin.x,
                    self.field.origin.y,
                    self.field.origin.z,
                    self.field.extent,
                ],
            ),
        ];
        for (p, name) in ["plane_xy", "plane_xz", "plane_yz"].iter().enumerate() {
            tensors.push((
                name.to_string(),
                vec![c.resolution, c.resolution, c.channels],
                self.field.level(p, 0).to_vec(),
            ));
        }
        tensors.push(("mlp_w1".into(), vec![c.hidden, self.mlp.input], self.mlp.w1.clone()));
        tensors.push(("mlp_b1".into(), vec![c.hidden], self.mlp.b1.clone()));
        tensors.push(("mlp_w2".into(), vec![MLP_OUTPUTS, c.hidden], self.mlp.w2.clone()));
        tensors.push(("mlp_b2".into(), vec![MLP_OUTPUTS], self.mlp.b2.clone()));
        for (id, e) in &self.embeddings {
            tensors.push((format!("embedding/{}", id.0), vec![e.len()], e.clone()));
        }
        let io_err = |e| Error::io(format!("writing {}", path.display()), e);
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut out = std::io::BufWriter::new(file);
        let write = |out: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
            out.write_all(CHECKPOINT_MAGIC)?;
            out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
            out.write_u32::<LittleEndian>(tensors.len() as u32)?;
            for (name, dims, data) in &tensors {
                write_tensor(out, name, dims, data)?;
            }
            out.flush()
        };
        write(&mut out).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            format: "appearance checkpoint",
            reason,
        };
        let file = std::fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        let mut inp = std::io::BufReader::new(file);
        let io_err = |e| Error::io(format!("reading {}", path.display()), e);
        let mut magic = [0u8; 4];
        inp.read_exact(&mut magic).map_err(io_err)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = inp.read_u32::<LittleEndian>().map_err(io_err)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = inp.read_u32::<LittleEndian>().map_err(io_err)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let (name, dims, data) = read_tensor(&mut inp).map_err(io_err)?;
            tensors.insert(name, (dims, data));
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .map(|t| t.1)
                .ok_or_else(|| bad(format!("missing tensor {name}")))
        };
        let meta = take("meta")?;
        let bx = take("box")?;
        if meta.len() != 5 || bx.len() != 4 {
            return Err(bad("malformed header tensors".into()));
        }
        let config = AppearanceConfig {
            resolution: meta[0] as usize,
            channels: meta[1] as usize,
            levels: meta[2] as usize,
            embedding_dim: meta[3] as usize,
            hidden: meta[4] as usize,
            ..Default::default()
        };
        let mut field = TriMipField::new(
            config.resolution,
            config.channels,
            config.levels,
            Vec3::new(bx[0], bx[1], bx[2]),
            bx[3],
        )?;
        for (p, name) in ["plane_xy", "plane_xz", "plane_yz"].iter().enumerate() {
            let data = take(name)?;
            if data.len() != field.level(p, 0).len() {
                return Err(bad(format!("{name} has the wrong size")));
            }
            field.base_mut(p).copy_from_slice(&data);
        }
        field.rebuild();
        let input = config.input_dim();
        let mlp = ToneMlp {
            input,
            hidden: config.hidden,
            w1: take("mlp_w1")?,
            b1: take("mlp_b1")?,
            w2: take("mlp_w2")?,
            b2: take("mlp_b2")?,
        };
        if mlp.w1.len() != input * config.hidden
            || mlp.b1.len() != config.hidden
            || mlp.w2.len() != MLP_OUTPUTS * config.hidden
            || mlp.b2.len() != MLP_OUTPUTS
        {
            return Err(bad("mlp tensors have the wrong size".into()));
        }
        let mut embeddings = BTreeMap::new();
        for (name, (_, data)) in tensors {
            if let Some(id) = name.strip_prefix("embedding/") {
                let id: u32 = id.parse().map_err(|_| bad(format!("bad tensor name {name}")))?;
                if data.len() != config.embedding_dim {
                    return Err(bad(format!("{name} has the wrong size")));
                }
                embeddings.insert(ViewId(id), data);
            }
        }
        Ok(AppearanceModel {
            config,
            field,
            mlp,
            embeddings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Grid;
    use crate::gradcheck::{check_vector_grad, smooth_random_scene, GradReport};
    use crate::render::{render, RenderConfig};
    use rand::Rng;

    fn small_config() -> AppearanceConfig {
        AppearanceConfig {
            resolution: 16,
            channels: 2,
            levels: 3,
            embedding_dim: 4,
            hidden: 8,
            init_std: 0.5,
            seed: 3,
        }
    }

    fn unit_box() -> (Vec3, Vec3) {
        (Vec3::new(-1.0, -1.0, 0.0), Vec3::new(1.0, 1.0, 4.0))
    }

    #[test]
    fn constant_field_and_texel_centers() {
        let mut f = TriMipField::new(8, 2, 3, Vec3::zeros(), 2.0).unwrap();
        for p in 0..3 {
            f.base_mut(p)
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = if i % 2 == 0 { 0.3 } else { -0.7 });
        }
        f.rebuild();
        let q = f.query(&Vec3::new(0.3, 1.7, 0.9), 0.37);
        assert!(q
            .chunks(2)
            .all(|c| (c[0] - 0.3).abs() < 1e-15 && (c[1] + 0.7).abs() < 1e-15));

        for p in 0..3 {
            f.base_mut(p)
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
        }
        f.rebuild();
        // texel (3, 5) of the XY plane at level 0, any z
        let point = Vec3::new(3.5 / 8.0 * 2.0, 5.5 / 8.0 * 2.0, 0.4);
        let q = f.query(&point, 1e-3);
        let base = f.level(0, 0);
        assert_eq!(q[0], base[(5 * 8 + 3) * 2]);
        assert_eq!(q[1], base[(5 * 8 + 3) * 2 + 1]);
        assert_eq!(f.mip_level(2.0 / 8.0), 0.0);
        assert_eq!(f.mip_level(1e-9), 0.0);

        // two texels wide selects level 1 exactly
        assert_eq!(f.mip_level(2.0 * 2.0 / 8.0), 1.0);
        let q = f.query(&point, 0.5);
        let r = 4.0;
        let (tx, ty) = (point.x / 2.0 * r - 0.5, point.y / 2.0 * r - 0.5);
        let l1 = f.level(0, 1);
        let (x0, y0) = (tx.floor() as usize, ty.floor() as usize);
        let (fx, fy) = (tx - x0 as f64, ty - y0 as f64);
        let at = |x: usize, y: usize| l1[(y * 4 + x) * 2];
        let expect = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
            + at(x0 + 1, y0) * fx * (1.0 - fy)
            + at(x0, y0 + 1) * (1.0 - fx) * fy
            + at(x0 + 1, y0 + 1) * fx * fy;
        assert!((q[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn mip_levels_are_averages() {
        let mut f = TriMipField::new(8, 1, 4, Vec3::zeros(), 1.0).unwrap();
        f.base_mut(1).iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        f.rebuild();
        assert_eq!(f.level(1, 1)[0], (0.0 + 1.0 + 8.0 + 9.0) / 4.0);
        let mean = (0..64).sum::<usize>() as f64 / 64.0;
        assert!((f.level(1, 3)[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn fresh_model_is_identity() {
        let (cloud, cam) = smooth_random_scene(5, 6, 12, 10);
        let out = render(&cloud, &cam, &RenderConfig::default());
        let model = AppearanceModel::new(&AppearanceConfig::default(), &[ViewId(0)], unit_box()).unwrap();
        let toned = tone_map(&model, ViewId(0), &out, &cam).unwrap();
        assert_eq!(toned, out.color);
        assert!(matches!(
            tone_map(&model, ViewId(9), &out, &cam),
            Err(Error::UnknownView(_))
        ));
    }

    #[test]
    fn forced_gain_scales_gray() {
        let (cloud, cam) = smooth_random_scene(5, 6, 12, 10);
        let mut out = render(&cloud, &cam, &RenderConfig::default());
        out.color.data.fill([0.5; 3]);
        let mut model = AppearanceModel::new(&small_config(), &[ViewId(0)], unit_box()).unwrap();
        // tanh(raw) = 0.4 gives γ = 1.2
        model.mlp.b2 = vec![0.4f64.atanh(), 0.4f64.atanh(), 0.4f64.atanh(), 0.0, 0.0, 0.0];
        let toned = tone_map(&model, ViewId(0), &out, &cam).unwrap();
        for (i, p) in toned.data.iter().enumerate() {
            let expect = if out.alpha.data[i] > 0.0 && out.mean_depth.valid[i] {
                0.6
            } else {
                0.5
            };
            assert!(p.iter().all(|v| (v - expect).abs() < 1e-12));
        }
    }

    fn scramble(model: &mut AppearanceModel, rng: &mut impl Rng) {
        for v in model.mlp.w2.iter_mut().chain(model.mlp.b1.iter_mut()) {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in model.mlp.b2.iter_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
    }

    #[test]
    fn tone_map_gradients_match_finite_differences() {
        let (cloud, cam) = smooth_random_scene(11, 5, 10, 8);
        let mut out = render(&cloud, &cam, &RenderConfig::default());
        // keep colors away from the clamp so the loss is smooth
        for p in out.color.data.iter_mut() {
            *p = p.map(|v| 0.25 + 0.5 * v);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = AppearanceModel::new(&small_config(), &[ViewId(0)], unit_box()).unwrap();
        scramble(&mut model, &mut rng);
        let weights: Vec<[f64; 3]> = (0..out.color.len())
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let upstream = Grid::from_vec(10, 8, weights.clone()).unwrap();
        let loss = |m: &AppearanceModel, color: &ImageRgb| {
            let mut o = out.clone();
            o.color = color.clone();
            let t = tone_map(m, ViewId(0), &o, &cam).unwrap();
            t.data
                .iter()
                .zip(&weights)
                .map(|(p, w)| p[0] * w[0] + p[1] * w[1] + p[2] * w[2])
                .sum::<f64>()
        };
        let emb = model.embedding(ViewId(0)).unwrap().to_vec();
        let g = tone_map_backward(&model, &emb, &out, &cam, &upstream).unwrap();
        let mut report = GradReport::default();

        let m = model.clone();
        report.merge(check_vector_grad(
            &emb,
            &g.embedding,
            |e| {
                let mut mm = m.clone();
                mm.embeddings.insert(ViewId(0), e.to_vec());
                loss(&mm, &out.color)
            },
            "embedding",
        ));
        report.merge(check_vector_grad(
            &m.mlp.w2,
            &g.model.w2,
            |v| {
                let mut mm = m.clone();
                mm.mlp.w2 = v.to_vec();
                loss(&mm, &out.color)
            },
            "w2",
        ));
        report.merge(check_vector_grad(
            &m.mlp.w1,
            &g.model.w1,
            |v| {
                let mut mm = m.clone();
                mm.mlp.w1 = v.to_vec();
                loss(&mm, &out.color)
            },
            "w1",
        ));
        report.merge(check_vector_grad(
            &m.mlp.b1,
            &g.model.b1,
            |v| {
                let mut mm = m.clone();
                mm.mlp.b1 = v.to_vec();
                loss(&mm, &out.color)
            },
            "b1",
        ));
        report.merge(check_vector_grad(
            &m.mlp.b2,
            &g.model.b2,
            |v| {
                let mut mm = m.clone();
                mm.mlp.b2 = v.to_vec();
                loss(&mm, &out.color)
            },
            "b2",
        ));
        // plane texels: probe only those that receive gradient, plus a few that do not
        for p in 0..3 {
            let base = m.field.level(p, 0).to_vec();
            let touched: Vec<usize> = (0..base.len())
                .filter(|&i| g.model.planes[p][i] != 0.0)
                .take(40)
                .collect();
            assert!(!touched.is_empty());
            for &i in touched.iter().chain([0usize, base.len() - 1].iter()) {
                let numeric = crate::gradcheck::central_difference(
                    |h| {
                        let mut mm = m.clone();
                        mm.field.base_mut(p)[i] += h;
                        mm.field.rebuild();
                        loss(&mm, &out.color)
                    },
                    crate::gradcheck::FD_STEP,
                );
                report.record(|| format!("plane {p} [{i}]"), g.model.planes[p][i], numeric);
            }
        }
        let color: Vec<f64> = out.color.data.iter().flatten().copied().collect();
        let analytic: Vec<f64> = g.rendered.data.iter().flatten().copied().collect();
        report.merge(check_vector_grad(
            &color,
            &analytic,
            |v| {
                loss(
                    &m,
                    &Grid::from_vec(10, 8, v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).unwrap(),
                )
            },
            "rendered",
        ));
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn loss_app_values_and_routing() {
        let a = Grid::from_vec(2, 1, vec![[0.2, 0.4, 0.6], [0.9, 0.1, 0.5]]).unwrap();
        let zero = loss_app(&a, &a, &a, 0.8).unwrap();
        assert_eq!(zero.value, 0.0);
        let toned = ImageRgb::new(1, 1, [0.9; 3]);
        let gt = ImageRgb::new(1, 1, [0.5; 3]);
        let l = loss_app(&toned, &gt, &gt, 1.0).unwrap();
        assert!((l.value - 0.4).abs() < 1e-12);
        assert!(l.grad_rendered.data.iter().flatten().all(|v| *v == 0.0));
        // the D-SSIM branch alone feeds the rendered image
        let b = Grid::from_vec(2, 1, vec![[0.3, 0.1, 0.6], [0.2, 0.8, 0.4]]).unwrap();
        let l = loss_app(&a, &b, &a, 0.0).unwrap();
        assert!(l.grad_toned.data.iter().flatten().all(|v| *v == 0.0));
        assert!(l.grad_rendered.data.iter().flatten().any(|v| *v != 0.0));
        assert!(matches!(loss_app(&a, &toned, &gt, 0.8), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn test_embedding_assignment() {
        let cam = |id: u32, eye: Vec3| {
            CameraView::new(
                ViewId(id),
                crate::geometry::Intrinsics {
                    fx: 10.0,
                    fy: 10.0,
                    cx: 4.5,
                    cy: 4.5,
                },
                10,
                10,
                Pose::look_at(eye, Vec3::zeros(), Vec3::z()),
            )
            .unwrap()
        };
        let train = vec![
            cam(0, Vec3::new(3.0, 0.0, 1.0)),
            cam(1, Vec3::new(0.0, 3.0, 1.0)),
            cam(2, Vec3::new(-3.0, 0.0, 1.0)),
        ];
        let ids: Vec<ViewId> = train.iter().map(|c| c.view_id).collect();
        let model = AppearanceModel::new(&small_config(), &ids, unit_box()).unwrap();
        let test = cam(7, Vec3::new(0.0, 3.0, 1.0));
        assert_eq!(
            assign_test_embedding(&model, &test, &train).unwrap(),
            model.embeddings[&ViewId(1)]
        );
        assert_eq!(
            assign_test_embedding(&model, &test, &train[2..]).unwrap(),
            model.embeddings[&ViewId(2)]
        );
        assert!(matches!(
            assign_test_embedding(&model, &test, &[]),
            Err(Error::NoTrainingViews)
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = AppearanceModel::new(&small_config(), &[ViewId(0), ViewId(4)], unit_box()).unwrap();
        scramble(&mut model, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("app.bin");
        model.save(&path).unwrap();
        let back = AppearanceModel::load(&path).unwrap();
        assert_eq!(back.field, model.field);
        assert_eq!(back.mlp, model.mlp);
        assert_eq!(back.embeddings, model.embeddings);
        std::fs::write(&path, b"nope").unwrap();
        assert!(AppearanceModel::load(&path).is_err());
    }
}
