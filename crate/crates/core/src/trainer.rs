//! Two-stage surfel optimization: monocular geometric priors first, then
//! multi-view refined depth, with a photometric term throughout.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::{
    assign_test_embedding, loss_app, tone_map_backward, tone_map_with, AppearanceConfig, AppearanceGrads,
    AppearanceModel,
};
use crate::dense_init::MergedCloud;
use crate::densify::{densify_step, voxel_density, DensifyConfig, DensifyStats};
use crate::error::{Error, Result};
use crate::geo_refine::{
    align_inverse_depth, loss_depth, loss_normal, loss_scale, stage1_loss, DepthLoss, LossWeights, MonoPrior, ScaleLoss,
};
use crate::geometry::{CameraView, DepthMap, Grid, ImageRgb, Vec3, ViewId};
use crate::metrics::{dssim_with_grad, l1_with_grad};
use crate::mvs::{
    geometric_filter, loss_mv, patchmatch_refine, restore_with_mono, stage2_loss, FilterConfig, PatchMatchConfig,
    RefinedDepth,
};
use crate::render::{render, render_backward, RenderConfig, RenderOutput, SurfelGrads};
use crate::sfm::{build_match_graph, neighbor_views, SceneGraph, SparseScene};
use crate::spatial::{pca_normals, PointGrid};
use crate::surfel::{Surfel, SurfelCloud};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Initial center rate as a fraction of the scene extent.
    pub center: f64,
    /// Center rate at the last iteration, same units; decays log-linearly.
    pub center_final: f64,
    pub rotation: f64,
    /// Applies to log-scales.
    pub scale: f64,
    /// Applies to logit-opacity.
    pub opacity: f64,
    pub color: f64,
    pub appearance: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            center: 1.6e-4,
            center_final: 1.6e-6,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-3,
            color: 2.5e-3,
            appearance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_iters: usize,
    /// First iteration of the multi-view stage; at or past `total_iters`
    /// the run stays in the monocular stage.
    pub stage_switch_iter: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// `λ_d` reached at the stage switch, decaying log-linearly from `weights.lambda_d`.
    pub lambda_d_final: f64,
    pub lr: LearningRates,
    pub use_appearance: bool,
    pub appearance: AppearanceConfig,
    pub densify: DensifyConfig,
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_interval: usize,
    /// Iterations between refreshes of the multi-view targets; 0 refreshes only at the switch.
    pub mvs_refresh_interval: usize,
    pub mvs_neighbors: usize,
    pub patchmatch: PatchMatchConfig,
    pub filter: FilterConfig,
    pub restore_patch: usize,
    /// Restoration fit tolerance relative to the median filtered depth.
    pub restore_rel_err: f64,
    pub init_neighbors: usize,
    pub init_opacity: f64,
    /// Iterations between checkpoints written by `train_from` callers; 0 disables them.
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 2000,
            stage_switch_iter: 1000,
            batch_size: 4,
            weights: LossWeights::default(),
            lambda_d_final: 0.005,
            lr: LearningRates::default(),
            use_appearance: true,
            appearance: AppearanceConfig::default(),
            densify: DensifyConfig {
                max_surfels: 6000,
                ..DensifyConfig::default()
            },
            densify_from: 100,
            densify_until: 1000,
            densify_interval: 100,
            mvs_refresh_interval: 500,
            mvs_neighbors: 4,
            patchmatch: PatchMatchConfig::default(),
            filter: FilterConfig::default(),
            restore_patch: 16,
            restore_rel_err: 0.01,
            init_neighbors: 16,
            init_opacity: 0.5,
            checkpoint_interval: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.appearance.validate()?;
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.total_iters > 0 && (self.stage_switch_iter == 0 || self.stage_switch_iter > self.total_iters) {
            return bad("stage_switch_iter must lie in [1, total_iters]");
        }
        if self.total_iters > 0 && self.densify_until > self.total_iters {
            return bad("densify_until must not exceed total_iters");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.densify_interval == 0 {
            return bad("densify_interval must be at least 1");
        }
        if !(self.lambda_d_final >= 0.0) || self.lambda_d_final > self.weights.lambda_d {
            return bad("lambda_d_final must lie in [0, lambda_d]");
        }
        let lr = &self.lr;
        let rates = [
            lr.center,
            lr.center_final,
            lr.rotation,
            lr.scale,
            lr.opacity,
            lr.color,
            lr.appearance,
        ];
        if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return bad("learning rates must be finite and non-negative");
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad("init_opacity must lie in (0, 1)");
        }
        if self.init_neighbors < 3 || self.mvs_neighbors == 0 {
            return bad("init_neighbors must be at least 3 and mvs_neighbors at least 1");
        }
        if self.restore_patch < 8 || !(self.restore_rel_err > 0.0) {
            return bad("restore_patch must be at least 8 and restore_rel_err positive");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn in_stage2(&self, iter: usize) -> bool {
        iter >= self.stage_switch_iter
    }

    /// Depth-prior weight at `iter`; zero once the multi-view stage begins.
    pub fn lambda_d_at(&self, iter: usize) -> f64 {
        if self.in_stage2(iter) {
            return 0.0;
        }
        lambda_d_schedule(iter, self.stage_switch_iter, self.weights.lambda_d, self.lambda_d_final)
    }

    /// True when `iter` is due for a checkpoint (counting completed iterations).
    pub fn checkpoint_due(&self, completed: usize) -> bool {
        self.checkpoint_interval > 0 && completed.is_multiple_of(self.checkpoint_interval)
    }

    fn center_lr(&self, iter: usize, extent: f64) -> f64 {
        let (a, b) = (self.lr.center, self.lr.center_final);
        if self.total_iters <= 1 || a <= 0.0 || b <= 0.0 {
            return a * extent;
        }
        let t = (iter as f64 / (self.total_iters - 1) as f64).min(1.0);
        (a.ln() * (1.0 - t) + b.ln() * t).exp() * extent
    }

    /// A cached multi-view result computed at `at` has expired by `iter`.
    fn mvs_stale(&self, at: usize, iter: usize) -> bool {
        self.mvs_refresh_interval > 0 && iter - at >= self.mvs_refresh_interval
    }

    fn densify_due(&self, iter: usize) -> bool {
        iter >= self.densify_from && iter < self.densify_until && (iter + 1).is_multiple_of(self.densify_interval)
    }
}

/// `start·(end/start)^(min(iter, len)/len)`: log-linear decay over the first stage.
pub fn lambda_d_schedule(iter: usize, stage1_len: usize, start: f64, end: f64) -> f64 {
    if stage1_len == 0 || start <= 0.0 {
        return start;
    }
    let t = iter.min(stage1_len) as f64 / stage1_len as f64;
    start * (end / start).powf(t)
}

pub fn total_loss(geo: f64, app: f64) -> Result<f64> {
    let total = geo + app;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss(format!("geometric {geo}, appearance {app}")));
    }
    Ok(total)
}

/// Everything the optimizer reads but never changes.
#[derive(Debug, Clone)]
pub struct TrainData {
    /// Training views with images, ascending by id.
    pub views: Vec<CameraView>,
    pub sparse: SparseScene,
    /// Inverse-depth priors aligned to the SfM scale.
    pub aligned: BTreeMap<ViewId, MonoPrior>,
    pub mono_depth: BTreeMap<ViewId, DepthMap>,
    pub dense: Option<MergedCloud>,
    pub graph: SceneGraph,
    /// Radius of the camera centers around their mean, padded by 10%.
    pub extent: f64,
}

impl TrainData {
    pub fn new(
        sparse: SparseScene,
        mut views: Vec<CameraView>,
        mono: &BTreeMap<ViewId, MonoPrior>,
        dense: Option<MergedCloud>,
    ) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::NoTrainingViews);
        }
        views.sort_by_key(|v| v.view_id);
        for v in &views {
            if v.image().is_none() {
                return Err(Error::InvalidScene(format!("training view {} has no image", v.view_id)));
            }
        }
        let mut aligned = BTreeMap::new();
        let mut mono_depth = BTreeMap::new();
        for v in &views {
            let Some(prior) = mono.get(&v.view_id) else {
                continue;
            };
            match sparse
                .sparse_depths(v.view_id)
                .and_then(|s| align_inverse_depth(prior, &s))
            {
                Ok(a) => {
                    mono_depth.insert(v.view_id, a.inverse_depth.to_depth());
                    aligned.insert(v.view_id, a.inverse_depth);
                }
                Err(e) => warn!("monocular prior of view {} dropped: {e}", v.view_id),
            }
        }
        if aligned.is_empty() {
            warn!("no usable monocular priors; the depth-prior term is disabled");
        }
        let centers: Vec<Vec3> = views.iter().map(|v| v.center()).collect();
        let mean = centers.iter().sum::<Vec3>() / centers.len() as f64;
        let radius = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
        let extent = if radius > 0.0 { 1.1 * radius } else { 1.0 };
        let graph = build_match_graph(&sparse);
        Ok(TrainData {
            views,
            sparse,
            aligned,
            mono_depth,
            dense,
            graph,
            extent,
        })
    }

    pub fn view(&self, id: ViewId) -> Option<&CameraView> {
        self.views.iter().find(|v| v.view_id == id)
    }

    /// Neighbor views for multi-view matching, best match first.
    pub fn neighbors(&self, id: ViewId, k: usize) -> Vec<&CameraView> {
        let ids = neighbor_views(&self.graph, id, k).unwrap_or_default();
        ids.iter().filter_map(|n| self.view(*n)).collect()
    }
}

const PARAMS: usize = 12;

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

/// Bias-corrected Adam step for one scalar; returns the increment.
fn adam(m: &mut f64, v: &mut f64, g: f64, lr: f64, t: i32) -> f64 {
    *m = BETA1 * *m + (1.0 - BETA1) * g;
    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
    let mh = *m / (1.0 - BETA1.powi(t));
    let vh = *v / (1.0 - BETA2.powi(t));
    -lr * mh / (vh.sqrt() + ADAM_EPS)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Optimizer state. Scales are stepped in log space and opacity in logit
/// space, so both stay in range without clipping.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Number of completed iterations.
    pub iter: usize,
    pub cloud: SurfelCloud,
    pub appearance: Option<AppearanceModel>,
    /// Restored multi-view depth per view with the iteration it was computed at.
    pub mvs_targets: BTreeMap<ViewId, (usize, RefinedDepth)>,
    pub extent: f64,
    /// PatchMatch output per view, shared as neighbor evidence by the filter.
    refined: BTreeMap<ViewId, (usize, DepthMap)>,
    surfel_moments: Moments,
    app_moments: BTreeMap<String, Moments>,
    stats: DensifyStats,
}

impl PartialEq for TrainState {
    fn eq(&self, other: &Self) -> bool {
        self.iter == other.iter
            && self.cloud == other.cloud
            && self.appearance == other.appearance
            && self.mvs_targets == other.mvs_targets
            && self.refined == other.refined
            && self.surfel_moments == other.surfel_moments
            && self.app_moments == other.app_moments
    }
}

impl TrainState {
    pub fn new(cloud: SurfelCloud, appearance: Option<AppearanceModel>, extent: f64) -> Self {
        TrainState {
            iter: 0,
            surfel_moments: Moments::zeros(cloud.len() * PARAMS),
            stats: DensifyStats::new(&cloud),
            cloud,
            appearance,
            mvs_targets: BTreeMap::new(),
            refined: BTreeMap::new(),
            extent,
            app_moments: BTreeMap::new(),
        }
    }

    /// Writes the cloud, the appearance model and the iteration counter.
    /// Optimizer moments are not stored; a resumed run restarts them.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        self.cloud.save_ply(&dir.join("surfels.ply"))?;
        if let Some(app) = &self.appearance {
            app.save(&dir.join("appearance.bin"))?;
        }
        let meta = serde_json::json!({ "iter": self.iter, "extent": self.extent });
        let path = dir.join("state.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cloud = SurfelCloud::load_ply(&dir.join("surfels.ply"))?;
        let app_path = dir.join("appearance.bin");
        let appearance = if app_path.exists() {
            Some(AppearanceModel::load(&app_path)?)
        } else {
            None
        };
        let path = dir.join("state.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let meta: serde_json::Value = serde_json::from_str(&text)?;
        let field = |k: &str| {
            meta.get(k).cloned().ok_or_else(|| Error::Format {
                format: "state.json",
                reason: format!("missing {k}"),
            })
        };
        let iter = field("iter")?.as_u64().unwrap_or(0) as usize;
        let extent = field("extent")?.as_f64().unwrap_or(1.0);
        let mut state = TrainState::new(cloud, appearance, extent);
        state.iter = iter;
        Ok(state)
    }
}

/// Loss components averaged over the batch, as written to the CSV log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iter: usize,
    #[serde(rename = "L_d")]
    pub l_d: f64,
    #[serde(rename = "L_n")]
    pub l_n: f64,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_mv")]
    pub l_mv: f64,
    #[serde(rename = "L_app")]
    pub l_app: f64,
    pub total: f64,
    #[serde(rename = "#surfels")]
    pub surfels: usize,
    pub seconds: f64,
}

impl StepLog {
    fn add_scaled(&mut self, o: &StepLog, k: f64) {
        self.l_d += k * o.l_d;
        self.l_n += k * o.l_n;
        self.l_s += k * o.l_s;
        self.l_mv += k * o.l_mv;
        self.l_app += k * o.l_app;
        self.total += k * o.total;
    }
}

pub fn write_log_csv(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(format!("writing {}", path.display()), e.into()))?;
    for row in log {
        w.serialize(row)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e.into()))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Surfels seeded on the SfM points and any merged dense points: normals
/// from local PCA, isotropic scale equal to the mean neighbor distance.
pub fn initial_cloud(data: &TrainData, cfg: &TrainConfig) -> Result<SurfelCloud> {
    let mut points: Vec<Vec3> = data.sparse.points.iter().map(|p| p.position).collect();
    let mut colors: Vec<[f64; 3]> = data.sparse.points.iter().map(|p| p.color).collect();
    if let Some(d) = &data.dense {
        points.extend(d.positions.iter().copied());
        colors.extend(d.colors.iter().copied());
    }
    if points.len() < 4 {
        return Err(Error::InvalidScene(format!(
            "{} seed points are too few to initialize",
            points.len()
        )));
    }
    let eye = data.views.iter().map(|v| v.center()).sum::<Vec3>() / data.views.len() as f64;
    let grid = PointGrid::auto(points);
    let frames = pca_normals(&grid, cfg.init_neighbors);
    let floor = 1e-4 * data.extent;
    let surfels = grid
        .points()
        .iter()
        .zip(&frames)
        .zip(&colors)
        .map(|((p, (n, d)), c)| {
            let n = if n.dot(&(eye - p)) < 0.0 { -n } else { *n };
            let s = d.max(floor);
            let c = c.map(|v| v.clamp(0.0, 1.0));
            Surfel::oriented(*p, n, [s, s], cfg.init_opacity, c)
        })
        .collect();
    Ok(SurfelCloud::new(surfels))
}

/// Fresh optimizer state for `data`.
pub fn init_state(data: &TrainData, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    let cloud = initial_cloud(data, cfg)?;
    let appearance = if cfg.use_appearance {
        let ids: Vec<ViewId> = data.views.iter().map(|v| v.view_id).collect();
        let bounds = cloud.bounds().ok_or(Error::EmptyCloud)?;
        Some(AppearanceModel::new(&cfg.appearance, &ids, bounds)?)
    } else {
        None
    };
    Ok(TrainState::new(cloud, appearance, data.extent))
}

/// Views of the batch at `iter`: consecutive slices of per-epoch shuffles.
pub fn batch_views(data: &TrainData, cfg: &TrainConfig, iter: usize) -> Vec<ViewId> {
    let n = data.views.len();
    let b = cfg.batch_size.min(n);
    let mut cache: Option<(usize, Vec<ViewId>)> = None;
    (0..b)
        .map(|j| {
            let k = iter * b + j;
            let epoch = k / n;
            if cache.as_ref().map(|c| c.0) != Some(epoch) {
                let mut ids: Vec<ViewId> = data.views.iter().map(|v| v.view_id).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                ids.shuffle(&mut rng);
                cache = Some((epoch, ids));
            }
            cache.as_ref().unwrap().1[k % n]
        })
        .collect()
}

struct ViewStep {
    log: StepLog,
    grads: SurfelGrads,
    app: Option<AppearanceGrads>,
    out: RenderOutput,
}

fn photometric(
    state: &TrainState,
    cam: &CameraView,
    gt: &ImageRgb,
    out: &RenderOutput,
    lambda: f64,
) -> Result<(f64, ImageRgb, Option<AppearanceGrads>)> {
    match &state.appearance {
        Some(model) => {
            let emb = model.embedding(cam.view_id)?;
            let toned = tone_map_with(model, emb, out, cam)?;
            let loss = loss_app(&toned, &out.color, gt, lambda)?;
            let tg = tone_map_backward(model, emb, out, cam, &loss.grad_toned)?;
            let mut grad = loss.grad_rendered;
            for (g, t) in grad.data.iter_mut().zip(&tg.rendered.data) {
                for c in 0..3 {
                    g[c] += t[c];
                }
            }
            let mut app = tg.model;
            app.embeddings.insert(cam.view_id, tg.embedding);
            Ok((loss.value, grad, Some(app)))
        }
        None => {
            let (l1, g1) = l1_with_grad(&out.color, gt)?;
            let (ds, g2) = dssim_with_grad(&out.color, gt)?;
            let data = g1
                .data
                .iter()
                .zip(&g2.data)
                .map(|(a, b)| [0, 1, 2].map(|c| lambda * a[c] + (1.0 - lambda) * b[c]))
                .collect();
            Ok((
                lambda * l1 + (1.0 - lambda) * ds,
                Grid::from_vec(gt.width, gt.height, data)?,
                None,
            ))
        }
    }
}

fn view_step(state: &TrainState, data: &TrainData, cfg: &TrainConfig, cam: &CameraView) -> Result<ViewStep> {
    let rcfg = RenderConfig::default();
    let iter = state.iter;
    let gt = cam
        .image()
        .ok_or_else(|| Error::InvalidScene(format!("training view {} has no image", cam.view_id)))?;
    let out = render(&state.cloud, cam, &rcfg);
    let normal = loss_normal(&out, cam);
    let mut log = StepLog {
        l_n: normal.value,
        ..StepLog::default()
    };
    let geo = if !cfg.in_stage2(iter) {
        let weights = LossWeights {
            lambda_d: cfg.lambda_d_at(iter),
            ..cfg.weights
        };
        let depth = match data.aligned.get(&cam.view_id) {
            Some(prior) if weights.lambda_d > 0.0 => match loss_depth(&out.mean_depth, prior) {
                Ok(d) => Some(d),
                Err(Error::EmptyOverlap) => None,
                Err(e) => return Err(e),
            },
            _ => None,
        };
        let scale = match loss_scale(
            &state.cloud,
            &out.visible_ids(&state.cloud),
            weights.tau_s,
            weights.epsilon,
        ) {
            Ok(s) => s,
            Err(Error::EmptyVisibleSet) => ScaleLoss {
                value: 0.0,
                grad: vec![[0.0; 2]; state.cloud.len()],
            },
            Err(e) => return Err(e),
        };
        log.l_d = depth.as_ref().map_or(0.0, |d| d.value);
        log.l_s = scale.value;
        stage1_loss(depth.as_ref(), &normal, &scale, &weights)
    } else {
        let mv = match state
            .mvs_targets
            .get(&cam.view_id)
            .map(|t| loss_mv(&out.mean_depth, &t.1))
        {
            Some(Ok(mv)) => mv,
            Some(Err(Error::EmptyTarget)) | Some(Err(Error::EmptyOverlap)) | None => DepthLoss {
                value: 0.0,
                grad: Grid::new(cam.width, cam.height, 0.0),
            },
            Some(Err(e)) => return Err(e),
        };
        log.l_mv = mv.value;
        stage2_loss(&mv, &normal, &cfg.weights)
    };
    let (l_app, color_grad, app) = photometric(state, cam, gt, &out, cfg.weights.lambda_app_mix)?;
    log.l_app = l_app;
    log.total = total_loss(geo.value, l_app).map_err(|e| match e {
        Error::NonFiniteLoss(m) => Error::NonFiniteLoss(format!("iteration {iter}, view {}: {m}", cam.view_id)),
        e => e,
    })?;
    let mut upstream = geo.render;
    upstream.add_color(&color_grad, 1.0);
    let mut grads = render_backward(&state.cloud, cam, &rcfg, &out, &upstream)?;
    for (g, s) in grads.scales.iter_mut().zip(&geo.scales) {
        g[0] += s[0];
        g[1] += s[1];
    }
    Ok(ViewStep { log, grads, app, out })
}

/// PatchMatch refinement of one view seeded with the current median depth
/// and normals; `None` when the view shows no geometry or has no neighbors.
fn refine_view(
    cloud: &SurfelCloud,
    data: &TrainData,
    cfg: &TrainConfig,
    cam: &CameraView,
    iter: usize,
) -> Result<Option<DepthMap>> {
    let neighbors: Vec<CameraView> = data
        .neighbors(cam.view_id, cfg.mvs_neighbors)
        .into_iter()
        .cloned()
        .collect();
    if neighbors.is_empty() {
        return Ok(None);
    }
    let out = render(cloud, cam, &RenderConfig::default());
    let pm = PatchMatchConfig {
        seed: cfg.patchmatch.seed ^ cfg.seed ^ ((iter as u64) << 20) ^ cam.view_id.0 as u64,
        ..cfg.patchmatch.clone()
    };
    match patchmatch_refine(cam, &out.median_depth, &out.normal, &neighbors, &pm) {
        Ok(r) => Ok(Some(r.depth)),
        Err(Error::NoValidSeeds) => {
            debug!("view {} has no depth to refine", cam.view_id);
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Consistency filter against the neighbors' refined depths, then hole
/// filling from the monocular depth. Returns `(filtered, restored)`.
fn filter_and_restore(
    data: &TrainData,
    cfg: &TrainConfig,
    cam: &CameraView,
    refined: &DepthMap,
    lookup: impl Fn(ViewId) -> Option<DepthMap>,
) -> Result<(RefinedDepth, RefinedDepth)> {
    let others: Vec<(CameraView, DepthMap)> = data
        .neighbors(cam.view_id, cfg.mvs_neighbors)
        .into_iter()
        .filter_map(|n| lookup(n.view_id).map(|d| (n.clone(), d)))
        .collect();
    let filtered = geometric_filter(cam, refined, &others, &cfg.filter);
    let restored = match data.mono_depth.get(&cam.view_id) {
        Some(mono) => {
            let mut valid: Vec<f64> = filtered
                .depth
                .values
                .iter()
                .zip(&filtered.depth.valid)
                .filter(|(_, v)| **v)
                .map(|(d, _)| *d)
                .collect();
            if valid.is_empty() {
                filtered.clone()
            } else {
                valid.sort_by(f64::total_cmp);
                let err_th = cfg.restore_rel_err * valid[valid.len() / 2];
                restore_with_mono(&filtered, mono, cfg.restore_patch, err_th)?
            }
        }
        None => filtered.clone(),
    };
    Ok((filtered, restored))
}

/// Recomputes the multi-view targets of `views`. PatchMatch output of the
/// neighbors is reused while it is younger than the refresh interval.
pub fn refresh_mvs_targets(
    state: &mut TrainState,
    data: &TrainData,
    cfg: &TrainConfig,
    views: &[ViewId],
) -> Result<()> {
    let t0 = Instant::now();
    let iter = state.iter;
    let mut need: Vec<ViewId> = Vec::new();
    for v in views {
        need.push(*v);
        need.extend(data.neighbors(*v, cfg.mvs_neighbors).iter().map(|c| c.view_id));
    }
    need.sort();
    need.dedup();
    for v in need {
        if state.refined.get(&v).is_some_and(|(at, _)| !cfg.mvs_stale(*at, iter)) {
            continue;
        }
        let cam = data.view(v).ok_or(Error::UnknownView(v))?;
        match refine_view(&state.cloud, data, cfg, cam, iter)? {
            Some(d) => {
                state.refined.insert(v, (iter, d));
            }
            None => {
                state.refined.remove(&v);
            }
        }
    }
    for v in views {
        let cam = data.view(*v).ok_or(Error::UnknownView(*v))?;
        let Some((_, refined)) = state.refined.get(v) else {
            state.mvs_targets.remove(v);
            continue;
        };
        let (_, restored) =
            filter_and_restore(data, cfg, cam, refined, |n| state.refined.get(&n).map(|r| r.1.clone()))?;
        state.mvs_targets.insert(*v, (iter, restored));
    }
    debug!(
        "multi-view targets of {} views refreshed at iteration {iter} in {:.1}s",
        views.len(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Every multi-view intermediate for `views` from the current geometry.
#[derive(Debug, Clone, Default)]
pub struct MvsProducts {
    pub refined: BTreeMap<ViewId, DepthMap>,
    pub filtered: BTreeMap<ViewId, RefinedDepth>,
    pub restored: BTreeMap<ViewId, RefinedDepth>,
}

pub fn mvs_products(state: &TrainState, data: &TrainData, cfg: &TrainConfig, views: &[ViewId]) -> Result<MvsProducts> {
    let mut need: Vec<ViewId> = Vec::new();
    for v in views {
        need.push(*v);
        need.extend(data.neighbors(*v, cfg.mvs_neighbors).iter().map(|c| c.view_id));
    }
    need.sort();
    need.dedup();
    let mut out = MvsProducts::default();
    for v in need {
        let cam = data.view(v).ok_or(Error::UnknownView(v))?;
        if let Some(d) = refine_view(&state.cloud, data, cfg, cam, state.iter)? {
            out.refined.insert(v, d);
        }
    }
    for v in views {
        let cam = data.view(*v).ok_or(Error::UnknownView(*v))?;
        if let Some(refined) = out.refined.get(v) {
            let (f, r) = filter_and_restore(data, cfg, cam, refined, |n| out.refined.get(&n).cloned())?;
            out.filtered.insert(*v, f);
            out.restored.insert(*v, r);
        }
    }
    Ok(out)
}

fn apply_surfel_step(state: &mut TrainState, g: &SurfelGrads, cfg: &TrainConfig, t: i32) {
    let lr_c = cfg.center_lr(state.iter, state.extent);
    let lr = &cfg.lr;
    let mom = &mut state.surfel_moments;
    for (i, s) in state.cloud.surfels.iter_mut().enumerate() {
        let base = i * PARAMS;
        let mut step = |k: usize, grad: f64, rate: f64| adam(&mut mom.m[base + k], &mut mom.v[base + k], grad, rate, t);
        for a in 0..3 {
            s.center[a] += step(a, g.center[i][a], lr_c);
        }
        let w = Vec3::new(
            step(3, g.rotation[i][0], lr.rotation),
            step(4, g.rotation[i][1], lr.rotation),
            step(5, g.rotation[i][2], lr.rotation),
        );
        if w != Vec3::zeros() {
            s.rotate(&w);
        }
        for a in 0..2 {
            let d = step(6 + a, g.scales[i][a] * s.scales[a], lr.scale);
            if d != 0.0 {
                s.scales[a] = (s.scales[a].ln() + d).exp();
            }
        }
        let o = s.opacity;
        let d = step(8, g.opacity[i] * o * (1.0 - o), lr.opacity);
        if d != 0.0 {
            s.opacity = sigmoid(logit(o) + d).clamp(1e-6, 1.0 - 1e-6);
        }
        for c in 0..3 {
            s.color[c] = (s.color[c] + step(9 + c, g.color[i][c], lr.color)).clamp(0.0, 1.0);
        }
    }
}

fn apply_appearance_step(state: &mut TrainState, g: &AppearanceGrads, lr: f64, t: i32) {
    let Some(model) = state.appearance.as_mut() else {
        return;
    };
    let moments = &mut state.app_moments;
    model.update_with(g, |name, params, grads| {
        let mom = moments
            .entry(name.to_string())
            .or_insert_with(|| Moments::zeros(params.len()));
        for ((p, gr), (m, v)) in params.iter_mut().zip(grads).zip(mom.m.iter_mut().zip(mom.v.iter_mut())) {
            *p += adam(m, v, *gr, lr, t);
        }
    });
}

fn densify_now(state: &mut TrainState, cfg: &TrainConfig) {
    let mut stats = std::mem::replace(&mut state.stats, DensifyStats::new(&state.cloud));
    stats.voxel_density = voxel_density(&state.cloud, cfg.densify.voxel_size);
    let out = densify_step(&state.cloud, &stats, &cfg.densify, state.extent);
    let mut moments = Moments::zeros(out.cloud.len() * PARAMS);
    for (new, old) in out.origin.iter().enumerate() {
        if let Some(old) = old {
            let (a, b) = (new * PARAMS, old * PARAMS);
            moments.m[a..a + PARAMS].copy_from_slice(&state.surfel_moments.m[b..b + PARAMS]);
            moments.v[a..a + PARAMS].copy_from_slice(&state.surfel_moments.v[b..b + PARAMS]);
        }
    }
    info!(
        "densified at iteration {}: {} cloned, {} split, {} surfels",
        state.iter,
        out.cloned,
        out.split,
        out.cloud.len()
    );
    state.surfel_moments = moments;
    state.cloud = out.cloud;
    state.stats = DensifyStats::new(&state.cloud);
}

/// One optimization step over `batch`; gradients are averaged over the batch.
pub fn train_step(state: &mut TrainState, data: &TrainData, cfg: &TrainConfig, batch: &[ViewId]) -> Result<StepLog> {
    let t0 = Instant::now();
    if batch.is_empty() {
        return Err(Error::ConfigInvalid("empty batch".into()));
    }
    if state.iter == cfg.stage_switch_iter && cfg.in_stage2(state.iter) {
        info!("entering the multi-view stage at iteration {}", state.iter);
    }
    if cfg.in_stage2(state.iter) {
        let mut due: Vec<ViewId> = batch
            .iter()
            .copied()
            .filter(|v| {
                state
                    .mvs_targets
                    .get(v)
                    .is_none_or(|(at, _)| cfg.mvs_stale(*at, state.iter))
            })
            .collect();
        due.sort();
        due.dedup();
        if !due.is_empty() {
            refresh_mvs_targets(state, data, cfg, &due)?;
        }
    }
    let k = 1.0 / batch.len() as f64;
    let mut grads = SurfelGrads::zeros(state.cloud.len());
    let mut app = state.appearance.as_ref().map(AppearanceGrads::zeros);
    let mut log = StepLog {
        iter: state.iter,
        ..StepLog::default()
    };
    for id in batch {
        let cam = data.view(*id).ok_or(Error::UnknownView(*id))?;
        let v = view_step(state, data, cfg, cam)?;
        state.stats.accumulate(&v.out, &v.grads.center);
        grads.add_scaled(&v.grads, k);
        if let (Some(acc), Some(g)) = (app.as_mut(), v.app.as_ref()) {
            acc.add_scaled(g, k);
        }
        log.add_scaled(&v.log, k);
    }
    let t = (state.iter + 1).min(i32::MAX as usize) as i32;
    apply_surfel_step(state, &grads, cfg, t);
    if let Some(g) = &app {
        apply_appearance_step(state, g, cfg.lr.appearance, t);
    }
    if cfg.densify_due(state.iter) {
        densify_now(state, cfg);
    }
    state.iter += 1;
    log.surfels = state.cloud.len();
    log.seconds = t0.elapsed().as_secs_f64();
    Ok(log)
}

/// Runs the remaining iterations of `state`, calling `hook` after each.
pub fn train_from(
    state: &mut TrainState,
    data: &TrainData,
    cfg: &TrainConfig,
    mut hook: impl FnMut(&TrainState, &StepLog) -> Result<()>,
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    let mut logs = Vec::with_capacity(cfg.total_iters.saturating_sub(state.iter));
    while state.iter < cfg.total_iters {
        let batch = batch_views(data, cfg, state.iter);
        let log = train_step(state, data, cfg, &batch)?;
        if log.iter % 100 == 0 {
            info!(
                "iter {} total {:.5} app {:.5} surfels {} ({:.3}s)",
                log.iter, log.total, log.l_app, log.surfels, log.seconds
            );
        }
        hook(state, &log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Full run from a fresh initialization; `total_iters = 0` returns it untouched.
pub fn train(data: &TrainData, cfg: &TrainConfig) -> Result<(TrainState, Vec<StepLog>)> {
    let mut state = init_state(data, cfg)?;
    let logs = train_from(&mut state, data, cfg, |_, _| Ok(()))?;
    Ok((state, logs))
}

/// Color of a held-out view; with appearance modeling the embedding of the
/// nearest training pose is used.
pub fn render_view(
    state: &TrainState,
    camera: &CameraView,
    train_views: &[CameraView],
) -> Result<(ImageRgb, RenderOutput)> {
    let out = render(&state.cloud, camera, &RenderConfig::default());
    let color = match &state.appearance {
        Some(model) => {
            let emb = match model.embeddings.get(&camera.view_id) {
                Some(e) => e.clone(),
                None => assign_test_embedding(model, camera, train_views)?,
            };
            tone_map_with(model, &emb, &out, camera)?
        }
        None => out.color.clone(),
    };
    Ok((color, out))
}

/// Mean absolute median-depth error over pixels where both depths exist.
pub fn depth_mae(state: &TrainState, cameras: &[CameraView], gt: &BTreeMap<ViewId, DepthMap>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for cam in cameras {
        let truth = gt.get(&cam.view_id).ok_or(Error::UnknownView(cam.view_id))?;
        let out = render(&state.cloud, cam, &RenderConfig::default());
        for i in 0..truth.values.len() {
            if truth.valid[i] && out.median_depth.valid[i] {
                sum += (truth.values[i] - out.median_depth.values[i]).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyOverlap);
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, Shape, SyntheticSpec};

    fn small_data() -> TrainData {
        let spec = SyntheticSpec {
            shape: Shape::Plane,
            view_count: 6,
            test_view_count: 1,
            width: 24,
            height: 24,
            surfel_count: 600,
            sparse_points: 300,
            ..SyntheticSpec::default()
        };
        let scene = generate(&spec).unwrap();
        TrainData::new(scene.sparse, scene.train, &scene.mono, None).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            total_iters: 6,
            stage_switch_iter: 3,
            batch_size: 2,
            densify_from: 1,
            densify_interval: 2,
            densify_until: 6,
            mvs_neighbors: 2,
            patchmatch: PatchMatchConfig {
                scales: vec![2],
                iters: 1,
                ..PatchMatchConfig::default()
            },
            appearance: AppearanceConfig {
                resolution: 16,
                ..AppearanceConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lambda_d_decays_log_linearly() {
        let cfg = TrainConfig::default();
        assert_eq!(lambda_d_schedule(0, 1000, 0.5, 0.005), 0.5);
        assert!((lambda_d_schedule(1000, 1000, 0.5, 0.005) - 0.005).abs() < 1e-15);
        assert!((lambda_d_schedule(500, 1000, 0.5, 0.005) - 0.05).abs() < 1e-15);
        assert!((lambda_d_schedule(5000, 1000, 0.5, 0.005) - 0.005).abs() < 1e-15);
        assert!((cfg.lambda_d_at(333) - 0.5 * 0.01f64.powf(0.333)).abs() < 1e-12);
        assert_eq!(cfg.lambda_d_at(1000), 0.0);
        for i in 1..1000 {
            assert!(cfg.lambda_d_at(i) < cfg.lambda_d_at(i - 1));
        }
    }

    #[test]
    fn total_loss_sums_finite_parts() {
        assert_eq!(total_loss(0.0, 0.0).unwrap(), 0.0);
        assert!((total_loss(0.825, 0.14).unwrap() - 0.965).abs() < 1e-15);
        assert!(matches!(total_loss(f64::NAN, 0.1), Err(Error::NonFiniteLoss(_))));
    }

    #[test]
    fn batches_cover_each_epoch() {
        let data = small_data();
        let cfg = TrainConfig {
            batch_size: 3,
            ..TrainConfig::default()
        };
        let mut seen: Vec<ViewId> = (0..2).flat_map(|i| batch_views(&data, &cfg, i)).collect();
        seen.sort();
        let all: Vec<ViewId> = data.views.iter().map(|v| v.view_id).collect();
        assert_eq!(seen, all);
        assert_eq!(batch_views(&data, &cfg, 5), batch_views(&data, &cfg, 5));
    }

    #[test]
    fn zero_iterations_return_initialization() {
        let data = small_data();
        let cfg = TrainConfig {
            total_iters: 0,
            ..small_cfg()
        };
        let (state, logs) = train(&data, &cfg).unwrap();
        assert!(logs.is_empty());
        assert_eq!(state, init_state(&data, &cfg).unwrap());
        assert!(state.cloud.surfels.iter().all(|s| s.is_valid() && s.opacity == 0.5));
    }

    #[test]
    fn zero_learning_rates_freeze_parameters() {
        let data = small_data();
        let cfg = TrainConfig {
            lr: LearningRates {
                center: 0.0,
                center_final: 0.0,
                rotation: 0.0,
                scale: 0.0,
                opacity: 0.0,
                color: 0.0,
                appearance: 0.0,
            },
            densify_from: 100,
            total_iters: 2,
            stage_switch_iter: 2,
            densify_until: 2,
            ..small_cfg()
        };
        let init = init_state(&data, &cfg).unwrap();
        let (state, logs) = train(&data, &cfg).unwrap();
        assert_eq!(logs.len(), 2);
        assert_eq!(state.cloud, init.cloud);
        assert_eq!(state.appearance, init.appearance);
    }

    #[test]
    fn runs_are_deterministic_and_cross_stages() {
        let data = small_data();
        let cfg = small_cfg();
        let (a, la) = train(&data, &cfg).unwrap();
        let (b, lb) = train(&data, &cfg).unwrap();
        assert_eq!(a, b);
        let strip = |l: &[StepLog]| l.iter().map(|s| StepLog { seconds: 0.0, ..*s }).collect::<Vec<_>>();
        assert_eq!(strip(&la), strip(&lb));
        assert!(la[..3].iter().all(|l| l.l_mv == 0.0 && l.l_s > 0.0));
        assert!(la[3..].iter().all(|l| l.l_d == 0.0 && l.l_s == 0.0));
        assert!(!a.mvs_targets.is_empty());
        assert!(a.cloud.surfels.iter().all(Surfel::is_valid));
        assert!(la.last().unwrap().surfels >= la[0].surfels);
    }

    #[test]
    fn photometric_loss_decreases() {
        let data = small_data();
        let cfg = TrainConfig {
            total_iters: 60,
            stage_switch_iter: 60,
            densify_from: 1000,
            use_appearance: false,
            ..small_cfg()
        };
        let (_, logs) = train(&data, &cfg).unwrap();
        let head: f64 = logs[..5].iter().map(|l| l.l_app).sum();
        let tail: f64 = logs[55..].iter().map(|l| l.l_app).sum();
        assert!(tail < 0.8 * head, "{head} -> {tail}");
    }

    #[test]
    fn checkpoint_round_trip_and_csv() {
        let data = small_data();
        let cfg = TrainConfig {
            total_iters: 2,
            stage_switch_iter: 2,
            densify_until: 2,
            ..small_cfg()
        };
        let (state, logs) = train(&data, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        state.save(dir.path()).unwrap();
        let back = TrainState::load(dir.path()).unwrap();
        assert_eq!(back.iter, 2);
        assert_eq!(back.cloud.len(), state.cloud.len());
        assert!(back.appearance.is_some());
        let csv = dir.path().join("log.csv");
        write_log_csv(&csv, &logs).unwrap();
        let text = std::fs::read_to_string(csv).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "iter,L_d,L_n,L_s,L_mv,L_app,total,#surfels,seconds"
        );
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"total_iters": 5}"#).unwrap();
        assert_eq!(partial.total_iters, 5);
        assert_eq!(partial.batch_size, 4);
        for bad in [
            TrainConfig {
                batch_size: 0,
                ..cfg.clone()
            },
            TrainConfig {
                stage_switch_iter: 0,
                ..cfg.clone()
            },
            TrainConfig {
                stage_switch_iter: 2001,
                ..cfg.clone()
            },
            TrainConfig {
                densify_until: 2001,
                ..cfg.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::ConfigInvalid(_))));
        }
    }
}
