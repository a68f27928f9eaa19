use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use metrokit::dense_init::{align_and_merge, ncut_value, order_batches, partition_ncut, MergedCloud, Pointmap};
use metrokit::eval::{eval_geometry, psnr_ssim, ImageScore};
use metrokit::geo_refine::MonoPrior;
use metrokit::geometry::{CameraView, DepthMap, ImageRgb, Vec3};
use metrokit::io;
use metrokit::mesh::{fuse_and_extract, TriangleMesh, TsdfConfig};
use metrokit::sfm::{build_match_graph, parse_colmap, SparseScene};
use metrokit::trainer::{self, mvs_products, write_log_csv, TrainData, TrainState};

use crate::config::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Ingest,
    Partition,
    DenseInit,
    Train,
    Render,
    Fuse,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Partition => "partition",
            Stage::DenseInit => "dense-init",
            Stage::Train => "train",
            Stage::Render => "render",
            Stage::Fuse => "fuse",
            Stage::Eval => "eval",
        };
        f.write_str(name)
    }
}

/// Runs `f`, prefixing any failure with the stage name.
pub fn stage<T>(s: Stage, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().with_context(|| format!("{s} stage failed"))
}

fn require_dir(path: &Option<PathBuf>, what: &str) -> Result<()> {
    match path {
        Some(p) if p.exists() => Ok(()),
        Some(p) => bail!("{what} {} does not exist", p.display()),
        None => bail!("no {what} configured"),
    }
}

fn optional_dir(path: &Option<PathBuf>, what: &str) -> Result<()> {
    match path {
        Some(p) if !p.exists() => bail!("{what} {} does not exist", p.display()),
        _ => Ok(()),
    }
}

/// Checks every configured input before any work starts, naming the stage
/// that consumes the missing path.
pub fn check_inputs(cfg: &PipelineConfig, stages: &[Stage]) -> Result<()> {
    let p = &cfg.paths;
    for &s in stages {
        stage(s, || match s {
            Stage::Ingest | Stage::Partition => {
                require_dir(&p.colmap, "colmap directory")?;
                if s == Stage::Ingest {
                    require_dir(&p.images, "image directory")?;
                }
                Ok(())
            }
            Stage::DenseInit => optional_dir(&p.pointmaps, "pointmap directory"),
            Stage::Train => optional_dir(&p.mono, "monocular prior directory"),
            Stage::Eval => {
                optional_dir(&p.test_colmap, "test colmap directory")?;
                optional_dir(&p.test_images, "test image directory")?;
                optional_dir(&p.gt, "ground-truth cloud")
            }
            _ => Ok(()),
        })?;
    }
    Ok(())
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Cameras with their `<name>.ppm` images attached.
fn attach_images(cameras: &[CameraView], dir: &Path) -> Result<Vec<CameraView>> {
    cameras
        .iter()
        .map(|c| {
            let path = dir.join(format!("{}.ppm", c.name));
            let img = io::read_ppm(&path).with_context(|| format!("image of view {}", c.name))?;
            Ok(c.clone().with_image(img)?)
        })
        .collect()
}

pub struct Ingested {
    pub sparse: SparseScene,
    pub views: Vec<CameraView>,
}

pub fn ingest(cfg: &PipelineConfig) -> Result<Ingested> {
    stage(Stage::Ingest, || {
        require_dir(&cfg.paths.colmap, "colmap directory")?;
        require_dir(&cfg.paths.images, "image directory")?;
        let sparse = parse_colmap(cfg.paths.colmap.as_ref().unwrap())?;
        sparse.validate()?;
        let views = attach_images(&sparse.cameras, cfg.paths.images.as_ref().unwrap())?;
        info!("ingested {} views, {} points", views.len(), sparse.points.len());
        Ok(Ingested { sparse, views })
    })
}

#[derive(Serialize)]
struct SceneSummary {
    views: Vec<String>,
    points: usize,
    observations: usize,
    edges: Vec<(u32, u32, f64)>,
}

pub fn write_scene_summary(ing: &Ingested, out: &Path) -> Result<()> {
    let graph = build_match_graph(&ing.sparse);
    let summary = SceneSummary {
        views: ing.views.iter().map(|v| v.name.clone()).collect(),
        points: ing.sparse.points.len(),
        observations: ing.sparse.track_count(),
        edges: graph.edges().into_iter().map(|(a, b, w)| (a.0, b.0, w)).collect(),
    };
    write_json(&out.join("scene.json"), &summary)
}

#[derive(Serialize)]
struct PartitionSummary {
    clusters: Vec<Vec<u32>>,
    ncut: f64,
    batches: Vec<Vec<Vec<u32>>>,
}

pub fn partition(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    stage(Stage::Partition, || {
        require_dir(&cfg.paths.colmap, "colmap directory")?;
        let sparse = parse_colmap(cfg.paths.colmap.as_ref().unwrap())?;
        let graph = build_match_graph(&sparse);
        let part = partition_ncut(&graph, cfg.clusters)?;
        let ids = |v: &[metrokit::geometry::ViewId]| v.iter().map(|x| x.0).collect::<Vec<_>>();
        let mut summary = PartitionSummary {
            clusters: Vec::new(),
            ncut: ncut_value(&graph, &part)?,
            batches: Vec::new(),
        };
        for k in 0..cfg.clusters {
            let members = part.members(k);
            let batches = order_batches(&graph, &members, cfg.train.batch_size)?;
            summary.batches.push(batches.iter().map(|b| ids(b)).collect());
            summary.clusters.push(ids(&members));
        }
        write_json(&out.join("partition.json"), &summary)
    })
}

/// Aligns and merges the pointmaps of the training views, if any are configured.
pub fn dense_init(cfg: &PipelineConfig, sparse: &SparseScene) -> Result<Option<MergedCloud>> {
    stage(Stage::DenseInit, || {
        let Some(dir) = &cfg.paths.pointmaps else {
            return Ok(None);
        };
        optional_dir(&cfg.paths.pointmaps, "pointmap directory")?;
        let mut maps = Vec::new();
        for cam in &sparse.cameras {
            if dir.join(format!("{}.pfm", cam.view_id.0)).exists() {
                maps.push(Pointmap::load(dir, cam.view_id)?);
            }
        }
        if maps.is_empty() {
            warn!("no pointmaps found in {}", dir.display());
            return Ok(None);
        }
        let merged = align_and_merge(&maps, sparse, cfg.sample_rate)?;
        info!(
            "dense initialization: {} points from {} pointmaps",
            merged.positions.len(),
            maps.len()
        );
        Ok(Some(merged))
    })
}

pub fn write_dense(merged: &MergedCloud, out: &Path) -> Result<()> {
    io::write_point_cloud(&out.join("dense.ply"), &merged.positions, &merged.colors)?;
    let transforms: BTreeMap<String, serde_json::Value> = merged
        .transforms
        .iter()
        .map(|(v, s)| {
            let t = serde_json::json!({
                "scale": s.scale,
                "rotation": s.rotation.row_iter().map(|r| [r[0], r[1], r[2]]).collect::<Vec<_>>(),
                "translation": [s.translation.x, s.translation.y, s.translation.z],
            });
            (v.0.to_string(), t)
        })
        .collect();
    write_json(&out.join("transforms.json"), &transforms)
}

fn load_mono(cfg: &PipelineConfig, views: &[CameraView]) -> Result<BTreeMap<metrokit::geometry::ViewId, MonoPrior>> {
    let mut mono = BTreeMap::new();
    let Some(dir) = &cfg.paths.mono else {
        return Ok(mono);
    };
    for v in views {
        if dir.join(format!("{}.pfm", v.view_id.0)).exists() {
            mono.insert(v.view_id, MonoPrior::load(dir, v.view_id)?);
        }
    }
    Ok(mono)
}

/// Trains from scratch, writing checkpoints, the loss log and the final model.
pub fn train(
    cfg: &PipelineConfig,
    ing: Ingested,
    dense: Option<MergedCloud>,
    out: &Path,
    dump_mvs: bool,
) -> Result<(TrainState, TrainData)> {
    stage(Stage::Train, || {
        let mono = load_mono(cfg, &ing.views)?;
        let data = TrainData::new(ing.sparse, ing.views, &mono, dense)?;
        let tc = &cfg.train;
        let mut state = trainer::init_state(&data, tc)?;
        let logs = trainer::train_from(&mut state, &data, tc, |s, _| {
            if tc.checkpoint_due(s.iter) {
                s.save(&out.join("checkpoints").join(format!("iter_{:06}", s.iter)))?;
            }
            Ok(())
        })?;
        write_log_csv(&out.join("train_log.csv"), &logs)?;
        state.save(&out.join("model"))?;
        if dump_mvs {
            let dir = out.join("mvs");
            create_dir(&dir)?;
            let ids: Vec<_> = data.views.iter().map(|v| v.view_id).collect();
            let products = mvs_products(&state, &data, tc, &ids)?;
            for v in &data.views {
                if let Some(d) = products.refined.get(&v.view_id) {
                    io::write_depth(&dir.join(format!("{}.refined.pfm", v.name)), d)?;
                }
                if let Some(d) = products.filtered.get(&v.view_id) {
                    d.save(&dir, &format!("{}.filtered", v.name))?;
                }
                if let Some(d) = products.restored.get(&v.view_id) {
                    d.save(&dir, &format!("{}.restored", v.name))?;
                }
            }
        }
        info!("trained {} iterations, {} surfels", state.iter, state.cloud.len());
        Ok((state, data))
    })
}

pub fn load_model(out: &Path) -> Result<TrainState> {
    TrainState::load(&out.join("model")).with_context(|| format!("loading model from {}", out.join("model").display()))
}

/// Training and held-out cameras from the configured COLMAP directories.
pub fn cameras(cfg: &PipelineConfig) -> Result<(Vec<CameraView>, Vec<CameraView>)> {
    require_dir(&cfg.paths.colmap, "colmap directory")?;
    let train = parse_colmap(cfg.paths.colmap.as_ref().unwrap())?.cameras;
    let test = match &cfg.paths.test_colmap {
        Some(dir) => parse_colmap(dir)?.cameras,
        None => Vec::new(),
    };
    Ok((train, test))
}

pub struct Rendered {
    pub camera: CameraView,
    pub color: ImageRgb,
    pub depth: DepthMap,
}

pub fn select_views(selector: &str, train: &[CameraView], test: &[CameraView]) -> Result<Vec<CameraView>> {
    let all = || train.iter().chain(test).cloned();
    Ok(match selector {
        "train" => train.to_vec(),
        "test" => test.to_vec(),
        "all" => all().collect(),
        names => {
            let wanted: Vec<&str> = names.split(',').map(str::trim).collect();
            let picked: Vec<CameraView> = all().filter(|c| wanted.contains(&c.name.as_str())).collect();
            if picked.len() != wanted.len() {
                bail!("unknown view in selection {names:?}");
            }
            picked
        }
    })
}

pub fn render(state: &TrainState, views: &[CameraView], train_views: &[CameraView]) -> Result<Vec<Rendered>> {
    stage(Stage::Render, || {
        views
            .iter()
            .map(|cam| {
                let (color, out) = trainer::render_view(state, cam, train_views)?;
                Ok(Rendered {
                    camera: cam.clone(),
                    color,
                    depth: out.median_depth,
                })
            })
            .collect()
    })
}

pub fn write_renders(renders: &[Rendered], out: &Path) -> Result<()> {
    let dir = out.join("renders");
    create_dir(&dir)?;
    for r in renders {
        io::write_ppm(&dir.join(format!("{}.ppm", r.camera.name)), &r.color)?;
        io::write_depth(&dir.join(format!("{}.depth.pfm", r.camera.name)), &r.depth)?;
    }
    Ok(())
}

/// Bounds of the sparse points padded by 5% of their diagonal.
fn scene_bounds(sparse_points: &[Vec3]) -> Result<(Vec3, Vec3)> {
    let first = *sparse_points
        .first()
        .ok_or_else(|| anyhow!("the sparse scene has no points to bound the volume"))?;
    let (lo, hi) = sparse_points
        .iter()
        .fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    let pad = Vec3::repeat(0.05 * (hi - lo).norm());
    Ok((lo - pad, hi + pad))
}

/// 64 voxels across the longest side of the bounds, truncation of four
/// voxels, and a depth cutoff past the far side of the bounds from every camera.
pub fn auto_tsdf(bounds: (Vec3, Vec3), cameras: &[CameraView]) -> TsdfConfig {
    let (lo, hi) = bounds;
    let size = hi - lo;
    let voxel = size.max() / 64.0;
    let center = (lo + hi) / 2.0;
    let far = cameras.iter().map(|c| (c.center() - center).norm()).fold(0.0, f64::max) + size.norm() / 2.0;
    TsdfConfig {
        voxel_size: voxel,
        sdf_trunc: 4.0 * voxel,
        depth_trunc: far,
    }
}

pub fn fuse(
    cfg: &PipelineConfig,
    renders: &[Rendered],
    train_ids: &[metrokit::geometry::ViewId],
) -> Result<TriangleMesh> {
    stage(Stage::Fuse, || {
        require_dir(&cfg.paths.colmap, "colmap directory")?;
        let sparse = parse_colmap(cfg.paths.colmap.as_ref().unwrap())?;
        let pts: Vec<Vec3> = sparse.points.iter().map(|p| p.position).collect();
        let bounds = scene_bounds(&pts)?;
        let views: Vec<(CameraView, DepthMap, Option<ImageRgb>)> = renders
            .iter()
            .filter(|r| train_ids.contains(&r.camera.view_id))
            .map(|r| (r.camera.clone(), r.depth.clone(), Some(r.color.clone())))
            .collect();
        if views.is_empty() {
            bail!("no training views rendered for fusion");
        }
        let tsdf = cfg.tsdf.unwrap_or_else(|| auto_tsdf(bounds, &sparse.cameras));
        info!(
            "fusing {} views: voxel {:.4}, truncation {:.4}, depth cutoff {:.3}",
            views.len(),
            tsdf.voxel_size,
            tsdf.sdf_trunc,
            tsdf.depth_trunc
        );
        let mesh = fuse_and_extract(&views, bounds, &tsdf)?;
        if mesh.is_empty() {
            bail!("fusion produced an empty mesh");
        }
        Ok(mesh)
    })
}

/// Scores written to `metrics.json`. Image scores average over held-out
/// views; geometry scores compare mesh vertices with the reference cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub tau: f64,
    pub seed: u64,
    pub watertight: Option<bool>,
    pub views: BTreeMap<String, ImageScore>,
}

pub fn eval(
    cfg: &PipelineConfig,
    mesh_vertices: &[Vec3],
    watertight: Option<bool>,
    renders: &[Rendered],
) -> Result<Metrics> {
    stage(Stage::Eval, || {
        let mut m = Metrics {
            psnr: None,
            ssim: None,
            precision: None,
            recall: None,
            f1: None,
            tau: cfg.tau,
            seed: cfg.seed,
            watertight,
            views: BTreeMap::new(),
        };
        if let Some(gt_path) = &cfg.paths.gt {
            let (gt, _) = io::read_point_cloud(gt_path)?;
            let s = eval_geometry(mesh_vertices, &gt, cfg.tau)?;
            (m.precision, m.recall, m.f1) = (Some(s.precision), Some(s.recall), Some(s.f1));
        } else {
            warn!("no ground-truth cloud; geometry scores are omitted");
        }
        if let Some(dir) = &cfg.paths.test_images {
            for r in renders {
                let path = dir.join(format!("{}.ppm", r.camera.name));
                if path.exists() {
                    let gt = io::read_ppm(&path)?;
                    m.views.insert(r.camera.name.clone(), psnr_ssim(&r.color, &gt)?);
                }
            }
        }
        if m.views.is_empty() {
            warn!("no held-out images found; image scores are omitted");
        } else {
            let n = m.views.len() as f64;
            m.psnr = Some(m.views.values().map(|s| s.psnr).sum::<f64>() / n);
            m.ssim = Some(m.views.values().map(|s| s.ssim).sum::<f64>() / n);
        }
        Ok(m)
    })
}

pub fn write_metrics(m: &Metrics, out: &Path) -> Result<()> {
    write_json(&out.join("metrics.json"), m)
}
