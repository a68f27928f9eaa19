//! Python bindings: synthetic scenes, rendering, alignment, partitioning,
//! training, fusion and scoring.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use metrokit::dense_init::{align_and_merge, estimate_sim3 as sim3_fit, ncut_value, partition_ncut as ncut};
use metrokit::eval::eval_geometry as geometry_score;
use metrokit::geometry::{CameraView, DepthMap, ImageRgb, Intrinsics, Mat3, Pose, Vec3, ViewId};
use metrokit::mesh::{fuse_and_extract, TriangleMesh, TsdfConfig};
use metrokit::render::{render as render_cloud, RenderConfig, RenderOutput};
use metrokit::sfm::SceneGraph;
use metrokit::surfel::{Surfel, SurfelCloud as CoreCloud};
use metrokit::synth::{generate, write_bundle, SyntheticScene, SyntheticSpec};
use metrokit::trainer::{self, TrainConfig, TrainData, TrainState};

create_exception!(metrokit, MetrokitError, PyException);

fn err(e: metrokit::Error) -> PyErr {
    MetrokitError::new_err(e.to_string())
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn a3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn mat(rows: [[f64; 3]; 3]) -> Mat3 {
    Mat3::from_fn(|i, j| rows[i][j])
}

fn rows(m: &Mat3) -> [[f64; 3]; 3] {
    [0, 1, 2].map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]])
}

/// Pinhole camera with a world-to-camera pose.
#[pyclass(name = "Camera", module = "metrokit", frozen, from_py_object)]
#[derive(Clone)]
struct Camera {
    inner: CameraView,
}

#[pymethods]
impl Camera {
    #[new]
    #[pyo3(signature = (view_id, width, height, fx, fy, cx, cy, rotation, translation))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        view_id: u32,
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
    ) -> PyResult<Self> {
        let pose = Pose::new(mat(rotation), v3(translation));
        let inner =
            CameraView::new(ViewId(view_id), Intrinsics { fx, fy, cx, cy }, width, height, pose).map_err(err)?;
        Ok(Camera { inner })
    }

    /// Camera at `eye` looking at `target`, principal point at the image center.
    #[staticmethod]
    #[pyo3(signature = (view_id, width, height, focal, eye, target, up = [0.0, 0.0, 1.0]))]
    fn look_at(
        view_id: u32,
        width: usize,
        height: usize,
        focal: f64,
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
    ) -> PyResult<Self> {
        let pose = Pose::look_at(v3(eye), v3(target), v3(up));
        let k = Intrinsics {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        };
        let inner = CameraView::new(ViewId(view_id), k, width, height, pose).map_err(err)?;
        Ok(Camera { inner })
    }

    #[getter]
    fn view_id(&self) -> u32 {
        self.inner.view_id.0
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        a3(&self.inner.center())
    }

    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        rows(&self.inner.pose.rotation)
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        a3(&self.inner.pose.translation)
    }

    /// Camera-frame ray through pixel `(x, y)` with unit depth.
    fn ray(&self, x: f64, y: f64) -> [f64; 3] {
        a3(&self.inner.ray(x, y))
    }

    fn __repr__(&self) -> String {
        format!(
            "Camera(view_id={}, {}x{})",
            self.inner.view_id.0, self.inner.width, self.inner.height
        )
    }
}

#[pyclass(name = "SurfelCloud", module = "metrokit", skip_from_py_object)]
#[derive(Clone)]
struct SurfelCloud {
    inner: CoreCloud,
}

#[pymethods]
impl SurfelCloud {
    #[new]
    fn new(
        centers: Vec<[f64; 3]>,
        normals: Vec<[f64; 3]>,
        scales: Vec<[f64; 2]>,
        opacities: Vec<f64>,
        colors: Vec<[f64; 3]>,
    ) -> PyResult<Self> {
        let n = centers.len();
        if normals.len() != n || scales.len() != n || opacities.len() != n || colors.len() != n {
            return Err(MetrokitError::new_err("all surfel attributes need the same length"));
        }
        let surfels = (0..n)
            .map(|i| Surfel::oriented(v3(centers[i]), v3(normals[i]), scales[i], opacities[i], colors[i]))
            .collect();
        Ok(SurfelCloud {
            inner: CoreCloud::new(surfels),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn centers(&self) -> Vec<[f64; 3]> {
        self.inner.surfels.iter().map(|s| a3(&s.center)).collect()
    }

    fn normals(&self) -> Vec<[f64; 3]> {
        self.inner.surfels.iter().map(|s| a3(&s.normal())).collect()
    }

    fn scales(&self) -> Vec<[f64; 2]> {
        self.inner.surfels.iter().map(|s| s.scales).collect()
    }

    fn opacities(&self) -> Vec<f64> {
        self.inner.surfels.iter().map(|s| s.opacity).collect()
    }

    fn save_ply(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_ply(&path).map_err(err)
    }

    #[staticmethod]
    fn load_ply(path: PathBuf) -> PyResult<Self> {
        Ok(SurfelCloud {
            inner: CoreCloud::load_ply(&path).map_err(err)?,
        })
    }
}

fn depth_rows(d: &DepthMap) -> Vec<Vec<Option<f64>>> {
    (0..d.height)
        .map(|y| {
            (0..d.width)
                .map(|x| {
                    let i = y * d.width + x;
                    d.valid[i].then(|| d.values[i])
                })
                .collect()
        })
        .collect()
}

fn image_rows(img: &ImageRgb) -> Vec<Vec<[f64; 3]>> {
    img.data.chunks(img.width).map(|r| r.to_vec()).collect()
}

fn image_from_rows(rows: Vec<Vec<[f64; 3]>>) -> PyResult<ImageRgb> {
    let h = rows.len();
    let w = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != w) {
        return Err(MetrokitError::new_err("image rows differ in length"));
    }
    ImageRgb::from_vec(w, h, rows.into_iter().flatten().collect()).map_err(err)
}

/// Render buffers as nested row lists; invalid depths are `None`.
fn output_dict<'py>(py: Python<'py>, out: &RenderOutput, color: &ImageRgb) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("width", out.width)?;
    d.set_item("height", out.height)?;
    d.set_item("color", image_rows(color))?;
    d.set_item("median_depth", depth_rows(&out.median_depth))?;
    d.set_item("mean_depth", depth_rows(&out.mean_depth))?;
    d.set_item(
        "alpha",
        out.alpha.data.chunks(out.width).map(|r| r.to_vec()).collect::<Vec<_>>(),
    )?;
    d.set_item(
        "normal",
        out.normal
            .data
            .chunks(out.width)
            .map(|r| r.to_vec())
            .collect::<Vec<_>>(),
    )?;
    Ok(d)
}

/// Renders a surfel cloud; returns color, depths, alpha and normals.
#[pyfunction]
fn render<'py>(py: Python<'py>, cloud: &SurfelCloud, camera: &Camera) -> PyResult<Bound<'py, PyDict>> {
    let out = render_cloud(&cloud.inner, &camera.inner, &RenderConfig::default());
    output_dict(py, &out, &out.color)
}

/// Similarity `target ≈ s·R·source + t`; returns `(s, R, t)`.
#[pyfunction]
fn estimate_sim3(source: Vec<[f64; 3]>, target: Vec<[f64; 3]>) -> PyResult<(f64, [[f64; 3]; 3], [f64; 3])> {
    let src: Vec<Vec3> = source.into_iter().map(v3).collect();
    let dst: Vec<Vec3> = target.into_iter().map(v3).collect();
    let s = sim3_fit(&src, &dst).map_err(err)?;
    Ok((s.scale, rows(&s.rotation), a3(&s.translation)))
}

/// Normalized-cut clustering of a weighted view graph; returns the member
/// lists and the cut value.
#[pyfunction]
fn partition_ncut(nodes: Vec<u32>, edges: Vec<(u32, u32, f64)>, clusters: usize) -> PyResult<(Vec<Vec<u32>>, f64)> {
    let edges: Vec<(ViewId, ViewId, f64)> = edges.into_iter().map(|(a, b, w)| (ViewId(a), ViewId(b), w)).collect();
    let graph = SceneGraph::from_edges(nodes.into_iter().map(ViewId).collect(), &edges).map_err(err)?;
    let part = ncut(&graph, clusters).map_err(err)?;
    let value = ncut_value(&graph, &part).map_err(err)?;
    let members = (0..clusters)
        .map(|k| part.members(k).iter().map(|v| v.0).collect())
        .collect();
    Ok((members, value))
}

/// Precision, recall and F1 of `pred` against `gt` at distance `tau`.
#[pyfunction]
fn eval_geometry<'py>(
    py: Python<'py>,
    pred: Vec<[f64; 3]>,
    gt: Vec<[f64; 3]>,
    tau: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let p: Vec<Vec3> = pred.into_iter().map(v3).collect();
    let g: Vec<Vec3> = gt.into_iter().map(v3).collect();
    let s = geometry_score(&p, &g, tau).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("precision", s.precision)?;
    d.set_item("recall", s.recall)?;
    d.set_item("f1", s.f1)?;
    Ok(d)
}

#[pyfunction]
fn psnr(pred: Vec<Vec<[f64; 3]>>, gt: Vec<Vec<[f64; 3]>>) -> PyResult<f64> {
    metrokit::metrics::psnr(&image_from_rows(pred)?, &image_from_rows(gt)?).map_err(err)
}

#[pyfunction]
fn ssim(pred: Vec<Vec<[f64; 3]>>, gt: Vec<Vec<[f64; 3]>>) -> PyResult<f64> {
    metrokit::metrics::ssim(&image_from_rows(pred)?, &image_from_rows(gt)?).map_err(err)
}

/// Procedurally textured scene with cameras, images, priors and pointmaps.
#[pyclass(name = "Scene", module = "metrokit", frozen)]
struct Scene {
    inner: SyntheticScene,
}

fn cameras(list: &[CameraView]) -> Vec<Camera> {
    list.iter().map(|c| Camera { inner: c.clone() }).collect()
}

#[pymethods]
impl Scene {
    #[getter]
    fn train_cameras(&self) -> Vec<Camera> {
        cameras(&self.inner.train)
    }

    #[getter]
    fn test_cameras(&self) -> Vec<Camera> {
        cameras(&self.inner.test)
    }

    #[getter]
    fn gt_cloud(&self) -> SurfelCloud {
        SurfelCloud {
            inner: self.inner.gt_cloud.clone(),
        }
    }

    #[getter]
    fn spec_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.spec).map_err(|e| MetrokitError::new_err(e.to_string()))
    }

    /// Observed image of a training view or clean image of a test view.
    fn image(&self, view_id: u32) -> PyResult<Vec<Vec<[f64; 3]>>> {
        if let Some(c) = self.inner.train.iter().find(|c| c.view_id.0 == view_id) {
            return Ok(image_rows(c.image().expect("training views carry images")));
        }
        match self.inner.test.iter().position(|c| c.view_id.0 == view_id) {
            Some(i) => Ok(image_rows(&self.inner.test_clean[i])),
            None => Err(MetrokitError::new_err(format!("unknown view {view_id}"))),
        }
    }

    fn gt_depth(&self, view_id: u32) -> PyResult<Vec<Vec<Option<f64>>>> {
        self.inner
            .gt_depth
            .get(&ViewId(view_id))
            .map(depth_rows)
            .ok_or_else(|| MetrokitError::new_err(format!("unknown view {view_id}")))
    }

    /// Writes the file bundle read by the command-line pipeline.
    fn write_bundle(&self, dir: PathBuf) -> PyResult<()> {
        write_bundle(&self.inner, &dir).map_err(err)
    }
}

/// Generates a synthetic scene. `shape` is one of plane, sphere, boxes, sphere_plane.
#[pyfunction]
#[pyo3(signature = (shape = "sphere", views = 16, test_views = 4, size = 64, seed = 0, surfel_count = 2000,
    sparse_points = 600, depth_noise = 0.0, image_noise = 0.0, gain_jitter = 0.0))]
#[allow(clippy::too_many_arguments)]
fn synth(
    shape: &str,
    views: usize,
    test_views: usize,
    size: usize,
    seed: u64,
    surfel_count: usize,
    sparse_points: usize,
    depth_noise: f64,
    image_noise: f64,
    gain_jitter: f64,
) -> PyResult<Scene> {
    let spec = SyntheticSpec {
        shape: shape.parse().map_err(err)?,
        surfel_count,
        view_count: views,
        test_view_count: test_views,
        width: size,
        height: size,
        depth_noise,
        image_noise,
        gain_jitter,
        sparse_points,
        seed,
    };
    Ok(Scene {
        inner: generate(&spec).map_err(err)?,
    })
}

/// Default trainer settings as JSON; edit and pass back to `train`.
#[pyfunction]
fn default_train_config() -> PyResult<String> {
    serde_json::to_string_pretty(&TrainConfig::default()).map_err(|e| MetrokitError::new_err(e.to_string()))
}

#[pyclass(name = "Model", module = "metrokit")]
struct Model {
    state: TrainState,
    train_views: Vec<CameraView>,
}

#[pymethods]
impl Model {
    #[getter]
    fn iterations(&self) -> usize {
        self.state.iter
    }

    #[getter]
    fn cloud(&self) -> SurfelCloud {
        SurfelCloud {
            inner: self.state.cloud.clone(),
        }
    }

    /// Render with appearance applied (nearest training embedding for unseen views).
    fn render<'py>(&self, py: Python<'py>, camera: &Camera) -> PyResult<Bound<'py, PyDict>> {
        let (color, out) = trainer::render_view(&self.state, &camera.inner, &self.train_views).map_err(err)?;
        output_dict(py, &out, &color)
    }

    /// Mean absolute median-depth error against the scene's ground truth.
    fn depth_mae(&self, scene: &Scene, cameras: Vec<Camera>) -> PyResult<f64> {
        let cams: Vec<CameraView> = cameras.into_iter().map(|c| c.inner).collect();
        trainer::depth_mae(&self.state, &cams, &scene.inner.gt_depth).map_err(err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.state.save(&dir).map_err(err)
    }
}

/// Trains on a synthetic scene. Returns the model and per-step loss records.
#[pyfunction]
#[pyo3(signature = (scene, config_json = None, dense = true))]
fn train(
    py: Python<'_>,
    scene: &Scene,
    config_json: Option<&str>,
    dense: bool,
) -> PyResult<(Model, Vec<BTreeMap<String, f64>>)> {
    let cfg: TrainConfig = match config_json {
        Some(text) => serde_json::from_str(text).map_err(|e| MetrokitError::new_err(e.to_string()))?,
        None => TrainConfig::default(),
    };
    let s = &scene.inner;
    let (state, logs, views) = py
        .detach(|| -> metrokit::Result<_> {
            let merged = if dense {
                Some(align_and_merge(&s.pointmaps, &s.sparse, 0.25)?)
            } else {
                None
            };
            let data = TrainData::new(s.sparse.clone(), s.train.clone(), &s.mono, merged)?;
            let (state, logs) = trainer::train(&data, &cfg)?;
            Ok((state, logs, data.views))
        })
        .map_err(err)?;
    let records = logs
        .iter()
        .map(|l| {
            let v = serde_json::to_value(l).expect("log serializes");
            v.as_object()
                .expect("log is a record")
                .iter()
                .filter_map(|(k, x)| x.as_f64().map(|f| (k.clone(), f)))
                .collect()
        })
        .collect();
    Ok((
        Model {
            state,
            train_views: views,
        },
        records,
    ))
}

#[pyclass(name = "Mesh", module = "metrokit", frozen)]
struct Mesh {
    inner: TriangleMesh,
}

#[pymethods]
impl Mesh {
    #[getter]
    fn vertices(&self) -> Vec<[f64; 3]> {
        self.inner.vertices.iter().map(a3).collect()
    }

    #[getter]
    fn faces(&self) -> Vec<[u32; 3]> {
        self.inner.faces.clone()
    }

    fn is_watertight(&self) -> bool {
        self.inner.is_watertight()
    }

    fn save_ply(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_ply(&path).map_err(err)
    }
}

/// TSDF-fuses the model's median depths from `cameras` and extracts a mesh
/// inside the box `[lo, hi]`.
#[pyfunction]
#[pyo3(signature = (model, cameras, lo, hi, voxel_size, sdf_trunc = None, depth_trunc = 10.0))]
fn fuse(
    model: &Model,
    cameras: Vec<Camera>,
    lo: [f64; 3],
    hi: [f64; 3],
    voxel_size: f64,
    sdf_trunc: Option<f64>,
    depth_trunc: f64,
) -> PyResult<Mesh> {
    let mut views = Vec::with_capacity(cameras.len());
    for c in cameras {
        let (color, out) = trainer::render_view(&model.state, &c.inner, &model.train_views).map_err(err)?;
        views.push((c.inner, out.median_depth, Some(color)));
    }
    let cfg = TsdfConfig {
        voxel_size,
        sdf_trunc: sdf_trunc.unwrap_or(4.0 * voxel_size),
        depth_trunc,
    };
    Ok(Mesh {
        inner: fuse_and_extract(&views, (v3(lo), v3(hi)), &cfg).map_err(err)?,
    })
}

#[pymodule]
#[pyo3(name = "metrokit")]
fn metrokit_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MetrokitError", m.py().get_type::<MetrokitError>())?;
    m.add_class::<Camera>()?;
    m.add_class::<SurfelCloud>()?;
    m.add_class::<Scene>()?;
    m.add_class::<Model>()?;
    m.add_class::<Mesh>()?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_sim3, m)?)?;
    m.add_function(wrap_pyfunction!(partition_ncut, m)?)?;
    m.add_function(wrap_pyfunction!(eval_geometry, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(default_train_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    Ok(())
}
