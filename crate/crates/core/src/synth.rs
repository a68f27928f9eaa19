//! Synthetic scenes with full ground truth: surfel clouds sampled from
//! analytic shapes and a procedural solid texture, camera rings, rendered
//! images and depths, affine-warped "monocular" priors, similarity-warped
//! pointmaps and SfM tracks.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dense_init::Pointmap;
use crate::error::{Error, Result};
use crate::geo_refine::MonoPrior;
use crate::geometry::{
    exp_so3, nearest_pose, CameraView, DepthMap, Grid, ImageRgb, Intrinsics, Pose, Rgb, Sim3, Vec3, ViewId,
};
use crate::io;
use crate::render::{render, RenderConfig};
use crate::sfm::{write_colmap, Observation, SparsePoint, SparseScene};
use crate::surfel::{Surfel, SurfelCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Plane,
    Sphere,
    Boxes,
    SpherePlane,
}

impl std::str::FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(Shape::Plane),
            "sphere" => Ok(Shape::Sphere),
            "boxes" => Ok(Shape::Boxes),
            "sphere_plane" => Ok(Shape::SpherePlane),
            other => Err(Error::ConfigInvalid(format!("unknown shape {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub shape: Shape,
    pub surfel_count: usize,
    pub view_count: usize,
    pub test_view_count: usize,
    pub width: usize,
    pub height: usize,
    /// Relative per-pixel noise on the monocular prior and the pointmaps.
    pub depth_noise: f64,
    /// Additive Gaussian image noise.
    pub image_noise: f64,
    /// Per-view gain drawn from `[1 − j, 1 + j]`.
    pub gain_jitter: f64,
    pub sparse_points: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            shape: Shape::Sphere,
            surfel_count: 2000,
            view_count: 16,
            test_view_count: 4,
            width: 64,
            height: 64,
            depth_noise: 0.0,
            image_noise: 0.0,
            gain_jitter: 0.0,
            sparse_points: 600,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.surfel_count == 0 || self.view_count == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::ConfigInvalid("synthetic counts must be at least 1".into()));
        }
        if self.depth_noise < 0.0 || self.image_noise < 0.0 || !(0.0..1.0).contains(&self.gain_jitter) {
            return Err(Error::ConfigInvalid(
                "noise levels must be non-negative and gain jitter below 1".into(),
            ));
        }
        Ok(())
    }
}

/// Procedural solid texture: smooth, colorful, non-periodic over a unit scene.
pub fn texture(p: &Vec3) -> Rgb {
    const WAVES: [([f64; 3], f64, f64); 4] = [
        ([0.8, 0.5, 0.33], 0.55, 0.3),
        ([-0.3, 0.9, 0.3], 0.8, 1.1),
        ([0.4, -0.2, 0.89], 1.3, 2.0),
        ([0.6, -0.7, 0.39], 0.23, 0.7),
    ];
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mut v = 0.5;
        for (k, (dir, period, phase)) in WAVES.iter().enumerate() {
            let d = Vec3::new(dir[(k + c) % 3], dir[(k + 2 * c) % 3], dir[(k + c + 1) % 3]);
            let amp = [0.16, 0.11, 0.07, 0.12][k];
            v += amp * (2.0 * PI * d.dot(p) / period + phase + c as f64).sin();
        }
        *o = v.clamp(0.0, 1.0);
    }
    out
}

/// Quasi-uniform directions on the unit sphere (or the `z ≥ 0` half).
pub fn fibonacci_directions(n: usize, upper_only: bool) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            let z = if upper_only { t } else { 1.0 - 2.0 * t };
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

struct Patch {
    origin: Vec3,
    u: Vec3,
    v: Vec3,
}

impl Patch {
    fn area(&self) -> f64 {
        self.u.cross(&self.v).norm()
    }
}

const SPHERE_PLANE_RADIUS: f64 = 0.6;
const GROUND_HALF: f64 = 1.5;

fn box_faces(lo: Vec3, hi: Vec3) -> Vec<Patch> {
    let d = hi - lo;
    let (ex, ey, ez) = (Vec3::x() * d.x, Vec3::y() * d.y, Vec3::z() * d.z);
    // outward normal = u × v
    vec![
        Patch {
            origin: Vec3::new(lo.x, lo.y, hi.z),
            u: ex,
            v: ey,
        },
        Patch {
            origin: lo,
            u: ez,
            v: ey,
        },
        Patch {
            origin: Vec3::new(hi.x, lo.y, lo.z),
            u: ey,
            v: ez,
        },
        Patch {
            origin: lo,
            u: ex,
            v: ez,
        },
        Patch {
            origin: Vec3::new(lo.x, hi.y, lo.z),
            u: ez,
            v: ex,
        },
    ]
}

fn ground() -> Patch {
    Patch {
        origin: Vec3::new(-GROUND_HALF, -GROUND_HALF, 0.0),
        u: Vec3::x() * (2.0 * GROUND_HALF),
        v: Vec3::y() * (2.0 * GROUND_HALF),
    }
}

fn boxes() -> [(Vec3, Vec3); 2] {
    [
        (Vec3::new(-0.8, -0.5, 0.0), Vec3::new(-0.1, 0.3, 0.6)),
        (Vec3::new(0.2, -0.2, 0.0), Vec3::new(0.9, 0.6, 0.4)),
    ]
}

/// Points and outward normals spread over the shape's surface by area.
pub fn surface_points(shape: Shape, n: usize) -> Vec<(Vec3, Vec3)> {
    let sphere = |center: Vec3, r: f64, k: usize| -> Vec<(Vec3, Vec3)> {
        fibonacci_directions(k, false)
            .into_iter()
            .map(|d| (center + d * r, d))
            .collect()
    };
    let grid = |p: &Patch, k: usize| -> Vec<(Vec3, Vec3)> {
        let ratio = p.u.norm() / p.v.norm();
        let nu = ((k as f64 * ratio).sqrt().round() as usize).max(1);
        let nv = (k / nu).max(1);
        let normal = p.u.cross(&p.v).normalize();
        let mut out = Vec::with_capacity(nu * nv);
        for j in 0..nv {
            for i in 0..nu {
                let a = (i as f64 + 0.5) / nu as f64;
                let b = (j as f64 + 0.5) / nv as f64;
                out.push((p.origin + p.u * a + p.v * b, normal));
            }
        }
        out
    };
    match shape {
        Shape::Sphere => sphere(Vec3::zeros(), 1.0, n),
        Shape::Plane => grid(&ground(), n),
        Shape::SpherePlane => {
            let r = SPHERE_PLANE_RADIUS;
            let sphere_area = 4.0 * PI * r * r;
            let ground_area = ground().area();
            let k = ((n as f64) * sphere_area / (sphere_area + ground_area)).round() as usize;
            let mut pts = sphere(Vec3::new(0.0, 0.0, r), r, k);
            pts.extend(grid(&ground(), n - k));
            pts
        }
        Shape::Boxes => {
            let mut patches = vec![ground()];
            for (lo, hi) in boxes() {
                patches.extend(box_faces(lo, hi));
            }
            let total: f64 = patches.iter().map(Patch::area).sum();
            patches
                .iter()
                .flat_map(|p| grid(p, ((n as f64) * p.area() / total).round().max(1.0) as usize))
                .collect()
        }
    }
}

/// Total surface area of the shape.
pub fn surface_area(shape: Shape) -> f64 {
    match shape {
        Shape::Sphere => 4.0 * PI,
        Shape::Plane => ground().area(),
        Shape::SpherePlane => 4.0 * PI * SPHERE_PLANE_RADIUS.powi(2) + ground().area(),
        Shape::Boxes => {
            ground().area()
                + boxes()
                    .iter()
                    .flat_map(|(lo, hi)| box_faces(*lo, *hi))
                    .map(|p| p.area())
                    .sum::<f64>()
        }
    }
}

/// Radius of a sphere that bounds the scene, centered at [`scene_center`].
pub fn scene_radius(shape: Shape) -> f64 {
    match shape {
        Shape::Sphere => 1.0,
        _ => GROUND_HALF * 2f64.sqrt(),
    }
}

pub fn scene_center(shape: Shape) -> Vec3 {
    match shape {
        Shape::SpherePlane => Vec3::new(0.0, 0.0, 0.3),
        Shape::Boxes => Vec3::new(0.0, 0.0, 0.2),
        _ => Vec3::zeros(),
    }
}

/// Ground-truth surfel cloud: one opaque textured surfel per surface sample.
pub fn gt_cloud(shape: Shape, n: usize) -> SurfelCloud {
    let spacing = (surface_area(shape) / n as f64).sqrt();
    let s = 0.6 * spacing;
    SurfelCloud::new(
        surface_points(shape, n)
            .into_iter()
            .map(|(p, normal)| Surfel::oriented(p, normal, [s, s], 0.95, texture(&p)))
            .collect(),
    )
}

/// Cameras looking at the scene center from quasi-uniform directions.
pub fn camera_ring(
    shape: Shape,
    count: usize,
    width: usize,
    height: usize,
    first_id: u32,
    phase: f64,
) -> Vec<CameraView> {
    let upper = shape != Shape::Sphere;
    let radius = scene_radius(shape);
    let distance = 3.2 * radius;
    let center = scene_center(shape);
    let fx = 1.15 * width as f64;
    let dirs: Vec<Vec3> = if upper {
        // elevations between ~25° and ~70° keep the ground visible at grazing-free angles
        (0..count)
            .map(|i| {
                let t = (i as f64 + 0.5) / count as f64;
                let az = 2.0 * PI * (t + phase) + 0.37 * (i % 2) as f64;
                let el = (25.0 + 45.0 * ((i * 7 % count) as f64 + 0.5) / count as f64).to_radians();
                Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
            })
            .collect()
    } else {
        let rot = exp_so3(&Vec3::new(0.3, 0.7, 0.2).scale(phase * 2.0 * PI));
        fibonacci_directions(count, false)
            .into_iter()
            .map(|d| rot * d)
            .collect()
    };
    dirs.into_iter()
        .enumerate()
        .map(|(i, d)| {
            let eye = center + d * distance;
            let up = if d.z.abs() > 0.95 { Vec3::y() } else { Vec3::z() };
            CameraView::new(
                ViewId(first_id + i as u32),
                Intrinsics {
                    fx,
                    fy: fx,
                    cx: width as f64 / 2.0 - 0.5,
                    cy: height as f64 / 2.0 - 0.5,
                },
                width,
                height,
                Pose::look_at(eye, center, up),
            )
            .expect("synthetic camera is valid")
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SyntheticSpec,
    pub gt_cloud: SurfelCloud,
    /// Training views carrying (possibly gain-jittered, noisy) images.
    pub train: Vec<CameraView>,
    pub test: Vec<CameraView>,
    /// Noise-free, unit-gain test images for evaluation.
    pub test_clean: Vec<ImageRgb>,
    /// Median depth of the ground-truth render for every view.
    pub gt_depth: BTreeMap<ViewId, DepthMap>,
    pub sparse: SparseScene,
    pub mono: BTreeMap<ViewId, MonoPrior>,
    pub pointmaps: Vec<Pointmap>,
    /// World-to-pointmap-frame transform per view.
    pub pointmap_transforms: BTreeMap<ViewId, Sim3>,
    pub gains: BTreeMap<ViewId, f64>,
}

fn random_rotation(rng: &mut impl Rng) -> crate::geometry::Mat3 {
    let axis = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    exp_so3(&(axis.normalize() * rng.random_range(0.0..PI)))
}

fn apply_gain(image: &ImageRgb, gain: f64) -> ImageRgb {
    let data = image
        .data
        .iter()
        .map(|c| [(c[0] * gain).min(1.0), (c[1] * gain).min(1.0), (c[2] * gain).min(1.0)])
        .collect();
    Grid::from_vec(image.width, image.height, data).expect("same shape")
}

/// Builds a complete synthetic scene from `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cloud = gt_cloud(spec.shape, spec.surfel_count);
    let cfg = RenderConfig::default();
    let (w, h) = (spec.width, spec.height);
    let train_cams = camera_ring(spec.shape, spec.view_count, w, h, 0, 0.0);
    let test_cams = camera_ring(
        spec.shape,
        spec.test_view_count,
        w,
        h,
        spec.view_count as u32,
        0.5 / spec.view_count.max(1) as f64,
    );

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut gains = BTreeMap::new();
    for cam in &train_cams {
        let g = if spec.gain_jitter > 0.0 {
            rng.random_range(1.0 - spec.gain_jitter..=1.0 + spec.gain_jitter)
        } else {
            1.0
        };
        gains.insert(cam.view_id, g);
    }
    let train_poses: Vec<Pose> = train_cams.iter().map(|c| c.pose).collect();
    for cam in &test_cams {
        let k = nearest_pose(&cam.pose, &train_poses).expect("training views exist");
        gains.insert(cam.view_id, gains[&train_cams[k].view_id]);
    }

    let mut gt_depth = BTreeMap::new();
    let mut renders = BTreeMap::new();
    for cam in train_cams.iter().chain(&test_cams) {
        let out = render(&cloud, cam, &cfg);
        gt_depth.insert(cam.view_id, out.median_depth.clone());
        renders.insert(cam.view_id, out.color);
    }
    let observe = |cam: &CameraView, rng: &mut ChaCha8Rng| -> Result<CameraView> {
        let mut img = apply_gain(&renders[&cam.view_id], gains[&cam.view_id]);
        if spec.image_noise > 0.0 {
            for c in img.data.iter_mut() {
                for v in c.iter_mut() {
                    *v = (*v + spec.image_noise * noise.sample(rng)).clamp(0.0, 1.0);
                }
            }
        }
        cam.clone().with_image(img)
    };
    let train: Vec<CameraView> = train_cams.iter().map(|c| observe(c, &mut rng)).collect::<Result<_>>()?;
    let test: Vec<CameraView> = test_cams.iter().map(|c| observe(c, &mut rng)).collect::<Result<_>>()?;
    let test_clean = test_cams.iter().map(|c| renders[&c.view_id].clone()).collect();

    // monocular priors: per-view affine warp of the true inverse depth
    let mut mono = BTreeMap::new();
    for cam in &train {
        let d = &gt_depth[&cam.view_id];
        let (a, b) = (rng.random_range(0.5..2.0), rng.random_range(0.05..0.3));
        let data = (0..w * h)
            .map(|i| {
                if !d.valid[i] {
                    return 0.0;
                }
                let n = 1.0 + spec.depth_noise * noise.sample(&mut rng);
                (a / d.values[i] + b) * n
            })
            .collect();
        mono.insert(cam.view_id, MonoPrior::new(cam.view_id, Grid::from_vec(w, h, data)?));
    }

    // pointmaps: true surface points under a random per-view similarity
    let mut pointmaps = Vec::new();
    let mut pointmap_transforms = BTreeMap::new();
    for cam in &train {
        let d = &gt_depth[&cam.view_id];
        let sim = Sim3::new(
            rng.random_range(0.5..2.0),
            random_rotation(&mut rng),
            Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ),
        )?;
        let mut points = vec![Vec3::zeros(); w * h];
        let mut valid = vec![false; w * h];
        for i in 0..w * h {
            if d.valid[i] {
                let n = 1.0 + spec.depth_noise * noise.sample(&mut rng);
                let p = cam.backproject(&Vector2::new((i % w) as f64, (i / w) as f64), d.values[i] * n)?;
                points[i] = sim.apply(&p);
                valid[i] = true;
            }
        }
        pointmaps.push(Pointmap {
            view_id: cam.view_id,
            width: w,
            height: h,
            points,
            valid,
        });
        pointmap_transforms.insert(cam.view_id, sim);
    }

    let sparse = sparse_from_surface(spec, &train, &gt_depth, &mut rng);
    Ok(SyntheticScene {
        spec: spec.clone(),
        gt_cloud: cloud,
        train,
        test,
        test_clean,
        gt_depth,
        sparse,
        mono,
        pointmaps,
        pointmap_transforms,
        gains,
    })
}

/// SfM stand-in: random surface points observed by every training view in
/// which they pass a depth test; points seen fewer than twice are dropped.
fn sparse_from_surface(
    spec: &SyntheticSpec,
    train: &[CameraView],
    gt_depth: &BTreeMap<ViewId, DepthMap>,
    rng: &mut ChaCha8Rng,
) -> SparseScene {
    let dense = surface_points(spec.shape, spec.sparse_points * 8);
    let mut points = Vec::new();
    let mut tracks: BTreeMap<ViewId, Vec<Observation>> = train.iter().map(|c| (c.view_id, Vec::new())).collect();
    let mut next_id = 1u64;
    for _ in 0..spec.sparse_points {
        let (p, _) = dense[rng.random_range(0..dense.len())];
        let mut obs = Vec::new();
        for cam in train {
            let Ok((px, z)) = cam.project(&p) else {
                continue;
            };
            let Some(d) = gt_depth[&cam.view_id].nearest(px.x, px.y) else {
                continue;
            };
            if (d - z).abs() <= 0.02 * z {
                obs.push((cam.view_id, px));
            }
        }
        if obs.len() < 2 {
            continue;
        }
        let id = next_id;
        next_id += 1;
        for (v, px) in &obs {
            tracks.get_mut(v).expect("train view").push(Observation {
                pixel: *px,
                point_id: id,
            });
        }
        points.push(SparsePoint {
            id,
            position: p,
            color: texture(&p),
            observers: obs.iter().map(|o| o.0).collect(),
        });
    }
    SparseScene {
        cameras: train.to_vec(),
        points,
        tracks,
    }
}

/// Uniform random samples of the analytic surface (for geometry scoring).
pub fn surface_samples(shape: Shape, n: usize) -> Vec<Vec3> {
    surface_points(shape, n).into_iter().map(|(p, _)| p).collect()
}

/// Ray-cast view of an infinite textured plane: image, depth and camera-frame normal.
pub fn plane_view(cam: &CameraView, point: &Vec3, normal: &Vec3) -> (ImageRgb, DepthMap, Vec3) {
    let (w, h) = (cam.width, cam.height);
    let pc = cam.pose.apply(point);
    let mut nc = cam.pose.rotation * normal.normalize();
    if nc.z > 0.0 {
        nc = -nc;
    }
    let inv = cam.pose.inverse();
    let mut image = Grid::new(w, h, [0.0; 3]);
    let mut depth = DepthMap::invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            let r = cam.ray(x as f64, y as f64);
            let denom = nc.dot(&r);
            if denom.abs() < 1e-12 {
                continue;
            }
            let z = nc.dot(&pc) / denom;
            if z > 0.0 {
                depth.set(x, y, Some(z));
                *image.get_mut(x, y) = texture(&inv.apply(&(r * z)));
            }
        }
    }
    (image, depth, nc)
}

/// Writes the bundle that the file-based pipeline stages ingest.
pub fn write_bundle(scene: &SyntheticScene, dir: &Path) -> Result<()> {
    let mk = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(format!("creating {}", p.display()), e));
    for sub in [
        "colmap",
        "images",
        "depth",
        "mono",
        "pointmaps",
        "test/colmap",
        "test/images",
        "test/clean",
    ] {
        mk(&dir.join(sub))?;
    }
    scene.gt_cloud.save_ply(&dir.join("gt_cloud.ply"))?;
    let samples = surface_samples(scene.spec.shape, 20000);
    io::write_point_cloud(&dir.join("gt_points.ply"), &samples, &[])?;
    write_colmap(&scene.sparse, &dir.join("colmap"))?;
    let test_scene = SparseScene {
        cameras: scene.test.clone(),
        points: Vec::new(),
        tracks: scene.test.iter().map(|c| (c.view_id, Vec::new())).collect(),
    };
    write_colmap(&test_scene, &dir.join("test/colmap"))?;
    for cam in &scene.train {
        io::write_ppm(
            &dir.join("images").join(format!("{}.ppm", cam.name)),
            cam.image().expect("image"),
        )?;
    }
    // observed test images carry the same gain and noise as training images
    for (cam, clean) in scene.test.iter().zip(&scene.test_clean) {
        io::write_ppm(
            &dir.join("test/images").join(format!("{}.ppm", cam.name)),
            cam.image().expect("image"),
        )?;
        io::write_ppm(&dir.join("test/clean").join(format!("{}.ppm", cam.name)), clean)?;
    }
    for (id, d) in &scene.gt_depth {
        io::write_depth(&dir.join("depth").join(format!("{}.pfm", id.0)), d)?;
    }
    for m in scene.mono.values() {
        m.save(&dir.join("mono"))?;
    }
    for pm in &scene.pointmaps {
        pm.save(&dir.join("pointmaps"))?;
    }
    let meta = serde_json::json!({
        "spec": scene.spec,
        "gains": scene.gains.iter().map(|(k, v)| (k.0.to_string(), *v)).collect::<BTreeMap<_, _>>(),
    });
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io("writing meta.json", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn texture_in_range_and_varied() {
        let a = texture(&Vec3::new(0.1, 0.2, 0.3));
        let b = texture(&Vec3::new(0.4, -0.2, 0.3));
        assert!(a.iter().chain(&b).all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, b);
    }

    #[test]
    fn surface_points_lie_on_shape() {
        for (p, n) in surface_points(Shape::Sphere, 500) {
            assert!((p.norm() - 1.0).abs() < 1e-12 && (n - p).norm() < 1e-12);
        }
        let pts = surface_points(Shape::Boxes, 2000);
        assert!(pts.len() > 1500 && pts.iter().all(|(_, n)| (n.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn generation_is_deterministic_and_consistent() {
        let spec = SyntheticSpec {
            surfel_count: 600,
            view_count: 6,
            test_view_count: 2,
            width: 24,
            height: 24,
            sparse_points: 150,
            seed: 9,
            ..Default::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.gt_cloud, b.gt_cloud);
        assert_eq!(a.train[3].image().unwrap(), b.train[3].image().unwrap());
        assert_eq!(a.mono, b.mono);
        a.sparse.validate().unwrap();
        assert!(a.sparse.points.len() > 25);
        // noise-free prior is an exact affine map of the true inverse depth
        let m = &a.mono[&ViewId(0)];
        let d = &a.gt_depth[&ViewId(0)];
        let samples: Vec<(f64, f64)> = (0..d.values.len())
            .filter(|&i| d.valid[i])
            .map(|i| (1.0 / d.values[i], m.inverse_depth.data[i]))
            .collect();
        let (s, t) = crate::geo_refine::fit_affine(&samples).unwrap();
        assert!(samples.iter().all(|(x, y)| (s * x + t - y).abs() < 1e-9));
    }
}
