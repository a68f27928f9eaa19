#![allow(dead_code)]

use metrokit::eval::{eval_geometry, GeometryScore};
use metrokit::geometry::{CameraView, DepthMap, Grid, Intrinsics, Pose, Vec3, ViewId};
use metrokit::mesh::{fuse_and_extract, sphere_depth, TriangleMesh, TsdfConfig};
use metrokit::mvs::{
    geometric_filter, patchmatch_refine, restore_with_mono, FilterConfig, PatchMatchConfig, RefinedDepth,
};
use metrokit::render::{render, RenderConfig};
use metrokit::synth::{camera_ring, gt_cloud, plane_view, surface_samples, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct MeshRun {
    pub mesh: TriangleMesh,
    pub score: GeometryScore,
}

/// Unit sphere seen by 20 cameras at 64×64, fused at voxel r/32 and scored
/// at twice the voxel size. With `rendered` the depths come from the surfel
/// renderer applied to the ground-truth cloud, otherwise from the analytic sphere.
pub fn sphere_mesh(rendered: bool) -> MeshRun {
    let r = 1.0;
    let voxel = r / 32.0;
    let cams = camera_ring(Shape::Sphere, 20, 64, 64, 0, 0.0);
    let cloud = gt_cloud(Shape::Sphere, 4000);
    let views: Vec<_> = cams
        .iter()
        .map(|c| {
            let d: DepthMap = if rendered {
                render(&cloud, c, &RenderConfig::default()).median_depth
            } else {
                sphere_depth(c, &Vec3::zeros(), r)
            };
            (c.clone(), d, None)
        })
        .collect();
    let cfg = TsdfConfig {
        voxel_size: voxel,
        sdf_trunc: 4.0 * voxel,
        depth_trunc: 10.0,
    };
    let mesh = fuse_and_extract(&views, (Vec3::repeat(-1.1 * r), Vec3::repeat(1.1 * r)), &cfg).unwrap();
    let gt = surface_samples(Shape::Sphere, 20_000);
    let score = eval_geometry(&mesh.vertices, &gt, 2.0 * voxel).unwrap();
    MeshRun { mesh, score }
}

pub const W: usize = 48;

pub fn intrinsics() -> Intrinsics {
    Intrinsics {
        fx: W as f64,
        fy: W as f64,
        cx: W as f64 / 2.0 - 0.5,
        cy: W as f64 / 2.0 - 0.5,
    }
}

pub fn camera(id: u32, pose: Pose) -> CameraView {
    CameraView::new(ViewId(id), intrinsics(), W, W, pose).unwrap()
}

/// Reference plus neighbors looking at the origin from a small arc.
pub fn arc_cameras(count: usize) -> Vec<CameraView> {
    (0..count)
        .map(|i| {
            let a = (i as f64 - (count - 1) as f64 / 2.0) * 0.12;
            let eye = Vec3::new(3.0 * a.sin(), 0.4 * (i % 2) as f64 - 0.2, 3.0 * a.cos());
            camera(i as u32, Pose::look_at(eye, Vec3::zeros(), Vec3::y()))
        })
        .collect()
}

pub fn textured(cams: &[CameraView], point: &Vec3, normal: &Vec3) -> (Vec<CameraView>, Vec<DepthMap>, Vec3) {
    let mut views = Vec::new();
    let mut depths = Vec::new();
    let mut n_ref = Vec3::zeros();
    for (k, c) in cams.iter().enumerate() {
        let (img, depth, n) = plane_view(c, point, normal);
        if k == 0 {
            n_ref = n;
        }
        views.push(c.clone().with_image(img).unwrap());
        depths.push(depth);
    }
    (views, depths, n_ref)
}

pub fn interior_error(a: &DepthMap, truth: &DepthMap, border: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for y in border..W - border {
        for x in border..W - border {
            if let (Some(d), Some(t)) = (a.at(x, y), truth.at(x, y)) {
                sum += (d - t).abs() / t;
                n += 1;
            }
        }
    }
    sum / n as f64
}

/// Mean relative interior depth error of the slanted-plane fixture before
/// and after PatchMatch, starting from truth with 2% multiplicative noise.
pub fn slanted_plane_refinement() -> (f64, f64, bool) {
    let cams = arc_cameras(4);
    let (views, depths, n_ref) = textured(&cams, &Vec3::zeros(), &Vec3::new(0.35, -0.2, 1.0));
    let truth = &depths[0];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut init = truth.clone();
    for i in 0..init.values.len() {
        if init.valid[i] {
            init.values[i] *= 1.0 + noise.sample(&mut rng);
        }
    }
    let normals = Grid::new(W, W, [n_ref.x, n_ref.y, n_ref.z]);
    let out = patchmatch_refine(&views[0], &init, &normals, &views[1..], &PatchMatchConfig::default()).unwrap();
    (
        interior_error(&init, truth, 6),
        interior_error(&out.depth, truth, 6),
        out.monotone,
    )
}

pub struct FilterRates {
    pub outliers: usize,
    pub caught: usize,
    pub inliers: usize,
    pub kept: usize,
    pub consistent: bool,
    pub fingerprint: Vec<bool>,
}

/// Geometric filter on a plane whose reference depth has 5% of pixels scaled by 1.5.
pub fn outlier_filter() -> FilterRates {
    // wide-angle neighbors see the whole reference footprint
    let mut cams = arc_cameras(4);
    for c in cams.iter_mut().skip(1) {
        c.intrinsics.fx *= 0.6;
        c.intrinsics.fy *= 0.6;
    }
    let (_, depths, _) = textured(&cams, &Vec3::zeros(), &Vec3::new(0.2, 0.1, 1.0));
    let mut corrupted = depths[0].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut outlier = vec![false; W * W];
    for i in 0..W * W {
        if corrupted.valid[i] && rng.random_bool(0.05) {
            corrupted.values[i] *= 1.5;
            outlier[i] = true;
        }
    }
    let neighbors: Vec<(CameraView, DepthMap)> = cams[1..].iter().cloned().zip(depths[1..].iter().cloned()).collect();
    let out = geometric_filter(&cams[0], &corrupted, &neighbors, &FilterConfig::default());
    FilterRates {
        outliers: outlier.iter().filter(|&&o| o).count(),
        caught: (0..W * W).filter(|&i| outlier[i] && !out.depth.valid[i]).count(),
        inliers: (0..W * W).filter(|&i| corrupted.valid[i] && !outlier[i]).count(),
        kept: (0..W * W).filter(|&i| !outlier[i] && out.depth.valid[i]).count(),
        consistent: out.is_consistent(),
        fingerprint: out.depth.valid.clone(),
    }
}

pub struct RestoreRun {
    /// Largest deviation of the restored map from the true depth.
    pub max_err: f64,
    pub holes_left: usize,
    /// Valid input pixels whose value changed at all.
    pub changed: usize,
    pub consistent: bool,
}

/// Checkerboard of valid pixels over a planar depth, with a monocular map
/// that is an exact affine function of it.
pub fn restore_fixture() -> RestoreRun {
    let (w, h) = (32, 32);
    let truth = |x: usize, y: usize| 2.0 + 0.03 * x as f64 + 0.02 * y as f64;
    let map = |f: &dyn Fn(usize, usize) -> Option<f64>| {
        let mut d = DepthMap::invalid(w, h);
        for y in 0..h {
            for x in 0..w {
                if let Some(v) = f(x, y) {
                    d.values[y * w + x] = v;
                    d.valid[y * w + x] = true;
                }
            }
        }
        d
    };
    let mono = map(&|x, y| Some((truth(x, y) + 1.0) / 2.0));
    let filtered = RefinedDepth::from_depth(map(&|x, y| ((x + y) % 2 == 0).then(|| truth(x, y))));
    let out = restore_with_mono(&filtered, &mono, 16, 1e-6).unwrap();
    let mut run = RestoreRun {
        max_err: 0.0,
        holes_left: 0,
        changed: 0,
        consistent: out.is_consistent(),
    };
    for y in 0..h {
        for x in 0..w {
            match out.depth.at(x, y) {
                Some(v) => {
                    run.max_err = run.max_err.max((v - truth(x, y)).abs());
                    if (x + y) % 2 == 0 && v.to_bits() != truth(x, y).to_bits() {
                        run.changed += 1;
                    }
                }
                None => run.holes_left += 1,
            }
        }
    }
    run
}
