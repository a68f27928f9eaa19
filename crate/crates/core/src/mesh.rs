//! TSDF fusion of depth maps and marching-cubes surface extraction.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraView, DepthMap, ImageRgb, Rgb, Vec3};
use crate::io::{self, PlyElement, PlyProperty, PlyScalar};
use crate::mc_tables::TRI_TABLE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsdfConfig {
    pub voxel_size: f64,
    pub sdf_trunc: f64,
    pub depth_trunc: f64,
}

impl Default for TsdfConfig {
    fn default() -> Self {
        TsdfConfig {
            voxel_size: 0.01,
            sdf_trunc: 0.04,
            depth_trunc: 2.0,
        }
    }
}

/// Regular grid of truncated signed distances; sample `(i, j, k)` sits at
/// `origin + voxel_size · (i, j, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    /// Normalized by the truncation distance, in `[-1, 1]`.
    pub tsdf: Vec<f64>,
    pub weight: Vec<f64>,
    pub color: Vec<Rgb>,
}

impl TsdfVolume {
    pub fn new(origin: Vec3, voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_size > 0.0) || dims.contains(&0) {
            return Err(Error::ConfigInvalid(
                "volume needs a positive voxel size and extent".into(),
            ));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(TsdfVolume {
            origin,
            voxel_size,
            dims,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        })
    }

    /// Volume covering the box `[lo, hi]` plus a margin of `pad` voxels.
    pub fn covering(lo: Vec3, hi: Vec3, voxel_size: f64, pad: usize) -> Result<Self> {
        if !(voxel_size > 0.0) {
            return Err(Error::ConfigInvalid("voxel size must be positive".into()));
        }
        let origin = lo - Vec3::repeat(pad as f64 * voxel_size);
        let size = hi - lo;
        let dims = [0, 1, 2].map(|a| (size[a] / voxel_size).ceil() as usize + 1 + 2 * pad);
        Self::new(origin, voxel_size, dims)
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.voxel_size
    }

    pub fn observed_count(&self) -> usize {
        self.weight.iter().filter(|w| **w > 0.0).count()
    }
}

/// Projective TSDF update from one depth map (nearest-pixel lookup).
pub fn tsdf_integrate(
    volume: &mut TsdfVolume,
    depth: &DepthMap,
    image: Option<&ImageRgb>,
    camera: &CameraView,
    sdf_trunc: f64,
    depth_trunc: f64,
) -> Result<()> {
    if !(sdf_trunc >= volume.voxel_size) || !(depth_trunc > 0.0) {
        return Err(Error::BadTruncation(format!(
            "sdf_trunc {sdf_trunc} (voxel {}) depth_trunc {depth_trunc}",
            volume.voxel_size
        )));
    }
    if depth.width != camera.width || depth.height != camera.height {
        return Err(Error::ShapeMismatch("depth does not match camera".into()));
    }
    let [nx, ny, _] = volume.dims;
    let (origin, vs) = (volume.origin, volume.voxel_size);
    let slab = nx * ny;
    volume
        .tsdf
        .par_chunks_mut(slab)
        .zip(volume.weight.par_chunks_mut(slab))
        .zip(volume.color.par_chunks_mut(slab))
        .enumerate()
        .for_each(|(k, ((tsdf, weight), color))| {
            for j in 0..ny {
                for i in 0..nx {
                    let p = origin + Vec3::new(i as f64, j as f64, k as f64) * vs;
                    let Ok((px, z)) = camera.project(&p) else {
                        continue;
                    };
                    let Some(d) = depth.nearest(px.x, px.y) else {
                        continue;
                    };
                    if d > depth_trunc {
                        continue;
                    }
                    let sdf = (d - z) / sdf_trunc;
                    if sdf < -1.0 {
                        continue;
                    }
                    let sdf = sdf.min(1.0);
                    let v = j * nx + i;
                    let w = weight[v];
                    tsdf[v] = (tsdf[v] * w + sdf) / (w + 1.0);
                    if let Some(img) = image {
                        let c = img.get(px.x.round() as usize, px.y.round() as usize);
                        for ch in 0..3 {
                            color[v][ch] = (color[v][ch] * w + c[ch]) / (w + 1.0);
                        }
                    }
                    weight[v] = w + 1.0;
                }
            }
        });
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub colors: Vec<Rgb>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Number of undirected edges not shared by exactly two faces.
    pub fn boundary_edge_count(&self) -> usize {
        let mut count: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().filter(|&&c| c != 2).count()
    }

    pub fn is_watertight(&self) -> bool {
        !self.faces.is_empty() && self.boundary_edge_count() == 0
    }

    pub fn save_ply(&self, path: &Path) -> Result<()> {
        let mut v = PlyElement::scalars(
            "vertex",
            &[
                ("x", PlyScalar::F32),
                ("y", PlyScalar::F32),
                ("z", PlyScalar::F32),
                ("red", PlyScalar::U8),
                ("green", PlyScalar::U8),
                ("blue", PlyScalar::U8),
            ],
        );
        let byte = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round();
        v.rows = self
            .vertices
            .iter()
            .zip(&self.colors)
            .map(|(p, c)| vec![p.x, p.y, p.z, byte(c[0]), byte(c[1]), byte(c[2])])
            .collect();
        let f = PlyElement {
            name: "face".into(),
            properties: vec![PlyProperty::List(
                "vertex_indices".into(),
                PlyScalar::U8,
                PlyScalar::I32,
            )],
            rows: Vec::new(),
            lists: self
                .faces
                .iter()
                .map(|f| vec![f.iter().map(|&i| i as f64).collect()])
                .collect(),
        };
        io::write_ply(path, &[v, f])
    }
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Marching cubes over cells whose eight samples are all observed. Vertices
/// on shared grid edges are merged, so closed surfaces come out watertight.
pub fn marching_cubes(volume: &TsdfVolume, iso: f64) -> Result<TriangleMesh> {
    if volume.observed_count() == 0 {
        return Err(Error::EmptyVolume);
    }
    let [nx, ny, nz] = volume.dims;
    let mut mesh = TriangleMesh::default();
    // grid edge (lower sample index, axis) -> vertex index
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    for k in 0..nz.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            for i in 0..nx.saturating_sub(1) {
                let idx = CORNERS.map(|c| volume.index(i + c[0], j + c[1], k + c[2]));
                if idx.iter().any(|&v| volume.weight[v] <= 0.0) {
                    continue;
                }
                let mut case = 0usize;
                for (b, &v) in idx.iter().enumerate() {
                    if volume.tsdf[v] < iso {
                        case |= 1 << b;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRI_TABLE[case];
                let mut t = 0;
                while t + 2 < 16 && row[t] >= 0 {
                    let mut tri = [0u32; 3];
                    for (s, slot) in tri.iter_mut().enumerate() {
                        let [a, b] = EDGES[row[t + s] as usize];
                        let (ca, cb) = (CORNERS[a], CORNERS[b]);
                        let lower = if ca <= cb { ca } else { cb };
                        let axis = (0..3).find(|&x| ca[x] != cb[x]).expect("edge spans one axis");
                        let key = (volume.index(i + lower[0], j + lower[1], k + lower[2]), axis);
                        *slot = *edge_vertex.entry(key).or_insert_with(|| {
                            let (va, vb) = (volume.tsdf[idx[a]], volume.tsdf[idx[b]]);
                            let s = if va == vb {
                                0.5
                            } else {
                                ((iso - va) / (vb - va)).clamp(0.0, 1.0)
                            };
                            let pa = volume.position(i + ca[0], j + ca[1], k + ca[2]);
                            let pb = volume.position(i + cb[0], j + cb[1], k + cb[2]);
                            let (qa, qb) = (volume.color[idx[a]], volume.color[idx[b]]);
                            mesh.vertices.push(pa + (pb - pa) * s);
                            mesh.colors.push([0, 1, 2].map(|c| qa[c] + (qb[c] - qa[c]) * s));
                            (mesh.vertices.len() - 1) as u32
                        });
                    }
                    mesh.faces.push(tri);
                    t += 3;
                }
            }
        }
    }
    Ok(mesh)
}

/// Fuses the given depth maps (with optional colors) into a fresh volume
/// bounding `bounds`, then extracts the zero level set.
pub fn fuse_and_extract(
    views: &[(CameraView, DepthMap, Option<ImageRgb>)],
    bounds: (Vec3, Vec3),
    cfg: &TsdfConfig,
) -> Result<TriangleMesh> {
    let pad = (cfg.sdf_trunc / cfg.voxel_size).ceil() as usize + 1;
    let mut volume = TsdfVolume::covering(bounds.0, bounds.1, cfg.voxel_size, pad)?;
    for (cam, depth, img) in views {
        tsdf_integrate(&mut volume, depth, img.as_ref(), cam, cfg.sdf_trunc, cfg.depth_trunc)?;
    }
    marching_cubes(&volume, 0.0)
}

/// Exact depth of an analytic sphere seen from `camera`.
pub fn sphere_depth(camera: &CameraView, center: &Vec3, radius: f64) -> DepthMap {
    let mut d = DepthMap::invalid(camera.width, camera.height);
    let c = camera.pose.apply(center);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let r = camera.ray(x as f64, y as f64);
            // |t·r − c|² = radius²
            let (a, b, cc) = (r.dot(&r), -2.0 * r.dot(&c), c.dot(&c) - radius * radius);
            let disc = b * b - 4.0 * a * cc;
            if disc >= 0.0 {
                let t = (-b - disc.sqrt()) / (2.0 * a);
                if t > 0.0 {
                    d.set(x, y, Some(t));
                }
            }
        }
    }
    d
}
