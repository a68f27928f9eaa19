//! COLMAP text-format ingestion and the co-observation image graph.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector2};

use crate::error::{Error, Result};
use crate::geometry::{CameraView, Intrinsics, Pose, Rgb, Vec3, ViewId};

pub type PointId = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct SparsePoint {
    pub id: PointId,
    pub position: Vec3,
    pub color: Rgb,
    /// Observing views, ascending and unique.
    pub observers: Vec<ViewId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub pixel: Vector2<f64>,
    pub point_id: PointId,
}

/// Sparse structure-from-motion output.
#[derive(Debug, Clone, Default)]
pub struct SparseScene {
    /// Ascending by view id.
    pub cameras: Vec<CameraView>,
    /// Ascending by point id.
    pub points: Vec<SparsePoint>,
    pub tracks: BTreeMap<ViewId, Vec<Observation>>,
}

impl SparseScene {
    pub fn camera(&self, view: ViewId) -> Option<&CameraView> {
        self.cameras
            .binary_search_by_key(&view, |c| c.view_id)
            .ok()
            .map(|i| &self.cameras[i])
    }

    pub fn point(&self, id: PointId) -> Option<&SparsePoint> {
        self.points
            .binary_search_by_key(&id, |p| p.id)
            .ok()
            .map(|i| &self.points[i])
    }

    pub fn view_ids(&self) -> Vec<ViewId> {
        self.cameras.iter().map(|c| c.view_id).collect()
    }

    pub fn track_count(&self) -> usize {
        self.tracks.values().map(Vec::len).sum()
    }

    /// `(pixel, camera depth)` of every track of `view` whose point projects in front.
    pub fn sparse_depths(&self, view: ViewId) -> Result<Vec<(Vector2<f64>, f64)>> {
        let cam = self.camera(view).ok_or(Error::UnknownView(view))?;
        let mut out = Vec::new();
        for obs in self.tracks.get(&view).map(Vec::as_slice).unwrap_or(&[]) {
            if let Some(p) = self.point(obs.point_id) {
                let z = cam.pose.apply(&p.position).z;
                if z > 0.0 {
                    out.push((obs.pixel, z));
                }
            }
        }
        Ok(out)
    }

    /// Checks referential integrity and that ≥99% of tracks have positive depth.
    pub fn validate(&self) -> Result<()> {
        for w in self.cameras.windows(2) {
            if w[0].view_id >= w[1].view_id {
                return Err(Error::InvalidScene("cameras not sorted by unique id".into()));
            }
        }
        for w in self.points.windows(2) {
            if w[0].id >= w[1].id {
                return Err(Error::InvalidScene("points not sorted by unique id".into()));
            }
        }
        for p in &self.points {
            for v in &p.observers {
                if self.camera(*v).is_none() {
                    return Err(Error::InvalidScene(format!(
                        "point {} observed by unknown view {v}",
                        p.id
                    )));
                }
            }
        }
        let (mut total, mut positive) = (0usize, 0usize);
        for (view, obs) in &self.tracks {
            let cam = self
                .camera(*view)
                .ok_or_else(|| Error::InvalidScene(format!("tracks for unknown view {view}")))?;
            for o in obs {
                let p = self
                    .point(o.point_id)
                    .ok_or_else(|| Error::InvalidScene(format!("track references unknown point {}", o.point_id)))?;
                total += 1;
                if cam.pose.apply(&p.position).z > 0.0 {
                    positive += 1;
                }
            }
        }
        if total > 0 && (positive as f64) < 0.99 * total as f64 {
            return Err(Error::InvalidScene(format!(
                "only {positive} of {total} tracks have positive depth"
            )));
        }
        Ok(())
    }
}

struct Lines<'a> {
    file: &'static str,
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(file: &'static str, text: &'a str) -> Self {
        Lines {
            file,
            iter: text.lines().enumerate(),
        }
    }

    /// Next non-blank, non-comment line with its 1-based number.
    fn next_record(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.iter.by_ref() {
            let t = l.trim();
            if !t.is_empty() && !t.starts_with('#') {
                return Some((i + 1, t));
            }
        }
        None
    }

    /// The immediately following line, which may be blank.
    fn next_raw(&mut self) -> Option<(usize, &'a str)> {
        self.iter.next().map(|(i, l)| (i + 1, l.trim()))
    }

    fn err(&self, line: usize, reason: impl Into<String>) -> Error {
        Error::MalformedLine {
            file: self.file.into(),
            line,
            reason: reason.into(),
        }
    }
}

/// A keypoint and the 3D point it observes, if any.
type Observation2d = (Vector2<f64>, Option<PointId>);

fn field<T: std::str::FromStr>(lines: &Lines, line: usize, tok: Option<&str>, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| lines.err(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| lines.err(line, format!("invalid {what} {tok:?}")))
}

fn read_text(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parses `cameras.txt`, `images.txt` and `points3D.txt` from `dir`.
pub fn parse_colmap(dir: &Path) -> Result<SparseScene> {
    let cameras_txt = read_text(dir, "cameras.txt")?;
    let images_txt = read_text(dir, "images.txt")?;
    let points_txt = read_text(dir, "points3D.txt")?;

    let mut intrinsics: HashMap<u32, (Intrinsics, usize, usize)> = HashMap::new();
    let mut lines = Lines::new("cameras.txt", &cameras_txt);
    while let Some((n, l)) = lines.next_record() {
        let mut tok = l.split_whitespace();
        let id: u32 = field(&lines, n, tok.next(), "camera id")?;
        let model = tok.next().ok_or_else(|| lines.err(n, "missing model"))?;
        let width: usize = field(&lines, n, tok.next(), "width")?;
        let height: usize = field(&lines, n, tok.next(), "height")?;
        let params: Vec<f64> = tok
            .map(|t| t.parse().map_err(|_| lines.err(n, format!("invalid parameter {t:?}"))))
            .collect::<Result<_>>()?;
        let k = match (model, params.as_slice()) {
            ("PINHOLE", [fx, fy, cx, cy]) => Intrinsics {
                fx: *fx,
                fy: *fy,
                cx: *cx,
                cy: *cy,
            },
            ("SIMPLE_PINHOLE", [f, cx, cy]) => Intrinsics {
                fx: *f,
                fy: *f,
                cx: *cx,
                cy: *cy,
            },
            ("PINHOLE" | "SIMPLE_PINHOLE", _) => return Err(lines.err(n, format!("wrong parameter count for {model}"))),
            _ => return Err(Error::UnsupportedCameraModel(model.into())),
        };
        intrinsics.insert(id, (k, width, height));
    }

    let mut cameras = Vec::new();
    // per image, the POINTS2D list in file order (point id or None)
    let mut points2d: BTreeMap<ViewId, Vec<Observation2d>> = BTreeMap::new();
    let mut lines = Lines::new("images.txt", &images_txt);
    while let Some((n, l)) = lines.next_record() {
        let mut tok = l.split_whitespace();
        let id: u32 = field(&lines, n, tok.next(), "image id")?;
        let mut q = [0.0; 4];
        for (i, v) in q.iter_mut().enumerate() {
            *v = field(&lines, n, tok.next(), &format!("quaternion component {i}"))?;
        }
        let mut t = [0.0; 3];
        for (i, v) in t.iter_mut().enumerate() {
            *v = field(&lines, n, tok.next(), &format!("translation component {i}"))?;
        }
        let cam_id: u32 = field(&lines, n, tok.next(), "camera id")?;
        let name = tok.collect::<Vec<_>>().join(" ");
        let &(k, width, height) = intrinsics
            .get(&cam_id)
            .ok_or_else(|| lines.err(n, format!("unknown camera id {cam_id}")))?;
        let quat = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        let pose = Pose::new(quat.to_rotation_matrix().into_inner(), Vec3::new(t[0], t[1], t[2]));
        let mut cam = CameraView::new(ViewId(id), k, width, height, pose).map_err(|e| lines.err(n, e.to_string()))?;
        cam.name = name;
        cameras.push(cam);

        let mut obs = Vec::new();
        if let Some((m, pl)) = lines.next_raw() {
            let toks: Vec<&str> = pl.split_whitespace().collect();
            if !toks.len().is_multiple_of(3) {
                return Err(lines.err(m, "POINTS2D entries must come in triples"));
            }
            for c in toks.chunks_exact(3) {
                let x: f64 = field(&lines, m, Some(c[0]), "x")?;
                let y: f64 = field(&lines, m, Some(c[1]), "y")?;
                let pid: i64 = field(&lines, m, Some(c[2]), "point id")?;
                obs.push((Vector2::new(x, y), (pid >= 0).then_some(pid as PointId)));
            }
        }
        if points2d.insert(ViewId(id), obs).is_some() {
            return Err(lines.err(n, format!("duplicate image id {id}")));
        }
    }
    cameras.sort_by_key(|c| c.view_id);

    let mut points = Vec::new();
    let mut lines = Lines::new("points3D.txt", &points_txt);
    while let Some((n, l)) = lines.next_record() {
        let mut tok = l.split_whitespace();
        let id: PointId = field(&lines, n, tok.next(), "point id")?;
        let x: f64 = field(&lines, n, tok.next(), "x")?;
        let y: f64 = field(&lines, n, tok.next(), "y")?;
        let z: f64 = field(&lines, n, tok.next(), "z")?;
        let mut color = [0.0; 3];
        for c in color.iter_mut() {
            let v: f64 = field(&lines, n, tok.next(), "color")?;
            *c = v / 255.0;
        }
        let _err: f64 = field(&lines, n, tok.next(), "error")?;
        let rest: Vec<&str> = tok.collect();
        if !rest.len().is_multiple_of(2) {
            return Err(lines.err(n, "TRACK entries must come in pairs"));
        }
        let mut observers = BTreeSet::new();
        for c in rest.chunks_exact(2) {
            let img: u32 = field(&lines, n, Some(c[0]), "track image id")?;
            let _idx: usize = field(&lines, n, Some(c[1]), "track point2D index")?;
            if !points2d.contains_key(&ViewId(img)) {
                return Err(lines.err(n, format!("track references unknown image {img}")));
            }
            observers.insert(ViewId(img));
        }
        points.push(SparsePoint {
            id,
            position: Vec3::new(x, y, z),
            color,
            observers: observers.into_iter().collect(),
        });
    }
    points.sort_by_key(|p| p.id);

    let tracks = points2d
        .into_iter()
        .map(|(v, obs)| {
            (
                v,
                obs.into_iter()
                    .filter_map(|(pixel, pid)| pid.map(|point_id| Observation { pixel, point_id }))
                    .collect(),
            )
        })
        .collect();
    let scene = SparseScene {
        cameras,
        points,
        tracks,
    };
    scene.validate()?;
    Ok(scene)
}

/// Writes the scene in COLMAP text layout (one PINHOLE camera per image).
pub fn write_colmap(scene: &SparseScene, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut cameras = String::from(
        "# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n",
    );
    let mut images = String::from("# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    // (view, index within that view's POINTS2D) per point
    let mut refs: BTreeMap<PointId, Vec<(ViewId, usize)>> = BTreeMap::new();
    for cam in &scene.cameras {
        let k = &cam.intrinsics;
        let _ = writeln!(
            cameras,
            "{} PINHOLE {} {} {} {} {} {}",
            cam.view_id, cam.width, cam.height, k.fx, k.fy, k.cx, k.cy
        );
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(cam.pose.rotation));
        let t = cam.pose.translation;
        let _ = writeln!(
            images,
            "{} {} {} {} {} {} {} {} {} {}",
            cam.view_id, q.w, q.i, q.j, q.k, t.x, t.y, t.z, cam.view_id, cam.name
        );
        let obs = scene.tracks.get(&cam.view_id).map(Vec::as_slice).unwrap_or(&[]);
        let row: Vec<String> = obs
            .iter()
            .enumerate()
            .map(|(i, o)| {
                refs.entry(o.point_id).or_default().push((cam.view_id, i));
                format!("{} {} {}", o.pixel.x, o.pixel.y, o.point_id)
            })
            .collect();
        let _ = writeln!(images, "{}", row.join(" "));
    }
    let mut points = String::from("# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    for p in &scene.points {
        let c = p.color.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
        let mut line = format!(
            "{} {} {} {} {} {} {} 0",
            p.id, p.position.x, p.position.y, p.position.z, c[0], c[1], c[2]
        );
        let tracked = refs.get(&p.id).cloned().unwrap_or_default();
        let tracked_views: BTreeSet<ViewId> = tracked.iter().map(|(v, _)| *v).collect();
        for (v, i) in &tracked {
            let _ = write!(line, " {v} {i}");
        }
        // observers without a 2D entry still need to appear in the track
        for v in &p.observers {
            if !tracked_views.contains(v) {
                let _ = write!(line, " {v} 0");
            }
        }
        let _ = writeln!(points, "{line}");
    }
    for (name, text) in [
        ("cameras.txt", cameras),
        ("images.txt", images),
        ("points3D.txt", points),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Undirected weighted image graph; weights are co-observed point counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    /// Ascending view ids.
    pub nodes: Vec<ViewId>,
    /// Dense symmetric `n × n` weights, zero diagonal.
    weights: Vec<f64>,
}

impl SceneGraph {
    pub fn new(mut nodes: Vec<ViewId>) -> Self {
        nodes.sort();
        nodes.dedup();
        let n = nodes.len();
        SceneGraph {
            nodes,
            weights: vec![0.0; n * n],
        }
    }

    /// Builds a graph from `(a, b, w)` triples; repeated edges accumulate.
    pub fn from_edges(nodes: Vec<ViewId>, edges: &[(ViewId, ViewId, f64)]) -> Result<Self> {
        let mut g = SceneGraph::new(nodes);
        for &(a, b, w) in edges {
            g.add_weight(a, b, w)?;
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, v: ViewId) -> Option<usize> {
        self.nodes.binary_search(&v).ok()
    }

    pub fn add_weight(&mut self, a: ViewId, b: ViewId, w: f64) -> Result<()> {
        let i = self.index_of(a).ok_or(Error::UnknownView(a))?;
        let j = self.index_of(b).ok_or(Error::UnknownView(b))?;
        if i != j {
            let n = self.nodes.len();
            self.weights[i * n + j] += w;
            self.weights[j * n + i] += w;
        }
        Ok(())
    }

    #[inline]
    pub fn weight_at(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.nodes.len() + j]
    }

    pub fn weight(&self, a: ViewId, b: ViewId) -> f64 {
        match (self.index_of(a), self.index_of(b)) {
            (Some(i), Some(j)) => self.weight_at(i, j),
            _ => 0.0,
        }
    }

    pub fn degree_at(&self, i: usize) -> f64 {
        let n = self.nodes.len();
        self.weights[i * n..(i + 1) * n].iter().sum()
    }

    /// Edges with positive weight, `a < b`.
    pub fn edges(&self) -> Vec<(ViewId, ViewId, f64)> {
        let n = self.nodes.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let w = self.weight_at(i, j);
                if w > 0.0 {
                    out.push((self.nodes[i], self.nodes[j], w));
                }
            }
        }
        out
    }
}

/// `w_ij` = number of 3D points observed by both views.
pub fn build_match_graph(scene: &SparseScene) -> SceneGraph {
    let mut g = SceneGraph::new(scene.view_ids());
    let n = g.nodes.len();
    for p in &scene.points {
        let idx: Vec<usize> = p.observers.iter().filter_map(|v| g.index_of(*v)).collect();
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                g.weights[i * n + j] += 1.0;
                g.weights[j * n + i] += 1.0;
            }
        }
    }
    g
}

/// Up to `k` views with the highest positive weight to `view`, ties by ascending id.
pub fn neighbor_views(graph: &SceneGraph, view: ViewId, k: usize) -> Result<Vec<ViewId>> {
    let i = graph.index_of(view).ok_or(Error::UnknownView(view))?;
    let mut cand: Vec<(f64, ViewId)> = (0..graph.len())
        .filter(|&j| j != i && graph.weight_at(i, j) > 0.0)
        .map(|j| (graph.weight_at(i, j), graph.nodes[j]))
        .collect();
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(cand.into_iter().take(k).map(|(_, v)| v).collect())
}
