//! Shared geometric primitives: rigid and similarity transforms, pinhole
//! cameras, and the 2D buffers every stage reads and writes.
//!
//! Conventions:
//! - poses map world to camera, camera looks down +z, x right, y down;
//! - continuous pixel coordinates put pixel `(i, j)`'s center at `(i, j)`;
//! - all geometry is `f64`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Rgb = [f64; 3];

/// Smallest camera-frame depth treated as in front of the camera.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ViewId(pub u32);

impl fmt::Display for ViewId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Rigid world-to-camera transform `x_cam = R x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose, re-orthonormalizing `rotation` onto SO(3).
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Pose {
            rotation: orthonormalize(&rotation),
            translation,
        }
    }

    /// World-to-camera pose of a camera at `eye` looking at `target`, with the
    /// image y axis pointing roughly along `-up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            right = forward.cross(&Vec3::x());
            if right.norm() < 1e-9 {
                right = forward.cross(&Vec3::y());
            }
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        // rows are the camera axes expressed in world coordinates
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Pose { rotation, translation }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn is_valid(&self) -> bool {
        is_rotation(&self.rotation, 1e-9) && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Similarity transform `x ↦ s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Sim3 {
    pub fn identity() -> Self {
        Sim3 {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::DegenerateConfiguration(format!(
                "similarity scale must be positive, got {scale}"
            )));
        }
        if !is_rotation(&rotation, 1e-6) {
            return Err(Error::DegenerateConfiguration(
                "similarity rotation is not in SO(3)".into(),
            ));
        }
        Ok(Sim3 {
            scale,
            rotation,
            translation,
        })
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn inverse(&self) -> Sim3 {
        let rt = self.rotation.transpose();
        let inv_s = 1.0 / self.scale;
        Sim3 {
            scale: inv_s,
            rotation: rt,
            translation: -(inv_s * (rt * self.translation)),
        }
    }

    pub fn compose(&self, other: &Sim3) -> Sim3 {
        Sim3 {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }
}

pub fn is_rotation(m: &Mat3, tol: f64) -> bool {
    (m.transpose() * m - Mat3::identity()).norm() <= tol && (m.determinant() - 1.0).abs() <= tol
}

/// Nearest rotation matrix (polar decomposition via SVD).
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut d = Mat3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * vt;
    }
    r
}

/// Rotation `exp([w]×)`.
pub fn exp_so3(w: &Vec3) -> Mat3 {
    Rotation3::new(*w).into_inner()
}

/// Geodesic angle between two rotations, radians.
pub fn rotation_angle(a: &Mat3, b: &Mat3) -> f64 {
    let rel = a.transpose() * b;
    let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    c.acos()
}

/// Index of the candidate pose closest to `query` under geodesic rotation
/// angle plus center distance normalized by the candidates' spread (their
/// largest distance from the common centroid). Ties go to the lower index.
pub fn nearest_pose(query: &Pose, candidates: &[Pose]) -> Option<usize> {
    if candidates.is_empty() {
        return None;
    }
    let centers: Vec<Vec3> = candidates.iter().map(Pose::center).collect();
    let centroid = centers.iter().sum::<Vec3>() / centers.len() as f64;
    let spread = centers.iter().map(|c| (c - centroid).norm()).fold(0.0, f64::max);
    let norm = if spread > 1e-12 { spread } else { 1.0 };
    let qc = query.center();
    let mut best = (f64::INFINITY, 0);
    for (i, (pose, c)) in candidates.iter().zip(&centers).enumerate() {
        let d = rotation_angle(&query.rotation, &pose.rotation) + (qc - c).norm() / norm;
        if d < best.0 {
            best = (d, i);
        }
    }
    Some(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Dense row-major 2D buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Grid {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} grid needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Grid { width, height, data })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub type ImageRgb = Grid<Rgb>;
pub type ScalarMap = Grid<f64>;

impl ImageRgb {
    /// Bilinear sample of channel-averaged intensity; `None` outside the image.
    pub fn sample_gray(&self, x: f64, y: f64) -> Option<f64> {
        bilinear(self.width, self.height, x, y, |i| {
            let c = self.data[i];
            (c[0] + c[1] + c[2]) / 3.0
        })
    }

    pub fn gray(&self) -> ScalarMap {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|c| (c[0] + c[1] + c[2]) / 3.0).collect(),
        }
    }
}

impl ScalarMap {
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        bilinear(self.width, self.height, x, y, |i| self.data[i])
    }
}

fn bilinear(w: usize, h: usize, x: f64, y: f64, at: impl Fn(usize) -> f64) -> Option<f64> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = at(y0 * w + x0) * (1.0 - fx) + at(y0 * w + x1) * fx;
    let bottom = at(y1 * w + x0) * (1.0 - fx) + at(y1 * w + x1) * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

/// Per-pixel depth (scene units, camera z) with validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Builds a map whose validity is `value > 0 && finite`.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "depth map {}x{} given {} values",
                width,
                height,
                values.len()
            )));
        }
        let valid = values.iter().map(|&v| v > 0.0 && v.is_finite()).collect();
        Ok(DepthMap {
            width,
            height,
            values,
            valid,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.values[i])
    }

    pub fn set(&mut self, x: usize, y: usize, value: Option<f64>) {
        let i = y * self.width + x;
        match value {
            Some(v) if v > 0.0 && v.is_finite() => {
                self.values[i] = v;
                self.valid[i] = true;
            }
            _ => {
                self.values[i] = 0.0;
                self.valid[i] = false;
            }
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn same_shape(&self, other: &DepthMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Nearest-pixel lookup at a continuous coordinate.
    pub fn nearest(&self, x: f64, y: f64) -> Option<f64> {
        let (xi, yi) = (x.round(), y.round());
        if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
            return None;
        }
        self.at(xi as usize, yi as usize)
    }

    /// Bilinear interpolation of inverse depth, which is exact on planes.
    /// Falls back to [`DepthMap::nearest`] when a corner is invalid.
    pub fn sample_inverse(&self, x: f64, y: f64) -> Option<f64> {
        let (w, h) = (self.width, self.height);
        if w >= 2 && h >= 2 && x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64 {
            let x0 = (x.floor() as usize).min(w - 2);
            let y0 = (y.floor() as usize).min(h - 2);
            let corners = [y0 * w + x0, y0 * w + x0 + 1, (y0 + 1) * w + x0, (y0 + 1) * w + x0 + 1];
            if corners.iter().all(|&i| self.valid[i]) {
                return bilinear(w, h, x, y, |i| 1.0 / self.values[i]).map(|v| 1.0 / v);
            }
        }
        self.nearest(x, y)
    }
}

/// One training or evaluation view.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub view_id: ViewId,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
    /// World-to-camera.
    pub pose: Pose,
    pub image: Option<Arc<ImageRgb>>,
    pub name: String,
}

impl CameraView {
    pub fn new(view_id: ViewId, intrinsics: Intrinsics, width: usize, height: usize, pose: Pose) -> Result<Self> {
        let cam = CameraView {
            view_id,
            intrinsics,
            width,
            height,
            pose,
            image: None,
            name: format!("{:04}", view_id.0),
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn with_image(mut self, image: ImageRgb) -> Result<Self> {
        if image.width != self.width || image.height != self.height {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} for a {}x{} camera",
                image.width, image.height, self.width, self.height
            )));
        }
        self.image = Some(Arc::new(image));
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        let ok = k.fx > 0.0
            && k.fy > 0.0
            && k.cx >= 0.0
            && k.cx < self.width as f64
            && k.cy >= 0.0
            && k.cy < self.height as f64
            && self.pose.is_valid();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidScene(format!(
                "camera {} has invalid intrinsics or pose",
                self.view_id
            )))
        }
    }

    /// Projects a world point; returns continuous pixel coordinates and camera depth.
    pub fn project(&self, point: &Vec3) -> Result<(Vector2<f64>, f64)> {
        let pc = self.pose.apply(point);
        self.project_camera(&pc)
    }

    pub fn project_camera(&self, pc: &Vec3) -> Result<(Vector2<f64>, f64)> {
        if pc.z <= MIN_DEPTH {
            return Err(Error::BehindCamera(pc.z));
        }
        let k = &self.intrinsics;
        Ok((Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy), pc.z))
    }

    /// World point seen at `pixel` with camera depth `depth`.
    pub fn backproject(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vec3> {
        if !(depth > 0.0) {
            return Err(Error::NonPositiveDepth(depth));
        }
        let pc = self.ray(pixel.x, pixel.y) * depth;
        Ok(self.pose.inverse().apply(&pc))
    }

    /// Camera-frame ray through a pixel, normalized so that `z = 1`.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vec3 {
        let k = &self.intrinsics;
        Vec3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0)
    }

    pub fn center(&self) -> Vec3 {
        self.pose.center()
    }

    pub fn image(&self) -> Option<&ImageRgb> {
        self.image.as_deref()
    }
}
