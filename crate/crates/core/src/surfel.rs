use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, Mat3, Rgb, Vec3};
use crate::io::{self, PlyElement, PlyScalar};

pub type SurfelId = u32;

/// Planar elliptical Gaussian primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surfel {
    pub center: Vec3,
    pub tangent_u: Vec3,
    pub tangent_v: Vec3,
    /// `(s_u, s_v)`, standard deviations along the tangents.
    pub scales: [f64; 2],
    pub opacity: f64,
    pub color: Rgb,
}

impl Surfel {
    /// Surfel whose tangent frame is built around `normal`.
    pub fn oriented(center: Vec3, normal: Vec3, scales: [f64; 2], opacity: f64, color: Rgb) -> Self {
        let n = normal.normalize();
        let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let u = helper.cross(&n).normalize();
        let v = n.cross(&u);
        Surfel {
            center,
            tangent_u: u,
            tangent_v: v,
            scales,
            opacity,
            color,
        }
    }

    pub fn normal(&self) -> Vec3 {
        self.tangent_u.cross(&self.tangent_v)
    }

    /// Columns `(t_u, t_v, n)`.
    pub fn frame(&self) -> Mat3 {
        Mat3::from_columns(&[self.tangent_u, self.tangent_v, self.normal()])
    }

    pub fn max_scale(&self) -> f64 {
        self.scales[0].max(self.scales[1])
    }

    /// Rotates the tangent frame by `exp([w]×)` (world frame, left-multiplied).
    pub fn rotate(&mut self, w: &Vec3) {
        let r = exp_so3(w);
        let u = (r * self.tangent_u).normalize();
        let v = r * self.tangent_v;
        // Gram-Schmidt keeps the frame orthonormal under repeated updates
        let v = (v - u * u.dot(&v)).normalize();
        self.tangent_u = u;
        self.tangent_v = v;
    }

    pub fn is_valid(&self) -> bool {
        let n = self.normal();
        self.tangent_u.dot(&self.tangent_v).abs() <= 1e-8
            && (n.norm() - 1.0).abs() <= 1e-8
            && self.scales.iter().all(|s| *s > 0.0 && s.is_finite())
            && (0.0..=1.0).contains(&self.opacity)
            && self.center.iter().all(|v| v.is_finite())
            && self.color.iter().all(|c| c.is_finite())
    }
}

/// Surfels with stable integer ids; storage order carries no meaning.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurfelCloud {
    pub surfels: Vec<Surfel>,
    pub ids: Vec<SurfelId>,
    next_id: SurfelId,
}

impl SurfelCloud {
    pub fn new(surfels: Vec<Surfel>) -> Self {
        let n = surfels.len() as SurfelId;
        SurfelCloud {
            surfels,
            ids: (0..n).collect(),
            next_id: n,
        }
    }

    pub fn with_ids(surfels: Vec<Surfel>, ids: Vec<SurfelId>) -> Result<Self> {
        if surfels.len() != ids.len() {
            return Err(Error::ShapeMismatch("one id per surfel".into()));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidScene("duplicate surfel id".into()));
        }
        let next_id = sorted.last().map_or(0, |m| m + 1);
        Ok(SurfelCloud { surfels, ids, next_id })
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn push(&mut self, surfel: Surfel) -> SurfelId {
        let id = self.next_id;
        self.next_id += 1;
        self.surfels.push(surfel);
        self.ids.push(id);
        id
    }

    pub fn next_id(&self) -> SurfelId {
        self.next_id
    }

    /// Ensures future ids start at or after `next`.
    pub fn reserve_ids(&mut self, next: SurfelId) {
        self.next_id = self.next_id.max(next);
    }

    pub fn index_map(&self) -> HashMap<SurfelId, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (*id, i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.surfels.iter().position(|s| !s.is_valid()) {
            return Err(Error::InvalidScene(format!(
                "surfel {} violates its invariants",
                self.ids[i]
            )));
        }
        let mut sorted = self.ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidScene("duplicate surfel id".into()));
        }
        Ok(())
    }

    /// Axis-aligned bounds of the centers.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = self.surfels.first()?.center;
        Some(
            self.surfels
                .iter()
                .fold((first, first), |(lo, hi), s| (lo.inf(&s.center), hi.sup(&s.center))),
        )
    }

    const PROPS: [&'static str; 16] = [
        "x", "y", "z", "tu_x", "tu_y", "tu_z", "tv_x", "tv_y", "tv_z", "scale_u", "scale_v", "opacity", "red", "green",
        "blue", "id",
    ];

    pub fn save_ply(&self, path: &Path) -> Result<()> {
        let props: Vec<(&str, PlyScalar)> = Self::PROPS
            .iter()
            .map(|&n| (n, if n == "id" { PlyScalar::U32 } else { PlyScalar::F64 }))
            .collect();
        let mut e = PlyElement::scalars("vertex", &props);
        e.rows = self
            .surfels
            .iter()
            .zip(&self.ids)
            .map(|(s, id)| {
                vec![
                    s.center.x,
                    s.center.y,
                    s.center.z,
                    s.tangent_u.x,
                    s.tangent_u.y,
                    s.tangent_u.z,
                    s.tangent_v.x,
                    s.tangent_v.y,
                    s.tangent_v.z,
                    s.scales[0],
                    s.scales[1],
                    s.opacity,
                    s.color[0],
                    s.color[1],
                    s.color[2],
                    *id as f64,
                ]
            })
            .collect();
        io::write_ply(path, &[e])
    }

    pub fn load_ply(path: &Path) -> Result<Self> {
        let elements = io::read_ply(path)?;
        let v = elements
            .iter()
            .find(|e| e.name == "vertex")
            .ok_or_else(|| Error::format("PLY", "no vertex element"))?;
        let cols: Vec<usize> = Self::PROPS
            .iter()
            .map(|n| {
                v.column(n)
                    .ok_or_else(|| Error::format("PLY", format!("surfel property {n} missing")))
            })
            .collect::<Result<_>>()?;
        let mut surfels = Vec::with_capacity(v.rows.len());
        let mut ids = Vec::with_capacity(v.rows.len());
        for row in &v.rows {
            let g = |k: usize| row[cols[k]];
            surfels.push(Surfel {
                center: Vec3::new(g(0), g(1), g(2)),
                tangent_u: Vec3::new(g(3), g(4), g(5)),
                tangent_v: Vec3::new(g(6), g(7), g(8)),
                scales: [g(9), g(10)],
                opacity: g(11),
                color: [g(12), g(13), g(14)],
            });
            ids.push(g(15) as SurfelId);
        }
        let cloud = Self::with_ids(surfels, ids)?;
        cloud.validate()?;
        Ok(cloud)
    }
}
