//! Geometry and image scores for reconstructions.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ImageRgb, Vec3};
use crate::metrics::{psnr, ssim};
use crate::spatial::PointGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
}

fn fraction_within(from: &[Vec3], to: &PointGrid, tau: f64) -> f64 {
    let hits = from.par_iter().filter(|p| to.any_within(p, tau)).count();
    hits as f64 / from.len() as f64
}

/// Precision and recall of `pred` against `gt` at distance `tau`.
pub fn eval_geometry(pred: &[Vec3], gt: &[Vec3], tau: f64) -> Result<GeometryScore> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(tau > 0.0) {
        return Err(Error::ConfigInvalid(format!("threshold {tau} must be positive")));
    }
    let gt_grid = PointGrid::new(gt.to_vec(), tau);
    let pred_grid = PointGrid::new(pred.to_vec(), tau);
    let precision = fraction_within(pred, &gt_grid, tau);
    let recall = fraction_within(gt, &pred_grid, tau);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(GeometryScore {
        precision,
        recall,
        f1,
        threshold: tau,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub psnr: f64,
    pub ssim: f64,
}

pub fn psnr_ssim(pred: &ImageRgb, gt: &ImageRgb) -> Result<ImageScore> {
    Ok(ImageScore {
        psnr: psnr(pred, gt)?,
        ssim: ssim(pred, gt)?,
    })
}

/// Everything `metrokit eval` reports, serialized as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub geometry: Option<GeometryScore>,
    pub views: BTreeMap<String, ImageScore>,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_depth_rel_error: Option<f64>,
}

impl EvalReport {
    pub fn add_view(&mut self, name: &str, score: ImageScore) {
        self.views.insert(name.to_string(), score);
        let n = self.views.len() as f64;
        self.mean_psnr = Some(self.views.values().map(|s| s.psnr).sum::<f64>() / n);
        self.mean_ssim = Some(self.views.values().map(|s| s.ssim).sum::<f64>() / n);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}
