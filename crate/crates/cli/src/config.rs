use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use metrokit::mesh::TsdfConfig;
use metrokit::trainer::TrainConfig;

/// Input and output locations. Unset inputs fall back to the bundle layout
/// under `--data` when that directory provides them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub colmap: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub pointmaps: Option<PathBuf>,
    pub mono: Option<PathBuf>,
    pub test_colmap: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    /// Ground-truth point cloud (PLY) for geometry scores.
    pub gt: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub train: TrainConfig,
    /// Fusion settings; derived from the sparse scene's size when absent.
    pub tsdf: Option<TsdfConfig>,
    pub tau: f64,
    pub clusters: usize,
    /// Fraction of pointmap pixels kept by dense initialization.
    pub sample_rate: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            train: TrainConfig::default(),
            tsdf: None,
            tau: 0.05,
            clusters: 1,
            sample_rate: 0.25,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            bail!("tau must be positive, got {}", self.tau);
        }
        if self.clusters == 0 {
            bail!("cluster count must be at least 1");
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            bail!("sample rate must lie in (0, 1], got {}", self.sample_rate);
        }
        if let Some(t) = &self.tsdf {
            if !(t.voxel_size > 0.0 && t.sdf_trunc > 0.0 && t.depth_trunc > 0.0) {
                bail!("TSDF sizes must be positive");
            }
        }
        self.train.validate()?;
        Ok(())
    }

    /// Fills unset inputs from the bundle layout of `data`. Only entries that
    /// exist on disk are taken, since pointmaps, priors and test views are optional.
    pub fn fill_from_bundle(&mut self, data: &Path) {
        let p = &mut self.paths;
        let slots: [(&mut Option<PathBuf>, &str); 7] = [
            (&mut p.colmap, "colmap"),
            (&mut p.images, "images"),
            (&mut p.pointmaps, "pointmaps"),
            (&mut p.mono, "mono"),
            (&mut p.test_colmap, "test/colmap"),
            (&mut p.test_images, "test/images"),
            (&mut p.gt, "gt_cloud.ply"),
        ];
        for (slot, rel) in slots {
            let candidate = data.join(rel);
            if slot.is_none() && (candidate.exists() || rel == "colmap") {
                *slot = Some(candidate);
            }
        }
    }

    pub fn output(&self) -> PathBuf {
        self.paths.output.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_keeps_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(
            r#"{"tau": 0.1, "train": {"total_iters": 5, "stage_switch_iter": 3, "densify_until": 5}}"#,
        )
        .unwrap();
        assert_eq!(cfg.tau, 0.1);
        assert_eq!(cfg.train.total_iters, 5);
        assert_eq!(cfg.clusters, 1);
        cfg.validate().unwrap();
        let bad = PipelineConfig {
            clusters: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
