//! Pipeline config file (TOML).
//!
//! Relative paths are resolved against the directory holding the config.

use std::path::{Path, PathBuf};

use objmap_core::association::AssociationConfig;
use objmap_core::landmark::{FusionConfig, WeightPolicy};
use objmap_core::simulator::SimConfig;
use objmap_core::VisibilityConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub trajectory: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub key: String,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { key: "P2".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutlierConfig {
    /// Meters.
    pub depth_tol: f64,
    pub yaw_tol_deg: f64,
    pub min_support: usize,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        let f = FusionConfig::default();
        Self {
            depth_tol: f.depth_tol,
            yaw_tol_deg: f.yaw_tol.to_degrees(),
            min_support: f.min_support,
        }
    }
}

impl OutlierConfig {
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            depth_tol: self.depth_tol,
            yaw_tol: self.yaw_tol_deg.to_radians(),
            min_support: self.min_support,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub iou_min: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { iou_min: 0.5 }
    }
}

/// Inclusive frame ranges. An empty `include` list means every frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub include: Vec<[u32; 2]>,
    pub exclude: Vec<[u32; 2]>,
}

impl SequenceConfig {
    pub fn contains(&self, frame: u32) -> bool {
        let inside = |r: &[u32; 2]| r[0] <= frame && frame <= r[1];
        (self.include.is_empty() || self.include.iter().any(inside))
            && !self.exclude.iter().any(inside)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub camera: CameraConfig,
    pub association: AssociationConfig,
    pub weights: WeightPolicy,
    pub outliers: OutlierConfig,
    pub visibility: VisibilityConfig,
    pub metrics: MetricsConfig,
    pub sequence: SequenceConfig,
    pub simulator: SimConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<PipelineConfig> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config and makes its relative paths absolute.
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.association
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.visibility.validate().map_err(CliError::Config)?;
        let o = &self.outliers;
        if !(o.depth_tol > 0.0 && o.yaw_tol_deg > 0.0 && o.min_support >= 1) {
            return bad("outliers: tolerances must be positive and min_support ≥ 1".into());
        }
        if !(self.weights.sigma_floor > 0.0) {
            return bad("weights: sigma_floor must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.metrics.iou_min) {
            return bad(format!("metrics: iou_min = {} outside [0, 1]", self.metrics.iou_min));
        }
        for r in self.sequence.include.iter().chain(&self.sequence.exclude) {
            if r[0] > r[1] {
                return bad(format!("sequence: range [{}, {}] is reversed", r[0], r[1]));
            }
        }
        Ok(())
    }

    /// A required input path that must exist.
    pub fn input(&self, which: &str) -> Result<&Path> {
        let p = match which {
            "trajectory" => &self.paths.trajectory,
            "calib" => &self.paths.calib,
            "detections" => &self.paths.detections,
            _ => unreachable!("unknown input {which}"),
        };
        let p = p
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("paths.{which} is not set")))?;
        if !p.is_file() {
            return Err(CliError::Config(format!(
                "paths.{which}: {} does not exist",
                p.display()
            )));
        }
        Ok(p)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.output.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

impl PathsConfig {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.trajectory,
            &mut self.calib,
            &mut self.detections,
            &mut self.output,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_sections() {
        let cfg = PipelineConfig::from_toml(
            r#"
            [paths]
            trajectory = "poses.txt"
            [association]
            dist_gate = 4.0
            [outliers]
            yaw_tol_deg = 20.0
            [sequence]
            include = [[0, 10]]
            exclude = [[3, 4]]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.association.dist_gate, 4.0);
        assert_eq!(cfg.association.iou_gate, 0.3);
        assert!((cfg.outliers.fusion().yaw_tol - 20f64.to_radians()).abs() < 1e-15);
        assert_eq!(cfg.camera.key, "P2");
        assert!(cfg.sequence.contains(0) && !cfg.sequence.contains(3) && !cfg.sequence.contains(11));
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = PipelineConfig::from_toml("[association]\ndist_gat = 1.0\n").unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut p = PathsConfig {
            calib: Some("c.txt".into()),
            output: Some("/abs".into()),
            ..PathsConfig::default()
        };
        p.resolve(Path::new("/data/run"));
        assert_eq!(p.calib.unwrap(), PathBuf::from("/data/run/c.txt"));
        assert_eq!(p.output.unwrap(), PathBuf::from("/abs"));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn validation() {
        let mut cfg = PipelineConfig::default();
        cfg.sequence.include = vec![[5, 1]];
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.metrics.iou_min = 2.0;
        assert!(cfg.validate().is_err());
    }
}
