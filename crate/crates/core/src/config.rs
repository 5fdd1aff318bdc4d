//! Pipeline configuration: every stage tolerance in one serializable struct.
//!
//! Defaults follow the values the pipeline was validated with; jobs override
//! them through a JSON config file, and command-line flags override the file.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which reconstruction backend the surface stage runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconMode {
    /// Signed-distance field plus marching cubes, no external dependency.
    Builtin,
    /// Invoke an external tool through `tool_template`.
    External,
}

/// Output mesh encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeshFormat {
    StlBinary,
    Ply,
}

impl MeshFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MeshFormat::StlBinary => "stl",
            MeshFormat::Ply => "ply",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Seed for every random draw in the run; fixing it makes runs bit-identical.
    pub seed: u64,
    /// Worker threads; `None` uses the rayon default.
    pub threads: Option<usize>,

    /// Neighbour count for the per-point mean-distance statistic.
    pub denoise_knn: usize,
    /// A point is removed when its mean distance exceeds mu + alpha * sigma.
    pub denoise_alpha: f64,

    /// Smallest target radius searched, mm.
    pub target_radius_min_mm: f64,
    /// Largest target radius searched, mm.
    pub target_radius_max_mm: f64,
    /// Minimum normalized accumulator vote for a detection, in (0, 1].
    pub vote_threshold: f64,
    /// Gradient-magnitude percentile that defines edge pixels.
    pub edge_percentile: f64,
    /// Refine the accumulator-centroid centre with a least-squares circle fit.
    pub refine_fit: bool,
    /// When set, write each scan's Hough accumulator as a PGM into this directory.
    pub accumulator_dump: Option<PathBuf>,

    /// Intra-scan pairwise-distance agreement tolerance for target filtering, mm.
    pub filter_tau_mm: f64,
    /// Minimum number of agreeing distances for a target to survive filtering.
    pub min_support: usize,
    /// Translation-consensus clustering tolerance for target matching, mm.
    pub match_epsilon_mm: f64,
    /// Largest believable consensus displacement, mm. Coarse poses come from
    /// robot kinematics and are trusted to a few millimetres, so a consensus
    /// beyond this is a structural coincidence, not an alignment correction.
    pub max_shift_mm: f64,
    /// Iteration cap for joint pose refinement.
    pub max_iters: usize,

    /// Box-grid cube side for merging, mm.
    pub voxel_mm: f64,
    /// Connectivity radius for part segmentation, mm.
    pub cluster_radius_mm: f64,
    /// Clusters with a point within this distance of a target centre are kept, mm.
    pub keep_radius_mm: f64,

    /// Neighbour count for normal estimation.
    pub normals_k: usize,
    pub reconstruction: ReconMode,
    /// Marching-cubes cell size for the builtin backend, mm.
    pub cell_mm: f64,
    /// Reconstruction depth passed to the external tool.
    pub depth: u32,
    /// External command template with `{input}`, `{output}`, `{depth}` placeholders.
    pub tool_template: Option<String>,
    pub mesh_format: MeshFormat,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            denoise_knn: 30,
            denoise_alpha: 1.0,
            target_radius_min_mm: 2.0,
            target_radius_max_mm: 8.0,
            vote_threshold: 0.5,
            edge_percentile: 90.0,
            refine_fit: true,
            accumulator_dump: None,
            filter_tau_mm: 0.2,
            min_support: 2,
            match_epsilon_mm: 0.5,
            max_shift_mm: 8.0,
            max_iters: 100,
            voxel_mm: 0.1,
            cluster_radius_mm: 0.2,
            keep_radius_mm: 5.0,
            normals_k: 100,
            reconstruction: ReconMode::Builtin,
            cell_mm: 0.5,
            depth: 12,
            tool_template: None,
            mesh_format: MeshFormat::StlBinary,
        }
    }
}

impl PipelineConfig {
    /// Rejects value combinations no stage can run with.
    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
            Ok(())
        }
        positive("target_radius_min_mm", self.target_radius_min_mm)?;
        positive("target_radius_max_mm", self.target_radius_max_mm)?;
        if self.target_radius_min_mm >= self.target_radius_max_mm {
            return Err(Error::Config(format!(
                "target radius range is empty: [{}, {}]",
                self.target_radius_min_mm, self.target_radius_max_mm
            )));
        }
        if !(self.vote_threshold > 0.0 && self.vote_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "vote_threshold must lie in (0, 1], got {}",
                self.vote_threshold
            )));
        }
        if !(self.edge_percentile > 0.0 && self.edge_percentile < 100.0) {
            return Err(Error::Config(format!(
                "edge_percentile must lie in (0, 100), got {}",
                self.edge_percentile
            )));
        }
        if self.denoise_knn == 0 {
            return Err(Error::Config("denoise_knn must be at least 1".into()));
        }
        if !(self.denoise_alpha.is_finite() && self.denoise_alpha >= 0.0) {
            return Err(Error::Config(format!(
                "denoise_alpha must be non-negative, got {}",
                self.denoise_alpha
            )));
        }
        positive("filter_tau_mm", self.filter_tau_mm)?;
        positive("match_epsilon_mm", self.match_epsilon_mm)?;
        positive("max_shift_mm", self.max_shift_mm)?;
        if self.max_shift_mm < self.match_epsilon_mm {
            return Err(Error::Config(format!(
                "max_shift_mm ({}) must not be below match_epsilon_mm ({})",
                self.max_shift_mm, self.match_epsilon_mm
            )));
        }
        if self.min_support == 0 {
            return Err(Error::Config("min_support must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        positive("voxel_mm", self.voxel_mm)?;
        positive("cluster_radius_mm", self.cluster_radius_mm)?;
        positive("keep_radius_mm", self.keep_radius_mm)?;
        if self.normals_k < 3 {
            return Err(Error::Config("normals_k must be at least 3".into()));
        }
        positive("cell_mm", self.cell_mm)?;
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.reconstruction == ReconMode::External && self.tool_template.is_none() {
            return Err(Error::Config(
                "reconstruction = external requires tool_template".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_file(&self, path: &std::path::Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 42;
        cfg.threads = Some(4);
        cfg.match_epsilon_mm = 2.5;
        cfg.reconstruction = ReconMode::External;
        cfg.tool_template = Some("recon {input} {output} --depth {depth}".into());
        let text = serde_json::to_string(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"seed": 7, "voxel_mm": 0.5}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.voxel_mm, 0.5);
        assert_eq!(cfg.denoise_knn, PipelineConfig::default().denoise_knn);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"voxel": 0.5}"#).is_err());
    }

    #[test]
    fn empty_radius_range_is_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.target_radius_min_mm = 9.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn external_mode_requires_template() {
        let mut cfg = PipelineConfig::default();
        cfg.reconstruction = ReconMode::External;
        assert!(cfg.validate().is_err());
    }
}
