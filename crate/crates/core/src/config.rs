//! Pipeline configuration: a TOML key/value file mirroring every stage's
//! tuning knobs, with defaults identical to the per-stage `Default` impls.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::BaConfig;
use crate::fusion::PhotoConfig;
use crate::lift::GeoConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaSection {
    pub lambda_proj: f64,
    pub lambda_z: f64,
    pub correction_weight: f64,
    pub all_pairs: bool,
    pub known_intrinsics: bool,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for BaSection {
    fn default() -> Self {
        let d = BaConfig::default();
        Self {
            lambda_proj: d.lambda_proj,
            lambda_z: d.lambda_z,
            correction_weight: d.correction_weight,
            all_pairs: d.all_pairs,
            known_intrinsics: d.known_intrinsics,
            iterations: d.iterations,
            learning_rate: d.learning_rate,
        }
    }
}

impl BaSection {
    pub fn to_config(&self) -> BaConfig {
        BaConfig {
            lambda_proj: self.lambda_proj,
            lambda_z: self.lambda_z,
            correction_weight: self.correction_weight,
            all_pairs: self.all_pairs,
            known_intrinsics: self.known_intrinsics,
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            log: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaffoldSection {
    /// Curve-distance resampling spacing for node selection, scene units.
    pub spacing: f64,
    /// Skinning radius assigned to freshly lifted nodes.
    pub radius: f64,
    /// Neighbors per node in the scaffold topology.
    pub knn: usize,
}

impl Default for ScaffoldSection {
    fn default() -> Self {
        Self { spacing: 0.25, radius: 0.05, knn: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeoSection {
    pub lambda_arap: f64,
    pub lambda_l: f64,
    pub lambda_c: f64,
    pub lambda_vel: f64,
    pub lambda_acc: f64,
    pub deltas: Vec<usize>,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for GeoSection {
    fn default() -> Self {
        let d = GeoConfig::default();
        Self {
            lambda_arap: d.lambda_arap,
            lambda_l: d.lambda_l,
            lambda_c: d.lambda_c,
            lambda_vel: d.lambda_vel,
            lambda_acc: d.lambda_acc,
            deltas: d.deltas,
            iterations: d.iterations,
            learning_rate: d.learning_rate,
        }
    }
}

impl GeoSection {
    pub fn to_config(&self) -> GeoConfig {
        GeoConfig {
            lambda_arap: self.lambda_arap,
            lambda_l: self.lambda_l,
            lambda_c: self.lambda_c,
            lambda_vel: self.lambda_vel,
            lambda_acc: self.lambda_acc,
            deltas: self.deltas.clone(),
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            log: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotoSection {
    pub lambda_track: f64,
    pub control_every: usize,
    pub densify_threshold: f64,
    pub densify_spacing: f64,
    pub node_cap: usize,
    pub prune_threshold: f64,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for PhotoSection {
    fn default() -> Self {
        let d = PhotoConfig::default();
        Self {
            lambda_track: d.lambda_track,
            control_every: d.control_every,
            densify_threshold: d.densify_threshold,
            densify_spacing: d.densify_spacing,
            node_cap: d.node_cap,
            prune_threshold: d.prune_threshold,
            iterations: 400,
            learning_rate: 0.01,
        }
    }
}

impl PhotoSection {
    /// Reprojection-stage config; rigidity weights are shared with the
    /// geometric section.
    pub fn to_config(&self, geo: &GeoSection) -> PhotoConfig {
        let mut g = geo.to_config();
        g.iterations = self.iterations;
        g.learning_rate = self.learning_rate;
        PhotoConfig {
            lambda_track: self.lambda_track,
            geo: g,
            control_every: self.control_every,
            densify_threshold: self.densify_threshold,
            densify_spacing: self.densify_spacing,
            node_cap: self.node_cap,
            prune_threshold: self.prune_threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    /// Pixel stride of the static background spawn grid.
    pub static_stride: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self { static_stride: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Recorded in artifacts; the pipeline itself is fully deterministic.
    pub seed: u64,
    /// Sampson threshold (px) splitting static from dynamic tracklets;
    /// unset scales 1 px at 480-row images linearly with resolution.
    pub static_threshold: Option<f64>,
    /// Focal-length guess when the dataset ships no camera.json.
    pub init_focal: Option<f64>,
    /// Write per-stage convergence logs next to the artifacts.
    pub log_convergence: bool,
    pub ba: BaSection,
    pub scaffold: ScaffoldSection,
    pub geo: GeoSection,
    pub photo: PhotoSection,
    pub fusion: FusionSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            static_threshold: None,
            init_focal: None,
            log_convergence: false,
            ba: BaSection::default(),
            scaffold: ScaffoldSection::default(),
            geo: GeoSection::default(),
            photo: PhotoSection::default(),
            fusion: FusionSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Some(t) = self.static_threshold {
            if !(t > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "static_threshold {t} must be positive"
                )));
            }
        }
        if let Some(f) = self.init_focal {
            if !(f > 0.0) {
                return Err(ConfigError::Invalid(format!("init_focal {f} must be positive")));
            }
        }
        if self.geo.deltas.is_empty() || self.geo.deltas.contains(&0) {
            return Err(ConfigError::Invalid(format!(
                "geo.deltas {:?} must be nonempty positive intervals",
                self.geo.deltas
            )));
        }
        if self.scaffold.knn == 0 || self.scaffold.spacing <= 0.0 || self.scaffold.radius <= 0.0 {
            return Err(ConfigError::Invalid(
                "scaffold spacing, radius, and knn must be positive".into(),
            ));
        }
        if self.fusion.static_stride == 0 {
            return Err(ConfigError::Invalid("fusion.static_stride must be >= 1".into()));
        }
        for (name, v) in [
            ("ba.learning_rate", self.ba.learning_rate),
            ("geo.learning_rate", self.geo.learning_rate),
            ("photo.learning_rate", self.photo.learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid(format!("{name} {v} must be positive")));
            }
        }
        Ok(())
    }
}

pub fn parse(text: &str) -> Result<PipelineConfig, ConfigError> {
    let cfg: PipelineConfig =
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<PipelineConfig, ConfigError> {
    parse(&std::fs::read_to_string(path)?)
}

/// Full default configuration as TOML, every key present.
pub fn default_dump() -> String {
    let mut cfg = PipelineConfig::default();
    // Optional keys serialize only when set; surface them in the dump with
    // their effective defaults so the file documents every knob.
    cfg.static_threshold = Some(crate::priors::default_static_threshold(480));
    cfg.init_focal = Some(500.0);
    toml::to_string_pretty(&cfg).expect("default config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dump_round_trips_and_names_every_section() {
        let text = default_dump();
        for key in ["[ba]", "[scaffold]", "[geo]", "[photo]", "[fusion]", "seed", "deltas"] {
            assert!(text.contains(key), "dump missing {key}:\n{text}");
        }
        let parsed = parse(&text).unwrap();
        assert_eq!(parsed.ba, BaSection::default());
        assert_eq!(parsed.geo, GeoSection::default());
        assert_eq!(parsed.photo, PhotoSection::default());
    }

    #[test]
    fn partial_files_keep_defaults_for_missing_keys() {
        let cfg = parse("[geo]\nlambda_arap = 2.5\n").unwrap();
        assert_eq!(cfg.geo.lambda_arap, 2.5);
        assert_eq!(cfg.geo.lambda_l, GeoSection::default().lambda_l);
        assert_eq!(cfg.ba, BaSection::default());
        assert!(cfg.static_threshold.is_none());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(parse("[geo]\nlambda_arp = 1.0\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(
            parse("[geo]\ndeltas = []\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            parse("static_threshold = -1.0\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            parse("[fusion]\nstatic_stride = 0\n"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn sections_convert_to_stage_configs() {
        let cfg = parse("[photo]\niterations = 77\nlambda_track = 0.5\n").unwrap();
        let photo = cfg.photo.to_config(&cfg.geo);
        assert_eq!(photo.geo.iterations, 77);
        assert_eq!(photo.lambda_track, 0.5);
        assert_eq!(photo.geo.lambda_arap, cfg.geo.lambda_arap);
        let ba = cfg.ba.to_config();
        assert_eq!(ba.iterations, BaSection::default().iterations);
        assert!(ba.log.is_none());
    }
}
