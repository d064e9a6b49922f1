//! Versioned JSON configuration of a stylization run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::Schedule;
use super::PipelineError;
use crate::controls::ScalePreset;
use crate::features::Normalization;
use crate::refine::FilterPolicy;
use crate::styleloss::LossWeights;

pub const CONFIG_VERSION: u32 = 1;

pub const IMAGENET: Normalization = Normalization {
    mean: [0.485, 0.456, 0.406],
    std: [0.229, 0.224, 0.225],
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    #[default]
    None,
    Color,
    Scale,
    Spatial,
}

impl std::str::FromStr for ControlMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(ControlMode::None),
            "color" => Ok(ControlMode::Color),
            "scale" => Ok(ControlMode::Scale),
            "spatial" => Ok(ControlMode::Spatial),
            other => Err(format!("unknown control mode {other:?}")),
        }
    }
}

/// Learning-rate multipliers per parameter group; the position entry is
/// further multiplied by the camera extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupScales {
    pub position: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh: f64,
}

impl Default for GroupScales {
    fn default() -> Self {
        Self {
            position: 0.0016,
            scale: 0.05,
            rotation: 0.01,
            opacity: 0.5,
            sh: 1.0,
        }
    }
}

impl GroupScales {
    pub fn as_array(&self, extent: f64) -> [f64; 5] {
        [self.position * extent, self.scale, self.rotation, self.opacity, self.sh]
    }
}

/// One spatial-control region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub style: PathBuf,
    /// Style-image mask; the whole style image when absent.
    #[serde(default)]
    pub style_mask: Option<PathBuf>,
    /// Directory of per-view content masks named after the view files.
    pub masks: PathBuf,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StylizeConfig {
    pub version: u32,
    /// Style image for whole-scene transfer.
    pub style: Option<PathBuf>,
    pub control: ControlMode,
    pub weights: LossWeights,
    pub lambda_rec: f64,
    pub filter: FilterPolicy,
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_scale: GroupScales,
    pub scale_preset: ScalePreset,
    /// Explicit `(layer, weight)` pairs overriding the preset.
    pub layer_weights: Option<Vec<(String, f64)>>,
    pub regions: Vec<RegionConfig>,
    pub seed: u64,
    /// Longest image side used during stylization.
    pub max_side: usize,
    pub pose_jitter_deg: f64,
    pub normalization: Normalization,
    /// SGSW weight file; synthetic weights when absent.
    pub vgg_weights: Option<PathBuf>,
    pub cov_eps: f64,
    /// Stage-2 iterations between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for StylizeConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            style: None,
            control: ControlMode::None,
            weights: LossWeights::default(),
            lambda_rec: 0.2,
            filter: FilterPolicy::default(),
            stage1_iterations: 200,
            stage2_iterations: 800,
            lr_start: 0.1,
            lr_end: 0.01,
            lr_scale: GroupScales::default(),
            scale_preset: ScalePreset::Default,
            layer_weights: None,
            regions: Vec::new(),
            seed: 0,
            max_side: 256,
            pose_jitter_deg: 2.0,
            normalization: IMAGENET,
            vgg_weights: None,
            cov_eps: crate::colorxfer::DEFAULT_COV_EPS,
            checkpoint_every: 0,
        }
    }
}

impl StylizeConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let cfg: Self = super::io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::Json {
            path: PathBuf::new(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stage1_schedule(&self) -> Schedule {
        Schedule {
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            total: self.stage1_iterations,
        }
    }

    pub fn stage2_schedule(&self) -> Schedule {
        Schedule {
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            total: self.stage2_iterations,
        }
    }

    /// Style layers and weights implied by the control mode.
    pub fn style_layers(&self) -> Vec<(String, f64)> {
        if let Some(lw) = &self.layer_weights {
            return lw.clone();
        }
        match self.control {
            ControlMode::Scale => self.scale_preset.layer_weights(),
            _ => ScalePreset::Default.layer_weights(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("version: unsupported config version {}", self.version));
        }
        self.weights.validate().map_err(|e| PipelineError::Config(format!("weights: {e}")))?;
        self.filter.validate().map_err(|e| PipelineError::Config(format!("filter: {e}")))?;
        if !(0.0..=1.0).contains(&self.lambda_rec) {
            return bad(format!("lambda_rec: {} outside [0, 1]", self.lambda_rec));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_start.is_finite() && self.lr_end.is_finite()) {
            return bad("lr_start/lr_end: must be positive".into());
        }
        let g = &self.lr_scale;
        if [g.position, g.scale, g.rotation, g.opacity, g.sh].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("lr_scale: multipliers must be finite and nonnegative".into());
        }
        if !(self.cov_eps >= 0.0 && self.cov_eps.is_finite()) {
            return bad("cov_eps: must be finite and nonnegative".into());
        }
        if !(0.0..=45.0).contains(&self.pose_jitter_deg) {
            return bad(format!("pose_jitter_deg: {} outside [0, 45]", self.pose_jitter_deg));
        }
        if let Some(lw) = &self.layer_weights {
            for (l, w) in lw {
                if crate::features::layer_index(l).is_none() {
                    return bad(format!("layer_weights: unknown layer {l}"));
                }
                if !w.is_finite() || *w < 0.0 {
                    return bad(format!("layer_weights: {l} has invalid weight {w}"));
                }
            }
            if !lw.iter().any(|(_, w)| *w > 0.0) {
                return bad("layer_weights: all weights are zero".into());
            }
        }
        for (i, r) in self.regions.iter().enumerate() {
            if !r.weight.is_finite() || r.weight < 0.0 {
                return bad(format!("regions[{i}].weight: invalid {}", r.weight));
            }
        }
        if self.control == ControlMode::Spatial && self.regions.is_empty() {
            return bad("regions: spatial control needs at least one region".into());
        }
        Ok(())
    }

    /// Checks that every referenced file exists.
    pub fn check_files(&self) -> Result<(), PipelineError> {
        let mut paths: Vec<(&str, &Path)> = Vec::new();
        if let Some(p) = &self.style {
            paths.push(("style", p));
        }
        if let Some(p) = &self.vgg_weights {
            paths.push(("vgg_weights", p));
        }
        for r in &self.regions {
            paths.push(("regions.style", &r.style));
            paths.push(("regions.masks", &r.masks));
            if let Some(m) = &r.style_mask {
                paths.push(("regions.style_mask", m));
            }
        }
        for (field, p) in paths {
            if !p.exists() {
                return Err(PipelineError::Config(format!("{field}: {} does not exist", p.display())));
            }
        }
        if self.control != ControlMode::Spatial && self.style.is_none() {
            return Err(PipelineError::Config("style: a style image is required".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = StylizeConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(StylizeConfig::from_json(&text).unwrap(), cfg);
        let partial = StylizeConfig::from_json(r#"{"stage2_iterations": 300, "control": "color"}"#).unwrap();
        assert_eq!(partial.stage2_iterations, 300);
        assert_eq!(partial.control, ControlMode::Color);
        assert_eq!(partial.weights, LossWeights::default());
    }

    #[test]
    fn errors_name_the_field() {
        let e = StylizeConfig::from_json(r#"{"version": 7}"#).unwrap_err().to_string();
        assert!(e.contains("version"), "{e}");
        let e = StylizeConfig::from_json(r#"{"lambda_rec": 3}"#).unwrap_err().to_string();
        assert!(e.contains("lambda_rec"), "{e}");
        let e = StylizeConfig::from_json(r#"{"bogus": 1}"#).unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
        let e = StylizeConfig::from_json(r#"{"control": "spatial"}"#).unwrap_err().to_string();
        assert!(e.contains("regions"), "{e}");
    }

    #[test]
    fn scale_control_uses_preset() {
        let cfg = StylizeConfig {
            control: ControlMode::Scale,
            scale_preset: ScalePreset::Coarse,
            ..StylizeConfig::default()
        };
        assert_eq!(cfg.style_layers(), ScalePreset::Coarse.layer_weights());
        assert_eq!(StylizeConfig::default().style_layers().len(), 5);
    }
}
