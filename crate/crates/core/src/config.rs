//! Run configuration, loadable from TOML. Unset keys take the defaults of the
//! selected [`Mode`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::DecodeParams;
use crate::exec::Execution;
use crate::level::{
    DEFAULT_BEAM_WIDTH, DEFAULT_EXPAND_AXIAL_CORONAL, DEFAULT_EXPAND_SAGITTAL, DEFAULT_SKIP_PENALTY,
    DEFAULT_SOFTMAX_T,
};
use crate::patch::DEFAULT_OUT_PX;
use crate::target::RenderParams;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Lumbar,
    #[serde(rename = "wholespine")]
    WholeSpine,
}

impl Mode {
    /// `(edge_mm, overlap_frac)` patch defaults.
    pub fn patch_defaults(self) -> (f64, f64) {
        match self {
            Mode::Lumbar => (50.0, 0.30),
            Mode::WholeSpine => (500.0, 0.40),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("invalid setting {key}: {reason}")]
    Invalid { key: &'static str, reason: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub edge_mm: Option<f64>,
    pub overlap_frac: Option<f64>,
    pub out_px: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    #[serde(rename = "softmax_T")]
    pub softmax_t: f64,
    pub expand_axial_coronal: f64,
    pub expand_sagittal: f64,
    pub beam_width: usize,
    pub skip_penalty: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            softmax_t: DEFAULT_SOFTMAX_T,
            expand_axial_coronal: DEFAULT_EXPAND_AXIAL_CORONAL,
            expand_sagittal: DEFAULT_EXPAND_SAGITTAL,
            beam_width: DEFAULT_BEAM_WIDTH,
            skip_penalty: DEFAULT_SKIP_PENALTY,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradingConfig {
    /// Refuse to grade unless running in lumbar mode (grading models are
    /// trained on lumbar T2 scans).
    pub lumbar_only: bool,
}

/// File-level configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub patch: PatchConfig,
    pub target: RenderParams,
    pub decode: DecodeParams,
    pub label: LabelConfig,
    pub grading: GradingConfig,
    pub execution: Option<Execution>,
}

impl Config {
    pub fn from_toml(text: &str, path: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Fill mode defaults and validate.
    pub fn resolve(&self, mode: Mode) -> Result<PipelineConfig, ConfigError> {
        let (edge, overlap) = mode.patch_defaults();
        let c = PipelineConfig {
            mode,
            edge_mm: self.patch.edge_mm.unwrap_or(edge),
            overlap_frac: self.patch.overlap_frac.unwrap_or(overlap),
            out_px: self.patch.out_px.unwrap_or(DEFAULT_OUT_PX),
            render: self.target,
            decode: self.decode,
            label: self.label,
            grading: self.grading,
            execution: self.execution.unwrap_or_default(),
        };
        let invalid = |key, reason: &str| Err(ConfigError::Invalid { key, reason: reason.to_string() });
        if !(c.edge_mm > 0.0) {
            return invalid("patch.edge_mm", "must be positive");
        }
        if !(0.0..1.0).contains(&c.overlap_frac) {
            return invalid("patch.overlap_frac", "must be in [0, 1)");
        }
        if c.out_px == 0 {
            return invalid("patch.out_px", "must be positive");
        }
        if !(c.decode.threshold > 0.0 && c.decode.threshold <= 1.0) {
            return invalid("decode.threshold", "must be in (0, 1]");
        }
        if !(c.label.softmax_t > 0.0) {
            return invalid("label.softmax_T", "must be positive");
        }
        if c.label.beam_width == 0 {
            return invalid("label.beam_width", "must be at least 1");
        }
        if !(c.label.skip_penalty > 0.0 && c.label.skip_penalty <= 1.0) {
            return invalid("label.skip_penalty", "must be in (0, 1]");
        }
        if !(c.render.k_sigma > 0.0 && c.render.k_nbhd > 0.0) {
            return invalid("target", "k_sigma and k_nbhd must be positive");
        }
        Ok(c)
    }
}

/// Fully resolved settings for one run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub edge_mm: f64,
    pub overlap_frac: f64,
    pub out_px: usize,
    pub render: RenderParams,
    pub decode: DecodeParams,
    pub label: LabelConfig,
    pub grading: GradingConfig,
    pub execution: Execution,
}

impl PipelineConfig {
    pub fn for_mode(mode: Mode) -> Self {
        Config::default().resolve(mode).expect("defaults are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_defaults() {
        let l = PipelineConfig::for_mode(Mode::Lumbar);
        assert_eq!((l.edge_mm, l.overlap_frac, l.out_px), (50.0, 0.30, 224));
        let w = PipelineConfig::for_mode(Mode::WholeSpine);
        assert_eq!((w.edge_mm, w.overlap_frac), (500.0, 0.40));
        assert_eq!(w.label.softmax_t, 10.0);
        assert_eq!(w.label.beam_width, 100);
    }

    #[test]
    fn toml_overrides() {
        let text = r#"
            execution = "sequential"
            [patch]
            overlap_frac = 0.5
            [label]
            softmax_T = 2.0
            [decode]
            iou_threshold = 0.3
        "#;
        let c = Config::from_toml(text, "t").unwrap().resolve(Mode::WholeSpine).unwrap();
        assert_eq!(c.overlap_frac, 0.5);
        assert_eq!(c.edge_mm, 500.0);
        assert_eq!(c.label.softmax_t, 2.0);
        assert_eq!(c.decode.iou_threshold, 0.3);
        assert_eq!(c.decode.threshold, 0.5);
        assert_eq!(c.execution, Execution::Sequential);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(
            Config::from_toml("[patch]\nedge = 3", "t"),
            Err(ConfigError::Parse { .. })
        ));
        let c = Config::from_toml("[patch]\noverlap_frac = 1.0", "t").unwrap();
        assert!(matches!(c.resolve(Mode::Lumbar), Err(ConfigError::Invalid { .. })));
    }
}
