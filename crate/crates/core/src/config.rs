//! Experiment configuration: a single JSON file fixes the scenario, variant,
//! architecture, weights, optimizer, graph policy, data source and seed.
//! Cross-field rules are validated before any work starts.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::losses::LossWeights;
use crate::scenario::{Scenario, Variant};
use crate::training::OptimizerConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub variant: Variant,
    pub arch: ArchConfig,
    pub weights: WeightsConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// May be omitted for generated data, where the generator fixes it.
    #[serde(default)]
    pub input_dim: Option<usize>,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub feat_dim: usize,
    pub cfs_dim: usize,
}

/// Either the literal string "auto" or explicit weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightsConfig {
    Auto(String),
    Manual(LossWeights),
}

impl WeightsConfig {
    pub fn is_auto(&self) -> bool {
        matches!(self, WeightsConfig::Auto(_))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Latent-factor two-domain generator; always disjoint label spaces.
    SynthTwoDomain {
        spec: SynthSpec,
        eval_per_class: usize,
    },
    /// Procedural digit glyphs in the MNIST convention.
    Digits {
        source_classes: Vec<usize>,
        target_classes: Vec<usize>,
        train_per_class: usize,
        eval_per_class: usize,
        #[serde(default = "default_digit_noise")]
        noise: f64,
        /// Background noise for the target domain; defaults to `noise`.
        #[serde(default)]
        target_noise: Option<f64>,
        /// Appearance shift applied to the whole target domain.
        #[serde(default)]
        target_style: crate::data::digits::DigitStyle,
        /// Maximum glyph translation in pixels (both axes).
        #[serde(default = "default_digit_shift")]
        shift: usize,
    },
    /// IDX image/label pairs. When `target` is omitted, the target domain is
    /// carved out of the source corpus by the class split.
    Idx {
        source: IdxPaths,
        #[serde(default)]
        target: Option<IdxPaths>,
        source_classes: Vec<usize>,
        target_classes: Vec<usize>,
    },
    /// CSV with a header row and the label in the final column.
    Csv {
        source: CsvPaths,
        #[serde(default)]
        target: Option<CsvPaths>,
        source_classes: Vec<usize>,
        target_classes: Vec<usize>,
    },
}

fn default_digit_noise() -> f64 {
    0.25
}

fn default_digit_shift() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    #[serde(default)]
    pub eval_images: Option<PathBuf>,
    #[serde(default)]
    pub eval_labels: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvPaths {
    pub train: PathBuf,
    #[serde(default)]
    pub eval: Option<PathBuf>,
}

impl DataConfig {
    pub fn source_classes(&self) -> Option<BTreeSet<usize>> {
        match self {
            DataConfig::SynthTwoDomain { spec, .. } => Some((0..spec.source_classes).collect()),
            DataConfig::Digits { source_classes, .. } => Some(source_classes.iter().copied().collect()),
            DataConfig::Idx { source_classes, .. } => Some(source_classes.iter().copied().collect()),
            DataConfig::Csv { source_classes, .. } => Some(source_classes.iter().copied().collect()),
        }
    }

    pub fn target_classes(&self) -> Option<BTreeSet<usize>> {
        match self {
            DataConfig::SynthTwoDomain { spec, .. } => {
                Some((spec.source_classes..spec.source_classes + spec.target_classes).collect())
            }
            DataConfig::Digits { target_classes, .. } => Some(target_classes.iter().copied().collect()),
            DataConfig::Idx { target_classes, .. } => Some(target_classes.iter().copied().collect()),
            DataConfig::Csv { target_classes, .. } => Some(target_classes.iter().copied().collect()),
        }
    }

    /// Input dimensionality when the generator fixes it.
    pub fn generated_input_dim(&self) -> Option<usize> {
        match self {
            DataConfig::SynthTwoDomain { spec, .. } => Some(spec.input_dim),
            DataConfig::Digits { .. } => Some(crate::data::digits::IMAGE_DIM),
            _ => None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.compatible_with(self.scenario)?;
        self.optimizer.validate()?;
        self.graph.validate()?;
        match &self.weights {
            WeightsConfig::Auto(tag) => {
                if tag != "auto" {
                    return Err(Error::Config(format!(
                        "weights must be \"auto\" or an object, got \"{tag}\""
                    )));
                }
            }
            WeightsConfig::Manual(w) => w.validate()?,
        }
        if self.arch.feat_dim < 1 || self.arch.cfs_dim < 1 {
            return Err(Error::Config("feat_dim and cfs_dim must be >= 1".into()));
        }

        let source = self
            .data
            .source_classes()
            .ok_or_else(|| Error::Config("data section must define source classes".into()))?;
        let target = self
            .data
            .target_classes()
            .ok_or_else(|| Error::Config("data section must define target classes".into()))?;
        if source.len() < 2 {
            return Err(Error::Config("need at least two source classes".into()));
        }
        if self.scenario.requires_disjoint() {
            let overlap: Vec<usize> = source.intersection(&target).copied().collect();
            if !overlap.is_empty() {
                return Err(Error::Config(format!(
                    "{} requires disjoint label spaces; both sides contain {overlap:?}",
                    self.scenario.name()
                )));
            }
        } else if source != target {
            return Err(Error::Config(
                "uda requires identical source and target class sets (shared label space)".into(),
            ));
        }
        if matches!(self.data, DataConfig::SynthTwoDomain { .. }) && !self.scenario.requires_disjoint() {
            return Err(Error::Config(
                "synth_two_domain data has disjoint label spaces by construction and cannot model uda".into(),
            ));
        }
        if let Scenario::SemiDlstl { .. } = self.scenario {
            if target.is_empty() {
                return Err(Error::Config("semi_dlstl needs at least one target class".into()));
            }
        }
        if let DataConfig::Digits {
            source_classes,
            target_classes,
            ..
        } = &self.data
        {
            for &c in source_classes.iter().chain(target_classes.iter()) {
                if c > 9 {
                    return Err(Error::Config(format!("digit classes are 0-9, got {c}")));
                }
            }
        }
        if let Some(dim) = self.arch.input_dim {
            if let Some(generated) = self.data.generated_input_dim() {
                if dim != generated {
                    return Err(Error::Config(format!(
                        "arch.input_dim = {dim} does not match the generated data dim {generated}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> serde_json::Value {
        serde_json::json!({
            "scenario": {"kind": "unsup_dlstl"},
            "variant": "cfsm",
            "arch": {"hidden": [16], "feat_dim": 8, "cfs_dim": 4},
            "weights": "auto",
            "optimizer": {
                "kind": "adam",
                "learning_rate": 0.001,
                "epochs": 2,
                "pretrain_epochs": 1,
                "batch_size": 8
            },
            "data": {
                "kind": "synth_two_domain",
                "spec": {
                    "factors": 4,
                    "source_classes": 3,
                    "target_classes": 3,
                    "samples_per_class": 20,
                    "input_dim": 10,
                    "noise": 0.05,
                    "distortion": 0.2
                },
                "eval_per_class": 10
            },
            "seed": 7
        })
    }

    #[test]
    fn test_roundtrip_is_fixed_point() {
        let config: ExperimentConfig = serde_json::from_value(minimal_json()).unwrap();
        config.validate().unwrap();
        let json = config.to_json().unwrap();
        let reparsed: ExperimentConfig = serde_json::from_str(&json).unwrap();
        let json2 = reparsed.to_json().unwrap();
        assert_eq!(json, json2);
    }

    #[test]
    fn test_missing_seed_is_an_error() {
        let mut v = minimal_json();
        v.as_object_mut().unwrap().remove("seed");
        let err = serde_json::from_value::<ExperimentConfig>(v).unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn test_variant_scenario_incompatibility() {
        let mut v = minimal_json();
        v["variant"] = serde_json::json!("train_target");
        let config: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn test_odd_batch_rejected() {
        let mut v = minimal_json();
        v["optimizer"]["batch_size"] = serde_json::json!(7);
        let config: ExperimentConfig = serde_json::from_value(v).unwrap();
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("batch_size"), "{err}");
    }

    #[test]
    fn test_digit_overlap_rejected_for_dlstl() {
        let v = serde_json::json!({
            "scenario": {"kind": "semi_dlstl", "k": 3},
            "variant": "cfsm",
            "arch": {"hidden": [16], "feat_dim": 8, "cfs_dim": 4},
            "weights": "auto",
            "optimizer": {"kind": "adam", "learning_rate": 0.001, "epochs": 1, "batch_size": 8},
            "data": {
                "kind": "digits",
                "source_classes": [0, 1, 2, 5],
                "target_classes": [5, 6, 7],
                "train_per_class": 10,
                "eval_per_class": 5
            },
            "seed": 1
        });
        let config: ExperimentConfig = serde_json::from_value(v).unwrap();
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("disjoint"), "{err}");
    }

    #[test]
    fn test_unknown_field_rejected() {
        let mut v = minimal_json();
        v["optimizer"]["momentum"] = serde_json::json!(0.9);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn test_manual_weights_parse() {
        let mut v = minimal_json();
        v["weights"] = serde_json::json!({"beta_c": 0.01, "beta_m": 0.001});
        let config: ExperimentConfig = serde_json::from_value(v).unwrap();
        config.validate().unwrap();
        match config.weights {
            WeightsConfig::Manual(w) => {
                assert_eq!(w.beta_c, 0.01);
                assert_eq!(w.beta_m, 0.001);
                assert_eq!(w.triplet_margin, 0.3);
            }
            _ => panic!("expected manual weights"),
        }
    }
}
