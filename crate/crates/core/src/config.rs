//! Run configuration: one JSON document with a section per module. Every
//! field is optional and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::datasets::SynthConfig;
use crate::dynamics::DynamicsConfig;
use crate::evaluation::{MetricConfig, SegmenterConfig};
use crate::model::ModelConfig;
use crate::objectives::{HeadConfig, LossWeights};
use crate::registration::RegistrationConfig;
use crate::training::{TrainConfig, TtoConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub synth: SynthConfig,
    /// Train/val/test fractions of series.
    pub split_ratios: (f64, f64, f64),
    /// Register every series to its first visit before training.
    pub register: bool,
    pub registration: RegistrationConfig,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            synth: SynthConfig::default(),
            split_ratios: (0.7, 0.15, 0.15),
            register: false,
            registration: RegistrationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectivesSection {
    pub lambda_v: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub head: HeadConfig,
}

impl ObjectivesSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_v: self.lambda_v, lambda_c: self.lambda_c, lambda_s: self.lambda_s }
    }

    fn with_defaults() -> Self {
        let w = LossWeights::default();
        ObjectivesSection { lambda_v: w.lambda_v, lambda_c: w.lambda_c, lambda_s: w.lambda_s, head: HeadConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub metrics: MetricConfig,
    pub segmenter: SegmenterConfig,
    /// Methods scored by `evaluate` when none are given on the command line.
    pub methods: Vec<String>,
    /// Independent runs averaged in reports.
    pub seeds: usize,
    pub tto: TtoConfig,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            metrics: MetricConfig::default(),
            segmenter: SegmenterConfig::default(),
            methods: vec!["linear".into(), "cubic".into()],
            seeds: 1,
            tto: TtoConfig::default(),
        }
    }
}

/// Defaults are the full training protocol; `RunConfig::desk` and
/// `configs/desk.json` give the CPU-sized variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation, the split, weight initialisation, training
    /// and the segmenter. Overrides the nested seed fields.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub backbone: BackboneConfig,
    pub dynamics: DynamicsConfig,
    pub objectives: ObjectivesSection,
    pub training: TrainConfig,
    pub evaluation: EvaluationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetSection::default(),
            backbone: BackboneConfig::default(),
            dynamics: DynamicsConfig::default(),
            objectives: ObjectivesSection::with_defaults(),
            training: TrainConfig::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

impl RunConfig {
    /// CPU-sized run: one residual block per resolution and the desk
    /// training schedule.
    pub fn desk() -> Self {
        RunConfig {
            backbone: BackboneConfig { blocks_per_resolution: 1, ..BackboneConfig::default() },
            training: TrainConfig::desk(),
            ..RunConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    /// Copies the top-level seed and the objective weights into the nested
    /// sections and validates everything.
    pub fn resolved(mut self) -> Result<Self> {
        self.training.seed = self.seed;
        self.training.loss_weights = self.objectives.weights();
        self.evaluation.segmenter.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.dataset.split_ratios;
        if [a, b, c].iter().any(|r| !(*r > 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split_ratios must be positive and sum to 1, got ({a}, {b}, {c})")));
        }
        if self.evaluation.seeds == 0 {
            return Err(Error::Config("evaluation.seeds must be at least 1".into()));
        }
        self.dataset.synth.validate()?;
        self.model_config().validate()?;
        self.training.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.training.variant,
            backbone: self.backbone.clone(),
            dynamics: self.dynamics.clone(),
            head: self.objectives.head.clone(),
            init_seed: self.seed,
        }
    }

    /// The same run with a different top-level seed.
    pub fn with_seed(&self, seed: u64) -> Result<Self> {
        RunConfig { seed, ..self.clone() }.resolved()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    /// Writes the resolved configuration as `config.json` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), self.to_json() + "\n")?;
        Ok(())
    }
}
