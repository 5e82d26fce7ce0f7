//! Run configuration JSON.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use czsl::data::synth::SyntheticSpec;
use czsl::data::World;
use czsl::encoder::EncoderDims;
use czsl::scoring::{Mode, ScoringConfig, DEFAULT_ADAPTER_ALPHA};
use czsl::train::TrainConfig;
use czsl::vocab::PromptTemplate;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Used only when the bundle ships no encoder.
    pub encoder: EncoderDims,
    pub hash_buckets: usize,
    pub mode: Mode,
    pub tau: f64,
    pub alpha: f64,
    pub prefix: Vec<String>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            encoder: EncoderDims::default(),
            hash_buckets: 4,
            mode: Mode::Csp,
            tau: ScoringConfig::default().tau,
            alpha: DEFAULT_ADAPTER_ALPHA,
            prefix: PromptTemplate::default().prefix,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub world: World,
    pub feasibility: Option<PathBuf>,
    pub literal_feasibility: bool,
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            world: World::Closed,
            feasibility: None,
            literal_feasibility: false,
            seeds: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scoring().validate()?;
        self.train.validate()?;
        if !(self.model.alpha >= 0.0 && self.model.alpha <= 1.0) {
            bail!("adapter alpha {} outside [0, 1]", self.model.alpha);
        }
        if let Some(s) = &self.data.synthetic {
            s.validate()?;
        }
        Ok(())
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            tau: self.model.tau,
            weight_decay: self.train.weight_decay,
            mode: self.model.mode,
        }
    }

    pub fn template(&self) -> PromptTemplate {
        PromptTemplate {
            prefix: self.model.prefix.clone(),
        }
    }

    /// Seeds to run: the configured list, else the training seed.
    pub fn seeds(&self) -> Vec<u64> {
        if self.eval.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.eval.seeds.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_paper_defaults() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c.train.learning_rate, 5e-5);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.train.attribute_dropout, 0.3);
        assert_eq!(c.train.weight_decay, 1e-5);
        assert_eq!(c.model.mode, Mode::Csp);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"lr": 1}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"mode": "clip"}}"#).is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        let c: RunConfig = serde_json::from_str(r#"{"model": {"tau": 0}}"#).unwrap();
        assert!(c.validate().is_err());
        let c: RunConfig = serde_json::from_str(r#"{"train": {"batch_size": 0}}"#).unwrap();
        assert!(c.validate().is_err());
    }
}
