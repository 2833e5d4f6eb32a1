//! Run configuration read from JSON. Every field has a default and unknown
//! keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything needed to train one model. `train.seed` drives both
/// initialisation and data order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub graph: GraphConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            graph: self.graph.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::PromptMode;
    use crate::graph::{AttentionNorm, GraphVariant};

    #[test]
    fn empty_object_is_all_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        let d = RunConfig::default();
        assert_eq!(d.train.epochs, 3);
        assert_eq!(d.train.batch_size, 16);
        assert_eq!(d.graph.variant, GraphVariant::Agcn);
        assert_eq!(d.decoder.prompt_mode, PromptMode::Both);
        assert_eq!(d.graph.attention_norm, AttentionNorm::Masked);
    }

    #[test]
    fn nested_fields_parse() {
        let c = RunConfig::from_json(
            r#"{"graph": {"variant": "gat"}, "decoder": {"prompt_mode": "vision_only"}, "train": {"seed": 4}}"#,
        )
        .unwrap();
        assert_eq!(c.graph.variant, GraphVariant::Gat);
        assert_eq!(c.decoder.prompt_mode, PromptMode::VisionOnly);
        assert_eq!(c.train.seed, 4);
        assert_eq!(c.train.epochs, 3);
    }

    #[test]
    fn unknown_keys_are_named_with_their_line() {
        let err = RunConfig::from_json("{\n  \"train\": {\n    \"epoch\": 2\n  }\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epoch") && msg.contains("line 3"), "{msg}");
    }
}
