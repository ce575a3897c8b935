//! Run configuration: every module's knobs in one JSON document.
//!
//! Keys are emitted in declaration order, so serializing a loaded config
//! gives the canonical text regardless of the key order it was read with.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorConfig;
use crate::error::{Error, Result};
use crate::infer::{InferConfig, PyramidPlan};
use crate::sshgraph::BackboneConfig;
use crate::toy::ToyConfig;
use crate::trainer::TrainConfig;

/// Target sizes for single-scale and pyramid inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSizes {
    pub min_side: f64,
    pub max_side: f64,
    pub pyramid: PyramidPlan,
}

impl Default for InferenceSizes {
    fn default() -> Self {
        Self {
            min_side: 1200.0,
            max_side: 1600.0,
            pyramid: PyramidPlan::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub anchors: AnchorConfig,
    pub backbone: BackboneConfig,
    /// Matching, OHEM, λ, schedule and seed.
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub sizes: InferenceSizes,
    pub toy: ToyConfig,
}

impl RunConfig {
    /// The synthetic-data setup: shrunken anchors, 2000-iteration schedule,
    /// native-resolution inference.
    pub fn toy() -> Self {
        let toy = ToyConfig::default();
        let side = toy.image_size as f64;
        Self {
            anchors: ToyConfig::anchor_config(),
            train: TrainConfig::toy(),
            sizes: InferenceSizes {
                min_side: side,
                max_side: side,
                pyramid: PyramidPlan::single(side, side),
            },
            toy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        self.backbone.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        self.sizes.pyramid.validate()?;
        if !(self.sizes.min_side > 0.0 && self.sizes.max_side > 0.0) {
            return Err(Error::config("inference sides must be positive"));
        }
        self.toy.validate()
    }

    /// Parses and validates. Unknown or missing keys are errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    /// Canonical pretty-printed form with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config always serializes");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}
