//! Aggregate run configuration: one JSON document drives the whole
//! pipeline. Every field has a default, so `{}` is a valid config; unknown
//! keys are rejected everywhere to catch typos.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::detector::{DetectLossWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::qat::QatConfig;
use crate::synthesis::SynthesisConfig;
use crate::train::TeacherConfig;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub teacher: TeacherConfig,
    pub synthesis: SynthesisConfig,
    pub qat: QatConfig,
    /// shared by the teacher loss, the synthesis detection term, and QAT
    pub detect_weights: DetectLossWeights,
    /// master seed; `with_seed` copies it into every component
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(doc: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(doc)
            .map_err(|e| Error::Config(format!("config parse: {e}")))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Set one seed everywhere. Component RNG streams are disjoint by
    /// construction, so sharing the value is safe.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.model.seed = seed;
        self.teacher.seed = seed;
        self.synthesis.seed = seed;
        self.qat.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.teacher.validate()?;
        self.synthesis.validate()?;
        self.qat.validate()?;
        if self.data.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "data.image_size {} != model.image_size {}",
                self.data.image_size, self.model.image_size
            )));
        }
        if self.data.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "data.num_classes {} != model.num_classes {}",
                self.data.num_classes, self.model.num_classes
            )));
        }
        if self.synthesis.resolution != self.model.image_size {
            return Err(Error::Config(format!(
                "synthesis.resolution {} != model.image_size {}",
                self.synthesis.resolution, self.model.image_size
            )));
        }
        for (name, v) in [
            ("box_weight", self.detect_weights.box_weight),
            ("conf_weight", self.detect_weights.conf_weight),
            ("cls_weight", self.detect_weights.cls_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("detect_weights.{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Content hash of the canonical (non-pretty) JSON form. Field order is
    /// the struct order, so equal configs hash equally.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
