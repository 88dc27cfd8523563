//! The full set of knobs for a run, as one JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::DataConfig;
use crate::encoders::{ClipConfig, EncoderConfig};
use crate::error::{Error, Result};
use crate::foodlearner::FoodLearnerConfig;
use crate::pretrain::Stage1Config;
use crate::segmentation::Stage2Config;

/// Input and output locations. Commands fill in what they need.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset root written by data generation.
    pub data: Option<PathBuf>,
    /// Frozen encoder archive.
    pub clip: Option<PathBuf>,
    /// Stage-I archive to start Stage II from.
    pub stage1: Option<PathBuf>,
    /// Stage-I archive to continue training from.
    pub resume: Option<PathBuf>,
    /// Stage-II archive used by inference and evaluation.
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Score background as its own class instead of ignoring it.
    pub include_background: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub clip: ClipConfig,
    pub foodlearner: FoodLearnerConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    /// Force the pooled image vector to zero: plain class-name embeddings.
    pub static_text: bool,
    /// Start Stage II from a randomly initialised learner.
    pub no_stage1: bool,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Full-scale settings (32 query tokens, 640/320 inputs,
    /// warmup over 5000 iterations, Stage-II learning rate 1e-4). Far too large
    /// to train on a CPU; kept as a reference point for the scaled defaults.
    /// Stage-I length is counted in epochs of a corpus that does not exist
    /// here, so its step count stays at the desk default.
    pub fn reference_scale() -> Self {
        let mut c = Self::default();
        c.encoder.image_size = 640;
        c.encoder.patch = 16;
        c.encoder.d_visual = 1024;
        c.encoder.d_text = 768;
        c.encoder.layers = 24;
        c.encoder.heads = 16;
        c.encoder.mlp_ratio = 4;
        c.encoder.max_text_len = 77;
        c.data.image_size = 640;
        c.foodlearner.q_tokens = 32;
        c.foodlearner.d_q = 768;
        c.foodlearner.layers = 12;
        c.foodlearner.heads = 12;
        c.foodlearner.mlp_ratio = 4;
        c.foodlearner.max_text_len = 77;
        c.stage1.phi = 10.0;
        c.stage1.warmup_steps = 5000;
        c.stage1.weight_decay = 0.05;
        c.stage1.batch_size = 100;
        c.stage1.lr_start = 1e-6;
        c.stage1.lr_peak = 1e-4;
        c.stage1.lr_end = 1e-5;
        c.stage1.augment = false;
        c.stage2.tau = 100.0;
        c.stage2.lr = 1e-4;
        c.stage2.steps = 10_000;
        c.stage2.batch_size = 8;
        c.stage2.weight_decay = 1e-4;
        c.stage2.mask_size = 320;
        c.stage2.n_proposals = 100;
        c.stage2.augment = false;
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Cross-field consistency checks.
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.patch == 0 || !e.image_size.is_multiple_of(e.patch) {
            return Err(Error::invalid(format!(
                "encoder image size {} is not a multiple of patch {}",
                e.image_size, e.patch
            )));
        }
        if self.data.image_size != e.image_size {
            return Err(Error::invalid(format!(
                "data image size {} differs from encoder input {}",
                self.data.image_size, e.image_size
            )));
        }
        if self.data.n_classes < 2 || self.data.modes_per_class == 0 {
            return Err(Error::invalid(
                "need at least 2 classes and 1 appearance mode",
            ));
        }
        if self.data.min_blobs == 0 || self.data.min_blobs > self.data.max_blobs {
            return Err(Error::invalid("blob counts must satisfy 1 <= min <= max"));
        }
        if !e.image_size.is_multiple_of(self.stage2.side_patch) {
            return Err(Error::invalid(format!(
                "side patch {} does not divide image size {}",
                self.stage2.side_patch, e.image_size
            )));
        }
        if self.foodlearner.q_tokens == 0
            || self.foodlearner.heads == 0
            || !self.foodlearner.d_q.is_multiple_of(self.foodlearner.heads)
        {
            return Err(Error::invalid(
                "learner width must split evenly over a positive number of heads",
            ));
        }
        if self.stage1.batch_size < 2 || self.clip.batch_size < 2 {
            return Err(Error::invalid("contrastive batches need at least 2 pairs"));
        }
        self.stage2.validate()
    }
}
