//! Frozen image and text encoders (a small CLIP-style pair), the tokenizer,
//! and the contrastive pre-pretraining that aligns them.

pub mod clip;
pub mod image_encoder;
pub mod text_encoder;
pub mod tokenizer;

use serde::{Deserialize, Serialize};

pub use clip::{pretrain_toy_clip, retrieval_r1, ClipConfig, ClipModel, ClipReport};
pub use image_encoder::{patchify, ImageEncoder, VisualEmbedding};
pub use text_encoder::{TextEmbedding, TextEncoder};
pub use tokenizer::{TextBatch, Vocab, BOS, EOS, PAD, UNK};

/// Shapes shared by both encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    /// Width of the image encoder's patch tokens.
    pub d_visual: usize,
    /// Width of text embeddings and of the joint space.
    pub d_text: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_text_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            d_visual: 64,
            d_text: 64,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            max_text_len: 16,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }
}
