//! Open-vocabulary food-style segmentation at desk scale: a query-token
//! image-to-text learner, pre-trained with contrastive, matching and
//! captioning objectives, whose pooled output enriches class-name text
//! embeddings for a mask-classification segmenter.

pub mod config;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod foodlearner;
pub mod metrics;
pub mod numcore;
pub mod pipeline;
pub mod pretrain;
pub mod segmentation;

pub use config::RunConfig;
pub use error::{Error, Result};
