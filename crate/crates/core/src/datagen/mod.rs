//! Procedural "dish" images with exact per-pixel class masks, captions that
//! list the visible ingredients, and base/novel class splits.

mod io;
mod render;
mod split;

pub use io::{
    read_json, read_pairs, read_samples, write_json, write_pairs, write_samples, DatasetPaths,
    PairRecord, SampleRecord,
};
pub use render::{
    class_names, gen_corpus, make_classes, render_sample, AppearanceMode, IngredientClass, Shape,
    Texture,
};
pub use split::{mask_base_only, split_classes, split_classes_distinct, ClassSplit};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

/// Mask value for pixels that belong to no ingredient.
pub const BACKGROUND: u8 = 255;

/// One image with its class-index mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: RgbImage,
    /// Class index per pixel, [`BACKGROUND`] where nothing is drawn.
    pub mask: GrayImage,
    /// Ascending class indices visible in `mask`.
    pub present_classes: Vec<usize>,
    pub caption: String,
}

impl SegSample {
    pub fn class_pixel_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for p in self.mask.pixels() {
            if p[0] != BACKGROUND {
                counts[p[0] as usize] += 1;
            }
        }
        counts
    }
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_classes: usize,
    /// Seed of the class appearance table. Kept apart from the run seed so
    /// corpora drawn with different seeds share one set of classes.
    pub class_seed: u64,
    pub modes_per_class: usize,
    pub image_size: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Image–caption pairs for encoder and Stage-I pre-training.
    pub n_pairs: usize,
    /// Held-out pairs for retrieval checks.
    pub n_heldout_pairs: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub fraction_novel: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_classes: 24,
            class_seed: 0,
            modes_per_class: 2,
            image_size: 64,
            min_blobs: 1,
            max_blobs: 4,
            n_pairs: 512,
            n_heldout_pairs: 16,
            n_train: 128,
            n_eval: 64,
            fraction_novel: 0.2,
        }
    }
}

/// Caption for a set of visible classes.
pub fn caption_for(names: &[String], present: &[usize]) -> String {
    let listed: Vec<&str> = present.iter().map(|&c| names[c].as_str()).collect();
    format!("a photo of {}", listed.join(" and "))
}

/// Class indices mentioned in a caption (words that are class names).
pub fn classes_in_caption(names: &[String], caption: &str) -> Vec<usize> {
    let mut out: Vec<usize> = caption
        .split_whitespace()
        .filter_map(|w| names.iter().position(|n| n == w))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}
