use image::RgbImage;

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::numcore::layers::{Block, LayerNorm, Linear};
use crate::numcore::{Ctx, ParamStore, RngState, Tape, Tensor, Var};

/// Patch tokens of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEmbedding {
    /// `P × d_visual`, one row per patch in raster order.
    pub tokens: Tensor,
    pub source_resolution: (usize, usize),
}

/// Splits an image into flattened `patch×patch×3` rows scaled to `[-1, 1]`.
pub fn patchify(image: &RgbImage, patch: usize) -> Result<Tensor> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row_len = patch * patch * 3;
    let mut data = Vec::with_capacity(gh * gw * row_len);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                for x in 0..patch {
                    let p = image.get_pixel((px * patch + x) as u32, (py * patch + y) as u32);
                    for c in 0..3 {
                        data.push(p[c] as f64 / 127.5 - 1.0);
                    }
                }
            }
        }
    }
    Tensor::matrix(gh * gw, row_len, data)
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub cfg: EncoderConfig,
    patch_embed: Linear,
    pos: String,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    head_ln: LayerNorm,
    head_proj: Linear,
}

impl ImageEncoder {
    pub const PREFIX: &'static str = "clip.image";

    pub fn new(cfg: &EncoderConfig) -> Self {
        let p = Self::PREFIX;
        let d = cfg.d_visual;
        Self {
            cfg: cfg.clone(),
            patch_embed: Linear::new(
                &format!("{p}.patch_embed"),
                cfg.patch * cfg.patch * 3,
                d,
                true,
            ),
            pos: format!("{p}.pos"),
            blocks: (0..cfg.layers)
                .map(|i| Block::new(&format!("{p}.block{i}"), d, cfg.heads, d * cfg.mlp_ratio))
                .collect(),
            ln_post: LayerNorm::new(&format!("{p}.ln_post"), d),
            head_ln: LayerNorm::new(&format!("{p}.head_ln"), d),
            head_proj: Linear::new(&format!("{p}.head_proj"), d, cfg.d_text, false),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        self.patch_embed.init(store, rng);
        store.insert(
            &self.pos,
            rng.normal_tensor(&[self.cfg.num_patches(), self.cfg.d_visual], 0.02),
        );
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.ln_post.init(store);
        self.head_ln.init(store);
        self.head_proj.init(store, rng);
    }

    fn check_size(&self, image: &RgbImage) -> Result<()> {
        let s = self.cfg.image_size as u32;
        if image.width() != s || image.height() != s {
            return Err(Error::invalid(format!(
                "encoder expects {s}x{s} images, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Layer-0 tokens: patch embedding plus position, before any mixing.
    pub fn patch_tokens<'t>(&self, cx: &Ctx<'t>, image: &RgbImage) -> Result<Var<'t>> {
        let patches = patchify(image, self.cfg.patch)?;
        self.check_size(image)?;
        let x = self.patch_embed.forward(cx, cx.constant(patches));
        Ok(x + cx.p(&self.pos))
    }

    /// Patch tokens after the transformer (`P × d_visual`).
    pub fn forward<'t>(&self, cx: &Ctx<'t>, image: &RgbImage) -> Result<Var<'t>> {
        let mut x = self.patch_tokens(cx, image)?;
        for b in &self.blocks {
            x = b.forward(cx, x, None);
        }
        Ok(self.ln_post.forward(cx, x))
    }

    /// Projects (pooled) visual tokens into the joint space: `n×d_visual → n×d_text`.
    pub fn head<'t>(&self, cx: &Ctx<'t>, pooled: Var<'t>) -> Var<'t> {
        self.head_proj.forward(cx, self.head_ln.forward(cx, pooled))
    }

    /// Global image embedding from mean-pooled tokens.
    pub fn embed<'t>(&self, cx: &Ctx<'t>, tokens: Var<'t>) -> Var<'t> {
        self.head(cx, tokens.mean_rows())
    }

    /// Gradient-free encoding against frozen parameters.
    pub fn encode(&self, store: &ParamStore, image: &RgbImage) -> Result<VisualEmbedding> {
        let tape = Tape::new();
        let cx = Ctx::inference(&tape, store);
        let tokens = self.forward(&cx, image)?;
        tape.check_finite()?;
        Ok(VisualEmbedding {
            tokens: tokens.to_tensor(),
            source_resolution: (image.height() as usize, image.width() as usize),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn cfg() -> EncoderConfig {
        EncoderConfig::default()
    }

    fn test_image(seed: u64) -> RgbImage {
        let mut rng = RngState::new(seed);
        RgbImage::from_fn(64, 64, |_, _| {
            Rgb([
                rng.below(256) as u8,
                rng.below(256) as u8,
                rng.below(256) as u8,
            ])
        })
    }

    fn setup() -> (ImageEncoder, ParamStore) {
        let enc = ImageEncoder::new(&cfg());
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut RngState::new(1));
        (enc, store)
    }

    #[test]
    fn sixty_four_patches() {
        let (enc, store) = setup();
        let e = enc.encode(&store, &test_image(0)).unwrap();
        assert_eq!(e.tokens.shape(), &[64, 64]);
        assert_eq!(e.source_resolution, (64, 64));
    }

    #[test]
    fn deterministic() {
        let (enc, store) = setup();
        let img = test_image(3);
        let a = enc.encode(&store, &img).unwrap();
        let b = enc.encode(&store, &img.clone()).unwrap();
        assert!(a.tokens.bit_eq(&b.tokens));
    }

    #[test]
    fn indivisible_resolution_rejected() {
        let img = RgbImage::new(60, 64);
        assert!(patchify(&img, 8).is_err());
        let (enc, store) = setup();
        assert!(enc.encode(&store, &img).is_err());
    }

    #[test]
    fn layer0_locality() {
        let (enc, store) = setup();
        let img = test_image(4);
        let mut changed = img.clone();
        // pixel (x=19, y=42) sits in patch row 5, column 2
        let p = changed.get_pixel_mut(19, 42);
        p[0] = p[0].wrapping_add(90);
        let tape = Tape::new();
        let cx = Ctx::inference(&tape, &store);
        let a = enc.patch_tokens(&cx, &img).unwrap().to_tensor();
        let b = enc.patch_tokens(&cx, &changed).unwrap().to_tensor();
        let target = 5 * 8 + 2;
        for r in 0..64 {
            let same = a.row(r) == b.row(r);
            assert_eq!(same, r != target, "row {r}");
        }
    }
}
