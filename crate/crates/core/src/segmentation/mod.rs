//! Stage II: open-vocabulary segmentation. Class-name embeddings from the
//! frozen text encoder are shifted by one pooled vector of image knowledge
//! from the query-token learner, then used to classify mask proposals.

mod head;
mod matching;
mod text;

pub use head::{
    classify_logits, classify_proposals, dice_loss, dice_value, upsample_matrix, HeadOutput,
    MaskHead,
};
pub use matching::{assignment_cost, hungarian, match_proposals, Assignment};
pub use text::{
    build_prompts, build_text_tokens, fuse, pool_queries, static_text_embeddings, DEFAULT_TEMPLATE,
};

use image::{imageops, GrayImage, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{ClassSplit, SegSample, BACKGROUND};
use crate::encoders::{patchify, ClipModel, ImageEncoder};
use crate::error::{Error, Result};
use crate::foodlearner::{FoodLearner, FoodLearnerConfig};
use crate::numcore::layers::Linear;
use crate::numcore::optim::{AdamW, AdamWConfig, Poly};
use crate::numcore::{Archive, Ctx, ParamStore, RngState, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    /// Temperature on proposal/class cosine similarities.
    pub tau: f64,
    pub n_proposals: usize,
    pub head_dim: usize,
    pub head_layers: usize,
    pub head_heads: usize,
    /// Pixel patch size of the mask head's side branch.
    pub side_patch: usize,
    /// Side of the square mask used for the training loss.
    pub mask_size: usize,
    pub dice_smooth: f64,
    pub class_weight: f64,
    pub dice_weight: f64,
    /// Cross-entropy weight of proposals matched to nothing.
    pub no_object_weight: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_power: f64,
    pub weight_decay: f64,
    pub templates: Vec<String>,
    /// Adds mirrored and rotated copies of every training image.
    pub augment: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            tau: 100.0,
            n_proposals: 8,
            head_dim: 64,
            head_layers: 2,
            head_heads: 2,
            side_patch: 4,
            mask_size: 32,
            dice_smooth: 1.0,
            class_weight: 1.0,
            dice_weight: 1.0,
            no_object_weight: 0.1,
            steps: 1000,
            batch_size: 8,
            lr: 1e-3,
            lr_power: 0.9,
            weight_decay: 1e-4,
            templates: vec![DEFAULT_TEMPLATE.to_string()],
            augment: true,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        if self.n_proposals == 0
            || self.mask_size == 0
            || self.batch_size == 0
            || self.side_patch == 0
        {
            return Err(Error::invalid(
                "proposals, mask size, side patch and batch size must be positive",
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Poly {
        Poly {
            base: self.lr,
            power: self.lr_power,
            total_steps: self.steps,
            min_lr: 0.0,
        }
    }
}

/// Pooled image vector, the static class embeddings and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInformedEmbedding {
    /// `1 × d`
    pub e_hat: Tensor,
    /// `C × d`
    pub e_static: Tensor,
    /// `C × d`
    pub e_fused: Tensor,
}

/// Proposals for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    /// `N_p × d_s`
    pub tokens: Tensor,
    /// `N_p × (h·w)`, row-major masks.
    pub mask_logits: Tensor,
    pub mask_size: (usize, usize),
    /// `N_p × (C+1)`, the last column is no-object.
    pub class_probs: Tensor,
}

/// Ground-truth regions of one image at mask resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SegTargets {
    /// Index into the active class list, one per region.
    pub gt_class: Vec<usize>,
    /// One binary `h·w` mask per region.
    pub gt_mask: Vec<Vec<f64>>,
}

impl SegTargets {
    pub fn len(&self) -> usize {
        self.gt_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_class.is_empty()
    }
}

/// Everything the segmenter reads from one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SegInput {
    /// Frozen encoder patch tokens, `P × d_visual`.
    pub visual: Tensor,
    /// Raw side-branch patches, `P_fine × 3s²`.
    pub pixels: Tensor,
    /// Image side in pixels.
    pub size: usize,
}

impl SegInput {
    pub fn encode(
        clip: &ClipModel,
        store: &ParamStore,
        image: &RgbImage,
        side_patch: usize,
    ) -> Result<Self> {
        if image.width() != image.height() {
            return Err(Error::invalid(format!(
                "segmentation expects square images, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        Ok(Self {
            visual: clip.image.encode(store, image)?.tokens,
            pixels: patchify(image, side_patch)?,
            size: image.width() as usize,
        })
    }
}

/// Nearest-neighbour resample of a label map to `size × size`.
pub fn resize_labels(mask: &GrayImage, size: usize) -> GrayImage {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    GrayImage::from_fn(size as u32, size as u32, |x, y| {
        let sx = ((x as usize * 2 + 1) * w / (2 * size)).min(w - 1);
        let sy = ((y as usize * 2 + 1) * h / (2 * size)).min(h - 1);
        *mask.get_pixel(sx as u32, sy as u32)
    })
}

/// One region per active class present in `mask`, at `size × size`.
/// `active` lists the class ids the classifier knows, in classifier order;
/// every other label (novel classes, background) belongs to no region.
pub fn build_targets(mask: &GrayImage, active: &[usize], size: usize) -> SegTargets {
    let small = resize_labels(mask, size);
    let mut gt_class = Vec::new();
    let mut rows = Vec::new();
    for (k, &c) in active.iter().enumerate() {
        let row: Vec<f64> = small
            .pixels()
            .map(|p| (p[0] as usize == c) as u8 as f64)
            .collect();
        if row.iter().any(|&v| v > 0.0) {
            gt_class.push(k);
            rows.push(row);
        }
    }
    SegTargets {
        gt_class,
        gt_mask: rows,
    }
}

/// Stage-II model: the query-token learner, the fusion projection and the mask head.
#[derive(Clone, Debug)]
pub struct Stage2Model {
    pub fl: FoodLearner,
    pub fusion: Linear,
    pub head: MaskHead,
    clip_image: ImageEncoder,
    pub cfg: Stage2Config,
    /// Forces the pooled image vector to zero: classes are represented by
    /// their static text embeddings only.
    pub static_text: bool,
    up_train: Tensor,
}

pub struct Stage2Pass<'t> {
    pub e_hat: Var<'t>,
    /// `N_p × (C+1)`
    pub class_logits: Var<'t>,
    /// `N_p × (h·w)` at the requested resolution.
    pub mask_logits: Var<'t>,
    pub tokens: Var<'t>,
}

/// Per-step training statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Record {
    pub step: usize,
    pub loss: f64,
    pub l_ce: f64,
    pub l_dice: f64,
    pub lr: f64,
}

impl Stage2Model {
    pub const PREFIX: &'static str = "stage2.";

    pub fn new(
        clip: &ClipModel,
        fl_cfg: &FoodLearnerConfig,
        vocab_size: usize,
        cfg: Stage2Config,
        static_text: bool,
    ) -> Self {
        let enc = clip.cfg();
        let head = MaskHead::new(
            "stage2.head",
            cfg.n_proposals,
            enc.grid(),
            enc.image_size,
            cfg.side_patch,
            enc.d_visual,
            cfg.head_dim,
            enc.d_text,
            cfg.head_layers,
            cfg.head_heads,
        );
        Self {
            fl: FoodLearner::new(fl_cfg, vocab_size, enc.d_visual),
            fusion: Linear::new("stage2.fusion", fl_cfg.d_q, enc.d_text, true),
            head,
            clip_image: clip.image.clone(),
            up_train: upsample_matrix(enc.image_size / cfg.side_patch, cfg.mask_size),
            cfg,
            static_text,
        }
    }

    /// Initializes the fusion projection (at zero) and the head. The learner
    /// is expected to be loaded from Stage I or initialized separately.
    pub fn init_heads(&self, store: &mut ParamStore, rng: &mut RngState) {
        self.fusion.init_std(store, rng, 0.0);
        self.head.init(store, &mut rng.derive(1, 0));
    }

    /// Pooled image knowledge `1 × d`; exactly zero in static-text mode.
    pub fn e_hat<'t>(&self, cx: &Ctx<'t>, visual: Var<'t>) -> Result<Var<'t>> {
        if self.static_text {
            return Ok(cx.constant(Tensor::zeros(&[1, self.fusion.d_out])));
        }
        let q = self.fl.enrich_queries(cx, Some(visual))?;
        Ok(pool_queries(cx, q, &self.fusion))
    }

    /// One full pass: fused class embeddings, proposal classes and masks.
    /// `upsample` maps the fine grid to the wanted mask resolution.
    pub fn pass<'t>(
        &self,
        cx: &Ctx<'t>,
        visual: Var<'t>,
        pixels: Var<'t>,
        e_static: Var<'t>,
        upsample: &Tensor,
    ) -> Result<Stage2Pass<'t>> {
        let e_hat = self.e_hat(cx, visual)?;
        let fused = fuse(e_hat, e_static)?;
        let out = self.head.forward(cx, visual, pixels);
        // region embedding: attention-pool the patch tokens under each mask,
        // then project with the frozen image head into the text space
        let pooled = out.patch_logits.softmax().matmul(visual);
        let region = self.clip_image.head(cx, pooled) + out.adapter;
        Ok(Stage2Pass {
            e_hat,
            class_logits: classify_logits(region, fused, out.no_object, self.cfg.tau),
            mask_logits: out.fine_logits.matmul(cx.constant(upsample.clone())),
            tokens: out.tokens,
        })
    }

    /// Matching cost `proposals × targets`: `λ_cls·(−ln p) + λ_dice·dice`.
    pub fn matching_cost(
        &self,
        probs: &Tensor,
        mask_probs: &Tensor,
        targets: &SegTargets,
    ) -> Tensor {
        let (np, nt) = (probs.rows(), targets.len());
        let mut c = Vec::with_capacity(np * nt);
        for p in 0..np {
            for t in 0..nt {
                let ce = -probs.at(p, targets.gt_class[t]).max(1e-300).ln();
                let dice = dice_value(mask_probs.row(p), &targets.gt_mask[t], self.cfg.dice_smooth);
                c.push(self.cfg.class_weight * ce + self.cfg.dice_weight * dice);
            }
        }
        Tensor::matrix(np, nt, c).expect("shape")
    }

    /// Matched cross-entropy plus Dice for one image. Unmatched proposals are
    /// pushed to the no-object column. Returns `(ce, dice)`; dice is `None`
    /// when the image has no active region.
    pub fn image_loss<'t>(
        &self,
        cx: &Ctx<'t>,
        input: &SegInput,
        e_static: Var<'t>,
        targets: &SegTargets,
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let visual = cx.constant(input.visual.clone());
        let pixels = cx.constant(input.pixels.clone());
        let pass = self.pass(cx, visual, pixels, e_static, &self.up_train)?;
        let n_cls = e_static.rows();
        let np = self.cfg.n_proposals;
        if targets.len() > np {
            return Err(Error::invalid(format!(
                "{} regions but only {np} proposals",
                targets.len()
            )));
        }
        let log_p = pass.class_logits.log_softmax();
        let mask_probs = pass.mask_logits.sigmoid();
        let assignment = if targets.is_empty() {
            Assignment {
                pairs: vec![],
                total_cost: 0.0,
            }
        } else {
            let probs = log_p.to_tensor().map(f64::exp);
            match_proposals(&self.matching_cost(&probs, &mask_probs.to_tensor(), targets))?
        };
        let target_of = assignment.target_of(np);
        let labels: Vec<usize> = target_of
            .iter()
            .map(|t| t.map_or(n_cls, |t| targets.gt_class[t]))
            .collect();
        let weights: Vec<f64> = target_of
            .iter()
            .map(|t| {
                if t.is_some() {
                    self.cfg.class_weight
                } else {
                    self.cfg.no_object_weight
                }
            })
            .collect();
        let w_sum: f64 = weights.iter().sum();
        let w = cx.constant(Tensor::matrix(np, 1, weights).expect("shape"));
        let ce = (log_p.pick(&labels) * w).sum().scale(-1.0 / w_sum);
        let dice = (!assignment.pairs.is_empty()).then(|| {
            let props: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
            let gt_rows: Vec<Vec<f64>> = assignment
                .pairs
                .iter()
                .map(|p| targets.gt_mask[p.1].clone())
                .collect();
            let gt = Tensor::from_rows(&gt_rows).expect("equal-length masks");
            dice_loss(
                cx,
                mask_probs.gather_rows(&props),
                &gt,
                self.cfg.dice_smooth,
            )
            .mean()
        });
        Ok((ce, dice))
    }

    /// Gradient-free pass with masks at the image's resolution.
    pub fn propose(
        &self,
        store: &ParamStore,
        input: &SegInput,
        e_static: &Tensor,
    ) -> Result<(ImageInformedEmbedding, ProposalSet)> {
        let tape = Tape::new();
        let cx = Ctx::inference(&tape, store);
        let v = cx.constant(input.visual.clone());
        let px = cx.constant(input.pixels.clone());
        let s = cx.constant(e_static.clone());
        let out = input.size;
        let up = upsample_matrix(self.head.fine_grid(), out);
        let pass = self.pass(&cx, v, px, s, &up)?;
        let fused = fuse(pass.e_hat, s)?;
        let probs = pass.class_logits.softmax();
        tape.check_finite()?;
        Ok((
            ImageInformedEmbedding {
                e_hat: pass.e_hat.to_tensor(),
                e_static: e_static.clone(),
                e_fused: fused.to_tensor(),
            },
            ProposalSet {
                tokens: pass.tokens.to_tensor(),
                mask_logits: pass.mask_logits.to_tensor(),
                mask_size: (out, out),
                class_probs: probs.to_tensor(),
            },
        ))
    }

    /// Per-pixel index into the class list of `e_static`, row-major at the image's resolution.
    pub fn segment(
        &self,
        store: &ParamStore,
        input: &SegInput,
        e_static: &Tensor,
    ) -> Result<Vec<usize>> {
        let (_, props) = self.propose(store, input, e_static)?;
        Ok(vote(
            &props.class_probs,
            &props.mask_logits,
            e_static.rows(),
        ))
    }
}

/// Mask-weighted vote: pixel class = argmax_c Σ_p P_cls[p,c]·σ(mask[p,pixel])
/// over the first `n_classes` columns (ties go to the lower index).
pub fn vote(class_probs: &Tensor, mask_logits: &Tensor, n_classes: usize) -> Vec<usize> {
    let np = class_probs.rows();
    let n_pix = mask_logits.cols();
    let sig = mask_logits.map(|v| 1.0 / (1.0 + (-v).exp()));
    (0..n_pix)
        .map(|px| {
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..n_classes {
                let s: f64 = (0..np).map(|p| class_probs.at(p, c) * sig.at(p, px)).sum();
                if s > best.1 {
                    best = (c, s);
                }
            }
            best.0
        })
        .collect()
}

/// Encoded Stage-II training set: frozen patch tokens and targets per view.
pub struct SegData {
    pub inputs: Vec<SegInput>,
    pub targets: Vec<SegTargets>,
    /// Class ids the classifier is trained on (base classes), in order.
    pub active: Vec<usize>,
    /// Target pixels whose original label was a novel class. Must stay zero.
    pub novel_target_pixels: usize,
}

impl SegData {
    /// Encodes `samples` with the frozen image encoder. Only base classes become
    /// targets; novel-class pixels are treated as unlabeled.
    pub fn encode(
        clip: &ClipModel,
        clip_store: &ParamStore,
        samples: &[SegSample],
        split: &ClassSplit,
        cfg: &Stage2Config,
    ) -> Result<Self> {
        let (mask_size, augment) = (cfg.mask_size, cfg.augment);
        let active = split.base.clone();
        // (image, training mask, original mask) for every view
        let views: Vec<(RgbImage, GrayImage, GrayImage)> = samples
            .iter()
            .flat_map(|s| {
                let base = crate::datagen::mask_base_only(&s.mask, split);
                let mut v = vec![(s.image.clone(), base.clone(), s.mask.clone())];
                if augment {
                    v.push((
                        imageops::flip_horizontal(&s.image),
                        imageops::flip_horizontal(&base),
                        imageops::flip_horizontal(&s.mask),
                    ));
                    v.push((
                        imageops::flip_vertical(&s.image),
                        imageops::flip_vertical(&base),
                        imageops::flip_vertical(&s.mask),
                    ));
                    v.push((
                        imageops::rotate180(&s.image),
                        imageops::rotate180(&base),
                        imageops::rotate180(&s.mask),
                    ));
                }
                v
            })
            .collect();
        let inputs = views
            .par_iter()
            .map(|(img, _, _)| SegInput::encode(clip, clip_store, img, cfg.side_patch))
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<SegTargets> = views
            .iter()
            .map(|(_, m, _)| build_targets(m, &active, mask_size))
            .collect();
        let mut novel_target_pixels = 0;
        for ((_, _, raw), t) in views.iter().zip(&targets) {
            let raw = resize_labels(raw, mask_size);
            for region in &t.gt_mask {
                novel_target_pixels += region
                    .iter()
                    .zip(raw.pixels())
                    .filter(|(g, p)| {
                        **g > 0.0 && p[0] != BACKGROUND && split.is_novel(p[0] as usize)
                    })
                    .count();
            }
        }
        Ok(Self {
            inputs,
            targets,
            active,
            novel_target_pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

const BATCH_TAG: u64 = 0x5e6b;

/// Stage-II optimisation state.
pub struct Stage2Trainer {
    pub model: Stage2Model,
    pub store: ParamStore,
    pub seed: u64,
    pub step: usize,
    opt: AdamW,
}

impl Stage2Trainer {
    pub fn new(model: Stage2Model, store: ParamStore, seed: u64) -> Self {
        let opt = AdamW::new(AdamWConfig {
            weight_decay: model.cfg.weight_decay,
            ..Default::default()
        });
        Self {
            model,
            store,
            seed,
            step: 0,
            opt,
        }
    }

    /// One optimisation step over a batch of images; `e_static` holds the
    /// active classes' static embeddings.
    pub fn train_step(&mut self, data: &SegData, e_static: &Tensor) -> Result<Stage2Record> {
        if data.is_empty() {
            return Err(Error::invalid("Stage II needs at least one image"));
        }
        let step = self.step;
        let cfg = &self.model.cfg;
        let b = cfg.batch_size.min(data.len());
        let idx = RngState::new(self.seed)
            .derive(BATCH_TAG, step as u64)
            .sample_distinct(data.len(), b);
        let lr = cfg.schedule().lr(step);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &self.store);
        let s = cx.constant(e_static.clone());
        let mut ce_parts = Vec::with_capacity(b);
        let mut dice_parts = Vec::with_capacity(b);
        for &i in &idx {
            let (ce, dice) = self
                .model
                .image_loss(&cx, &data.inputs[i], s, &data.targets[i])?;
            ce_parts.push(ce);
            dice_parts.extend(dice);
        }
        let inv = 1.0 / b as f64;
        let l_ce = sum(&ce_parts).scale(inv);
        let mut total = l_ce.scale(cfg.class_weight);
        let l_dice = if dice_parts.is_empty() {
            0.0
        } else {
            let d = sum(&dice_parts).scale(inv);
            total = total + d.scale(cfg.dice_weight);
            d.item()
        };
        let record = Stage2Record {
            step,
            loss: total.item(),
            l_ce: l_ce.item(),
            l_dice,
            lr,
        };
        if !record.loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("ce={} dice={} lr={lr:e}", record.l_ce, record.l_dice),
            });
        }
        let grads = tape.backward(total)?.into_params();
        self.opt.update(&mut self.store, &grads, lr)?;
        self.step += 1;
        Ok(record)
    }

    pub fn run(
        &mut self,
        data: &SegData,
        e_static: &Tensor,
        mut log: impl FnMut(&Stage2Record) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.model.cfg.steps {
            let r = self.train_step(data, e_static)?;
            log(&r)?;
        }
        Ok(())
    }

    /// Trained learner, fusion and head parameters.
    pub fn checkpoint(&self) -> Archive {
        let mut params = self.store.subset(FoodLearner::PREFIX);
        params.absorb_prefix(&self.store, Stage2Model::PREFIX);
        Archive::new(params)
            .with_meta("kind", "stage2")
            .with_meta("step", self.step as u64)
            .with_meta("seed", self.seed)
            .with_meta("static_text", self.model.static_text)
    }
}

fn sum<'t>(parts: &[Var<'t>]) -> Var<'t> {
    parts
        .iter()
        .copied()
        .reduce(|a, b| a + b)
        .expect("non-empty")
}
