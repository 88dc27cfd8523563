//! Symmetric contrastive pre-pretraining of the encoder pair. It stands in
//! for a downloaded CLIP checkpoint: afterwards the encoders are frozen and
//! every later stage only reads them.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::image_encoder::ImageEncoder;
use super::text_encoder::TextEncoder;
use super::tokenizer::Vocab;
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::numcore::optim::{AdamW, AdamWConfig, WarmupCosine};
use crate::numcore::{concat_rows, Ctx, ParamStore, RngState, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipConfig {
    /// Generated image–caption pairs used for contrastive training.
    pub pairs: usize,
    pub heldout_pairs: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    /// Minimum held-out image→text R@1 for the run to count as converged.
    pub min_r1: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            pairs: 4096,
            heldout_pairs: 64,
            steps: 500,
            batch_size: 64,
            warmup_steps: 20,
            lr_start: 1e-5,
            lr_peak: 2e-3,
            lr_end: 1e-4,
            weight_decay: 0.01,
            temperature: 0.07,
            min_r1: 0.9,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub heldout_r1: Option<f64>,
    pub converged: bool,
}

/// Image and text encoder sharing a joint embedding space.
#[derive(Clone, Debug)]
pub struct ClipModel {
    pub image: ImageEncoder,
    pub text: TextEncoder,
}

impl ClipModel {
    pub const PREFIX: &'static str = "clip.";

    pub fn new(cfg: &EncoderConfig, vocab_size: usize) -> Self {
        Self {
            image: ImageEncoder::new(cfg),
            text: TextEncoder::new(cfg, vocab_size),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        self.image.init(store, &mut rng.derive(1, 0));
        self.text.init(store, &mut rng.derive(2, 0));
    }

    pub fn cfg(&self) -> &EncoderConfig {
        &self.image.cfg
    }

    /// Unit-norm global image embeddings (`n × d_text`).
    pub fn image_embeddings(&self, store: &ParamStore, images: &[&RgbImage]) -> Result<Tensor> {
        let tape = Tape::new();
        let cx = Ctx::inference(&tape, store);
        let rows = images
            .iter()
            .map(|img| Ok(self.image.embed(&cx, self.image.forward(&cx, img)?)))
            .collect::<Result<Vec<_>>>()?;
        let out = concat_rows(&rows).l2_normalize();
        tape.check_finite()?;
        Ok(out.to_tensor())
    }

    /// Unit-norm caption embeddings (`n × d_text`).
    pub fn text_embeddings(
        &self,
        store: &ParamStore,
        vocab: &Vocab,
        texts: &[&str],
    ) -> Result<Tensor> {
        let tape = Tape::new();
        let cx = Ctx::inference(&tape, store);
        let rows = texts
            .iter()
            .map(|t| self.text.forward(&cx, &vocab.tokenize(t)))
            .collect::<Result<Vec<_>>>()?;
        let out = concat_rows(&rows).l2_normalize();
        tape.check_finite()?;
        Ok(out.to_tensor())
    }

    /// Image→text R@1 over a set of pairs.
    pub fn retrieval_r1(
        &self,
        store: &ParamStore,
        vocab: &Vocab,
        pairs: &[(&RgbImage, &str)],
    ) -> Result<f64> {
        let imgs: Vec<&RgbImage> = pairs.iter().map(|p| p.0).collect();
        let caps: Vec<&str> = pairs.iter().map(|p| p.1).collect();
        let ie = self.image_embeddings(store, &imgs)?;
        let te = self.text_embeddings(store, vocab, &caps)?;
        let sim = crate::numcore::matmul(&ie, &te.transpose())?;
        Ok(retrieval_r1(&sim, &caps))
    }
}

/// Fraction of rows whose arg-max column carries the same caption as the row.
/// Identical captions count as correct retrievals of each other.
pub fn retrieval_r1<S: AsRef<str>>(sim: &Tensor, captions: &[S]) -> f64 {
    let n = sim.rows();
    let hits = (0..n)
        .filter(|&i| {
            let row = sim.row(i);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .expect("non-empty row");
            captions[best].as_ref() == captions[i].as_ref()
        })
        .count();
    hits as f64 / n as f64
}

/// Contrastive loss where every column with the row's caption counts as positive.
pub(crate) fn multi_positive_nce<'t>(cx: &Ctx<'t>, logits: Var<'t>, captions: &[&str]) -> Var<'t> {
    let n = captions.len();
    let mut pos = Vec::with_capacity(n * n);
    for a in captions {
        for b in captions {
            pos.push(if a == b { 1.0 } else { 0.0 });
        }
    }
    let pos = cx.constant(Tensor::matrix(n, n, pos).expect("square"));
    let side = |l: Var<'t>| (l.softmax() * pos).sum_cols().ln().mean().neg();
    (side(logits) + side(logits.transpose())).scale(0.5)
}

/// Trains both encoders contrastively on `pairs`, then freezes them.
pub fn pretrain_toy_clip(
    pairs: &[(RgbImage, String)],
    heldout: &[(RgbImage, String)],
    vocab: &Vocab,
    enc_cfg: &EncoderConfig,
    cfg: &ClipConfig,
    seed: u64,
) -> Result<(ClipModel, ParamStore, ClipReport)> {
    if pairs.len() < 2 {
        return Err(Error::invalid(
            "contrastive training needs at least 2 pairs",
        ));
    }
    let rng = RngState::new(seed);
    let model = ClipModel::new(enc_cfg, vocab.len());
    let mut store = ParamStore::new();
    model.init(&mut store, &mut rng.derive(10, 0));
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let sched = WarmupCosine {
        start: cfg.lr_start,
        peak: cfg.lr_peak,
        end: cfg.lr_end,
        warmup_steps: cfg.warmup_steps,
        total_steps: cfg.steps,
    };
    let tokens: Vec<Vec<u32>> = pairs.iter().map(|p| vocab.tokenize(&p.1)).collect();
    let scale = 1.0 / cfg.temperature;
    let batch = cfg.batch_size.min(pairs.len()).max(2);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = rng
            .derive(11, step as u64)
            .sample_distinct(pairs.len(), batch);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let mut img_rows = Vec::with_capacity(batch);
        let mut txt_rows = Vec::with_capacity(batch);
        for &i in &idx {
            img_rows.push(
                model
                    .image
                    .embed(&cx, model.image.forward(&cx, &pairs[i].0)?),
            );
            txt_rows.push(model.text.forward(&cx, &tokens[i])?);
        }
        let ie = concat_rows(&img_rows).l2_normalize();
        let te = concat_rows(&txt_rows).l2_normalize();
        let logits = ie.matmul_t(te).scale(scale);
        let caps: Vec<&str> = idx.iter().map(|&i| pairs[i].1.as_str()).collect();
        let loss = multi_positive_nce(&cx, logits, &caps);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "contrastive loss is not finite".into(),
            });
        }
        let grads = tape.backward(loss)?.into_params();
        opt.update(&mut store, &grads, sched.lr(step))?;
        losses.push(value);
    }
    store.freeze_prefix(ClipModel::PREFIX);
    let heldout_r1 = if heldout.is_empty() {
        None
    } else {
        let hp: Vec<(&RgbImage, &str)> = heldout.iter().map(|(i, c)| (i, c.as_str())).collect();
        Some(model.retrieval_r1(&store, vocab, &hp)?)
    };
    let converged = heldout_r1.is_none_or(|r| r >= cfg.min_r1);
    Ok((
        model,
        store,
        ClipReport {
            steps: cfg.steps,
            losses,
            heldout_r1,
            converged,
        },
    ))
}
