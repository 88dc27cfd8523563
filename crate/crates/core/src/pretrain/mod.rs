//! Stage I: contrastive, matching and captioning objectives over image–text
//! pairs, training the query-token learner and its heads against frozen
//! visual features.

mod losses;

pub use losses::{
    itc_loss, itc_similarity, itm_loss, lm_loss, sample_negatives, ItcConfig, ItcOutput,
    ItmCandidate, ItmOutput, LossBundle,
};

use std::fmt;
use std::str::FromStr;

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};

use crate::encoders::{retrieval_r1, ClipModel, Vocab};
use crate::error::{Error, Result};
use crate::foodlearner::{AttentionRegime, FoodLearner, FoodLearnerConfig};
use crate::numcore::layers::Linear;
use crate::numcore::optim::{AdamW, AdamWConfig, WarmupCosine};
use crate::numcore::{concat_rows, Archive, Ctx, ParamStore, RngState, Tape, Tensor, Var};

/// Which Stage-I objectives contribute to the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossToggles {
    pub itc: bool,
    pub itm: bool,
    pub lm: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            itc: true,
            itm: true,
            lm: true,
        }
    }
}

impl FromStr for LossToggles {
    type Err = Error;

    /// Comma-separated subset of `itc`, `itm`, `lm` (or `all`).
    fn from_str(s: &str) -> Result<Self> {
        let mut t = LossToggles {
            itc: false,
            itm: false,
            lm: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "itc" => t.itc = true,
                "itm" => t.itm = true,
                "lm" => t.lm = true,
                "all" => t = LossToggles::default(),
                other => return Err(Error::invalid(format!("unknown loss `{other}`"))),
            }
        }
        if !(t.itc || t.itm || t.lm) {
            return Err(Error::invalid("at least one loss must be enabled"));
        }
        Ok(t)
    }
}

impl fmt::Display for LossToggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.itc, "itc"), (self.itm, "itm"), (self.lm, "lm")]
            .iter()
            .filter(|p| p.0)
            .map(|p| p.1)
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub phi: f64,
    pub loss_toggles: LossToggles,
    pub itm_hard_negatives: bool,
    /// Adds flipped and rotated views of every training image.
    pub augment: bool,
    /// Starts the learner's word and position tables from the frozen text encoder.
    pub init_text_from_encoder: bool,
    /// Halts this run after this many total steps, leaving the schedule as
    /// if it ran to `steps`; resume later to finish.
    pub stop_after: Option<usize>,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 32,
            warmup_steps: 30,
            lr_start: 1e-6,
            lr_peak: 2e-3,
            lr_end: 1e-5,
            weight_decay: 0.05,
            phi: 10.0,
            loss_toggles: LossToggles::default(),
            itm_hard_negatives: false,
            augment: true,
            init_text_from_encoder: true,
            stop_after: None,
        }
    }
}

impl Stage1Config {
    pub fn schedule(&self) -> WarmupCosine {
        WarmupCosine {
            start: self.lr_start,
            peak: self.lr_peak,
            end: self.lr_end,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Label-preserving views of an image: itself, both mirror images and a half turn.
pub fn flip_views(image: &RgbImage) -> Vec<RgbImage> {
    vec![
        image.clone(),
        imageops::flip_horizontal(image),
        imageops::flip_vertical(image),
        imageops::rotate180(image),
    ]
}

/// Cached pairs: frozen patch tokens per view, token ids and caption text.
#[derive(Clone, Debug, Default)]
pub struct PairData {
    /// `views[i][0]` is the unmodified image of pair `i`.
    pub views: Vec<Vec<Tensor>>,
    pub tokens: Vec<Vec<u32>>,
    pub captions: Vec<String>,
}

/// Borrowed batch handed to the loss functions.
#[derive(Clone, Debug)]
pub struct PairBatch<'a> {
    pub visual: Vec<&'a Tensor>,
    pub tokens: Vec<&'a [u32]>,
    pub captions: Vec<&'a str>,
}

impl PairData {
    /// Encodes every image once with the frozen image encoder.
    pub fn encode(
        clip: &ClipModel,
        store: &ParamStore,
        vocab: &Vocab,
        pairs: &[(RgbImage, String)],
        augment: bool,
    ) -> Result<Self> {
        use rayon::prelude::*;
        let views = pairs
            .par_iter()
            .map(|(img, _)| {
                let imgs = if augment {
                    flip_views(img)
                } else {
                    vec![img.clone()]
                };
                imgs.iter()
                    .map(|v| Ok(clip.image.encode(store, v)?.tokens))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            views,
            tokens: pairs.iter().map(|p| vocab.tokenize(&p.1)).collect(),
            captions: pairs.iter().map(|p| p.1.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    /// Unmodified views only.
    pub fn batch(&self, idx: &[usize]) -> PairBatch<'_> {
        self.batch_with_views(idx, &vec![0; idx.len()])
    }

    fn batch_with_views(&self, idx: &[usize], views: &[usize]) -> PairBatch<'_> {
        PairBatch {
            visual: idx
                .iter()
                .zip(views)
                .map(|(&i, &v)| &self.views[i][v])
                .collect(),
            tokens: idx.iter().map(|&i| self.tokens[i].as_slice()).collect(),
            captions: idx.iter().map(|&i| self.captions[i].as_str()).collect(),
        }
    }

    /// Batch where each item shows a view drawn from `rng`.
    pub fn sample_views(&self, idx: &[usize], rng: &mut RngState) -> PairBatch<'_> {
        let views: Vec<usize> = idx
            .iter()
            .map(|&i| rng.below(self.views[i].len()))
            .collect();
        self.batch_with_views(idx, &views)
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> PairData {
        PairData {
            views: self.views[range.clone()].to_vec(),
            tokens: self.tokens[range.clone()].to_vec(),
            captions: self.captions[range].to_vec(),
        }
    }
}

/// The learner plus the Stage-I heads.
#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub fl: FoodLearner,
    itc_image: Linear,
    itc_text: Linear,
    pub itm_head: Linear,
    pub lm_head: Linear,
}

/// Per-objective loss values of one step; disabled objectives are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_itc: Option<f64>,
    pub l_itm: Option<f64>,
    pub l_lm: Option<f64>,
    pub lr: f64,
}

impl LossRecord {
    pub fn bundle(&self) -> LossBundle {
        LossBundle::new(
            self.l_itc.unwrap_or(0.0),
            self.l_itm.unwrap_or(0.0),
            self.l_lm.unwrap_or(0.0),
        )
    }
}

/// Loss nodes of one batch; disabled objectives are `None`.
pub struct StepLosses<'t> {
    pub itc: Option<Var<'t>>,
    pub itm: Option<Var<'t>>,
    pub lm: Option<Var<'t>>,
}

impl Stage1Model {
    pub const HEAD_PREFIX: &'static str = "stage1.";

    pub fn new(cfg: &FoodLearnerConfig, vocab_size: usize, d_visual: usize) -> Self {
        let d = cfg.d_q;
        Self {
            fl: FoodLearner::new(cfg, vocab_size, d_visual),
            itc_image: Linear::new("stage1.itc_image", d, d, false),
            itc_text: Linear::new("stage1.itc_text", d, d, false),
            itm_head: Linear::new("stage1.itm_head", d, 2, true),
            lm_head: Linear::new("stage1.lm_head", d, vocab_size, true),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        self.fl.init(store, &mut rng.derive(1, 0));
        let mut r = rng.derive(2, 0);
        self.itc_image.init(store, &mut r);
        self.itc_text.init(store, &mut r);
        self.itm_head.init(store, &mut r);
        self.lm_head.init(store, &mut r);
    }

    /// Projected enriched queries (`Q×d`) for one image.
    pub fn image_side<'t>(&self, cx: &Ctx<'t>, visual: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let enriched = self.fl.enrich_queries(cx, Some(visual))?;
        Ok((enriched, self.itc_image.forward(cx, enriched)))
    }

    /// Projected EOS state (`1×d`) of one caption.
    pub fn text_side<'t>(&self, cx: &Ctx<'t>, ids: &[u32]) -> Result<Var<'t>> {
        let (states, eos) = self.fl.enrich_text(cx, ids)?;
        Ok(self.itc_text.forward(cx, states.row(eos)))
    }

    pub fn losses<'t>(
        &self,
        cx: &Ctx<'t>,
        batch: &PairBatch<'_>,
        cfg: &Stage1Config,
        rng: &mut RngState,
    ) -> Result<StepLosses<'t>> {
        let t = cfg.loss_toggles;
        let b = batch.visual.len();
        let mut enriched = Vec::with_capacity(b);
        let mut projected = Vec::with_capacity(b);
        for v in &batch.visual {
            let (e, p) = self.image_side(cx, cx.constant((*v).clone()))?;
            enriched.push(e);
            projected.push(p);
        }
        let mut itc_logits = None;
        let itc = if t.itc || (t.itm && cfg.itm_hard_negatives) {
            let texts: Vec<Var<'t>> = batch
                .tokens
                .iter()
                .map(|ids| self.text_side(cx, ids))
                .collect::<Result<_>>()?;
            let out = itc_loss(&projected, concat_rows(&texts), &ItcConfig { phi: cfg.phi })?;
            itc_logits = Some(out.logits.to_tensor());
            t.itc.then_some(out.loss)
        } else {
            None
        };
        let itm = if t.itm {
            let sim = if cfg.itm_hard_negatives {
                itc_logits.as_ref()
            } else {
                None
            };
            let cands = sample_negatives(&batch.captions, rng, sim)?;
            let q = self.fl.cfg.q_tokens;
            let mut outs = Vec::with_capacity(cands.len());
            for c in &cands {
                let seq = self.fl.forward(
                    cx,
                    None,
                    Some(enriched[c.image]),
                    batch.tokens[c.text],
                    AttentionRegime::BidirectionalMultimodal,
                )?;
                outs.push(seq.slice_rows(0, q));
            }
            let labels: Vec<bool> = cands.iter().map(|c| c.matched).collect();
            Some(itm_loss(cx, &self.itm_head, &outs, &labels)?.loss)
        } else {
            None
        };
        let lm = if t.lm {
            let q = self.fl.cfg.q_tokens;
            let mut states = Vec::with_capacity(b);
            for (e, toks) in enriched.iter().zip(&batch.tokens) {
                let seq =
                    self.fl
                        .forward(cx, None, Some(*e), toks, AttentionRegime::CausalMultimodal)?;
                states.push(seq.slice_rows(q, toks.len()));
            }
            Some(lm_loss(cx, &self.lm_head, &states, &batch.tokens)?)
        } else {
            None
        };
        Ok(StepLosses { itc, itm, lm })
    }

    /// Image × text ITC similarity (max cosine over query tokens).
    pub fn similarity(
        &self,
        store: &ParamStore,
        visual: &[&Tensor],
        tokens: &[&[u32]],
    ) -> Result<Tensor> {
        let tape = Tape::new();
        let cx = Ctx::inference(&tape, store);
        let imgs: Vec<Var> = visual
            .iter()
            .map(|v| Ok(self.image_side(&cx, cx.constant((*v).clone()))?.1))
            .collect::<Result<_>>()?;
        let texts: Vec<Var> = tokens
            .iter()
            .map(|t| self.text_side(&cx, t))
            .collect::<Result<_>>()?;
        let sim = itc_similarity(&imgs, concat_rows(&texts))?;
        tape.check_finite()?;
        Ok(sim.to_tensor())
    }

    /// Image→text R@1 through ITC similarity; identical captions count as hits.
    pub fn retrieval_r1(&self, store: &ParamStore, data: &PairData) -> Result<f64> {
        let b = data.batch(&(0..data.len()).collect::<Vec<_>>());
        let sim = self.similarity(store, &b.visual, &b.tokens)?;
        Ok(retrieval_r1(&sim, &data.captions))
    }
}

const BATCH_TAG: u64 = 0xba7c;
const NEG_TAG: u64 = 0x4e6;
const VIEW_TAG: u64 = 0x71e3;

/// Resumable Stage-I optimisation state.
pub struct Stage1Trainer {
    pub model: Stage1Model,
    pub store: ParamStore,
    pub cfg: Stage1Config,
    pub seed: u64,
    pub step: usize,
    opt: AdamW,
}

impl Stage1Trainer {
    pub fn new(model: Stage1Model, store: ParamStore, cfg: Stage1Config, seed: u64) -> Self {
        let opt = AdamW::new(cfg.adamw());
        Self {
            model,
            store,
            cfg,
            seed,
            step: 0,
            opt,
        }
    }

    /// Batch indices of `step`; a pure function of seed and step.
    pub fn batch_indices(&self, n: usize, step: usize) -> Vec<usize> {
        let b = self.cfg.batch_size.min(n);
        RngState::new(self.seed)
            .derive(BATCH_TAG, step as u64)
            .sample_distinct(n, b)
    }

    /// Evaluates the enabled losses on a batch without updating anything.
    pub fn evaluate(&self, data: &PairData, idx: &[usize], step: usize) -> Result<LossRecord> {
        let tape = Tape::new();
        let cx = Ctx::inference(&tape, &self.store);
        let mut rng = RngState::new(self.seed).derive(NEG_TAG, step as u64);
        let l = self
            .model
            .losses(&cx, &data.batch(idx), &self.cfg, &mut rng)?;
        Ok(LossRecord {
            step,
            l_itc: l.itc.map(|v| v.item()),
            l_itm: l.itm.map(|v| v.item()),
            l_lm: l.lm.map(|v| v.item()),
            lr: self.cfg.schedule().lr(step),
        })
    }

    pub fn train_step(&mut self, data: &PairData) -> Result<LossRecord> {
        if data.len() < 2 {
            return Err(Error::invalid("Stage I needs at least 2 pairs"));
        }
        let step = self.step;
        let idx = self.batch_indices(data.len(), step);
        let lr = self.cfg.schedule().lr(step);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &self.store);
        let batch = data.sample_views(
            &idx,
            &mut RngState::new(self.seed).derive(VIEW_TAG, step as u64),
        );
        let mut rng = RngState::new(self.seed).derive(NEG_TAG, step as u64);
        let l = self.model.losses(&cx, &batch, &self.cfg, &mut rng)?;
        let parts: Vec<Var> = [l.itc, l.itm, l.lm].into_iter().flatten().collect();
        let total = parts
            .iter()
            .copied()
            .reduce(|a, b| a + b)
            .ok_or_else(|| Error::invalid("no Stage-I loss enabled"))?;
        let record = LossRecord {
            step,
            l_itc: l.itc.map(|v| v.item()),
            l_itm: l.itm.map(|v| v.item()),
            l_lm: l.lm.map(|v| v.item()),
            lr,
        };
        if !total.item().is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "itc={:?} itm={:?} lm={:?} lr={lr:e}",
                    record.l_itc, record.l_itm, record.l_lm
                ),
            });
        }
        let grads = tape.backward(total)?.into_params();
        self.opt.update(&mut self.store, &grads, lr)?;
        self.step += 1;
        Ok(record)
    }

    /// Runs until `cfg.steps` (or `cfg.stop_after`), handing every record to `log`.
    pub fn run(
        &mut self,
        data: &PairData,
        mut log: impl FnMut(&LossRecord) -> Result<()>,
    ) -> Result<()> {
        let end = self
            .cfg
            .stop_after
            .map_or(self.cfg.steps, |s| s.min(self.cfg.steps));
        while self.step < end {
            let r = self.train_step(data)?;
            log(&r)?;
        }
        Ok(())
    }

    /// Model parameters, optimizer moments and enough metadata to resume.
    pub fn checkpoint(&self) -> Archive {
        let mut params = self.store.subset(FoodLearner::PREFIX);
        params.absorb_prefix(&self.store, Stage1Model::HEAD_PREFIX);
        self.opt.export(&mut params);
        let fl = &self.model.fl.cfg;
        Archive::new(params)
            .with_meta("kind", "stage1")
            .with_meta("step", self.step as u64)
            .with_meta("seed", self.seed)
            .with_meta("q_tokens", fl.q_tokens as u64)
            .with_meta("d_q", fl.d_q as u64)
            .with_meta("vocab_size", self.model.fl.vocab_size as u64)
    }

    /// Restores a trainer from [`Self::checkpoint`] output.
    pub fn resume(model: Stage1Model, archive: &Archive, cfg: Stage1Config) -> Result<Self> {
        check_stage1_archive(&model, archive)?;
        let step = archive.meta_u64("step")? as usize;
        let seed = archive.meta_u64("seed")?;
        let mut store = archive.params.subset(FoodLearner::PREFIX);
        store.absorb_prefix(&archive.params, Stage1Model::HEAD_PREFIX);
        let opt = AdamW::import(cfg.adamw(), step as u64, &archive.params);
        Ok(Self {
            model,
            store,
            cfg,
            seed,
            step,
            opt,
        })
    }
}

/// Rejects archives whose recorded shapes disagree with `model`.
pub fn check_stage1_archive(model: &Stage1Model, archive: &Archive) -> Result<()> {
    let fl = &model.fl.cfg;
    for (key, want) in [
        ("q_tokens", fl.q_tokens),
        ("d_q", fl.d_q),
        ("vocab_size", model.fl.vocab_size),
    ] {
        let got = archive.meta_u64(key)? as usize;
        if got != want {
            return Err(Error::Archive(format!(
                "{key} is {got} in the archive but {want} in the model"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::check_params;

    fn tiny() -> (Stage1Model, ParamStore, PairData) {
        let cfg = FoodLearnerConfig {
            q_tokens: 2,
            d_q: 8,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            max_text_len: 6,
            query_init_std: 0.5,
        };
        let model = Stage1Model::new(&cfg, 9, 6);
        let mut store = ParamStore::new();
        let mut rng = RngState::new(2);
        model.init(&mut store, &mut rng);
        let data = PairData {
            views: (0..4)
                .map(|_| {
                    vec![
                        rng.normal_tensor(&[4, 6], 1.0),
                        rng.normal_tensor(&[4, 6], 1.0),
                    ]
                })
                .collect(),
            tokens: vec![
                vec![1, 4, 2],
                vec![1, 5, 6, 2],
                vec![1, 7, 2],
                vec![1, 8, 4, 2],
            ],
            captions: vec!["a".into(), "b".into(), "c".into(), "d".into()],
        };
        (model, store, data)
    }

    #[test]
    fn toggles_parse_and_print() {
        let t: LossToggles = "itc,lm".parse().unwrap();
        assert_eq!((t.itc, t.itm, t.lm), (true, false, true));
        assert_eq!(t.to_string(), "itc,lm");
        assert_eq!(
            "all".parse::<LossToggles>().unwrap(),
            LossToggles::default()
        );
        assert!("".parse::<LossToggles>().is_err());
        assert!("itc,foo".parse::<LossToggles>().is_err());
    }

    #[test]
    fn bundle_total_is_exact_sum() {
        let b = LossBundle::new(0.1, 0.2, 0.3);
        assert_eq!(b.total, 0.1 + 0.2 + 0.3);
    }

    #[test]
    fn stage1_losses_have_correct_gradients() {
        let (model, store, data) = tiny();
        let names: Vec<String> = store.names().cloned().collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let cfg = Stage1Config::default();
        let r = check_params(
            &store,
            &names,
            |cx| {
                let l =
                    model.losses(cx, &data.batch(&[0, 1, 2, 3]), &cfg, &mut RngState::new(1))?;
                Ok(l.itc.unwrap() + l.itm.unwrap() + l.lm.unwrap())
            },
            1e-6,
            1e-4,
            3,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (model, store, data) = tiny();
        let cfg = Stage1Config {
            steps: 6,
            batch_size: 3,
            warmup_steps: 2,
            lr_peak: 1e-2,
            ..Default::default()
        };
        let mut full = Stage1Trainer::new(model.clone(), store.clone(), cfg.clone(), 5);
        let mut full_log = Vec::new();
        full.run(&data, |r| {
            let _: () = full_log.push(*r);
            Ok(())
        })
        .unwrap();

        let mut first = Stage1Trainer::new(model.clone(), store, cfg.clone(), 5);
        let mut log = Vec::new();
        for _ in 0..3 {
            log.push(first.train_step(&data).unwrap());
        }
        let bytes = first.checkpoint().to_bytes().unwrap();
        let mut resumed =
            Stage1Trainer::resume(model, &Archive::from_bytes(&bytes).unwrap(), cfg).unwrap();
        resumed
            .run(&data, |r| {
                let _: () = log.push(*r);
                Ok(())
            })
            .unwrap();
        assert_eq!(log, full_log);
        assert!(resumed.store.bit_eq(&full.store));
    }
}
