//! End-to-end commands: each reads its inputs from disk, writes its outputs
//! plus an echo of the effective configuration into one directory, and
//! returns a small summary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::datagen::{
    class_names, gen_corpus, make_classes, read_json, read_pairs, read_samples, split_classes,
    write_json, write_pairs, write_samples, ClassSplit, DataConfig, DatasetPaths, IngredientClass,
    SegSample, BACKGROUND,
};
use crate::encoders::{pretrain_toy_clip, ClipModel, ClipReport, EncoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::foodlearner::FoodLearner;
use crate::metrics::{confusion_counts, summarize, ConfusionCounts, MetricsReport};
use crate::numcore::{Archive, ParamStore, RngState, Tensor};
use crate::pretrain::{PairData, Stage1Model, Stage1Trainer};
use crate::segmentation::{static_text_embeddings, SegData, SegInput, Stage2Model, Stage2Trainer};

pub const CONFIG_FILE: &str = "config.json";
pub const DATA_CONFIG_FILE: &str = "data.json";
pub const CLIP_FILE: &str = "clip.bin";
pub const STAGE1_FILE: &str = "stage1.bin";
pub const STAGE2_FILE: &str = "stage2.bin";
pub const LOSS_LOG: &str = "loss.jsonl";
pub const REPORT_FILE: &str = "report.json";

// Corpus tags under the run seed.
const PAIRS_TAG: u64 = 1;
const HELDOUT_TAG: u64 = 2;
const TRAIN_TAG: u64 = 3;
const EVAL_TAG: u64 = 4;
const CLIP_PAIRS_TAG: u64 = 5;
const CLIP_HELDOUT_TAG: u64 = 6;

/// Creates `out`, refusing to reuse a non-empty directory unless `force`,
/// and echoes the effective configuration into it.
pub fn prepare_out(out: &Path, force: bool, cfg: &RunConfig) -> Result<()> {
    if out.exists() {
        let non_empty = !out.is_dir()
            || fs::read_dir(out)
                .map_err(|e| Error::io(out, e))?
                .next()
                .is_some();
        if non_empty && !force {
            return Err(Error::PathExists(out.to_path_buf()));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(CONFIG_FILE);
    fs::write(&path, cfg.to_json()).map_err(|e| Error::io(path, e))
}

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path
        .clone()
        .ok_or_else(|| Error::MissingInput(format!("no {what} path given")))?;
    if !p.exists() {
        return Err(Error::MissingInput(format!(
            "{what} {} does not exist",
            p.display()
        )));
    }
    Ok(p)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.paths
        .out
        .clone()
        .ok_or_else(|| Error::MissingInput("no output directory given".into()))
}

/// A generated dataset opened from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub paths: DatasetPaths,
    pub config: DataConfig,
    pub classes: Vec<IngredientClass>,
    pub names: Vec<String>,
    pub split: ClassSplit,
    pub vocab: Vocab,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let paths = DatasetPaths::new(root);
        let config: DataConfig = read_json(&root.join(DATA_CONFIG_FILE))?;
        let classes: Vec<IngredientClass> = read_json(&paths.classes())?;
        let split: ClassSplit = read_json(&paths.split())?;
        let vocab = Vocab::load(&paths.vocab())?;
        let names: Vec<String> = classes.iter().map(|c| c.name.clone()).collect();
        if names.len() != config.n_classes {
            return Err(Error::ClassMismatch(format!(
                "{} classes listed, {} configured",
                names.len(),
                config.n_classes
            )));
        }
        split.validate(names.len())?;
        if let Some(missing) = names.iter().find(|n| !vocab.contains(n)) {
            return Err(Error::ClassMismatch(format!(
                "class `{missing}` is not in the vocabulary"
            )));
        }
        Ok(Self {
            paths,
            config,
            classes,
            names,
            split,
            vocab,
        })
    }

    pub fn pairs(&self) -> Result<Vec<(RgbImage, String)>> {
        read_pairs(&self.paths.pairs())
    }

    pub fn heldout(&self) -> Result<Vec<(RgbImage, String)>> {
        read_pairs(&self.paths.heldout())
    }

    pub fn train(&self) -> Result<Vec<SegSample>> {
        read_samples(&self.paths.train())
    }

    pub fn eval(&self) -> Result<Vec<SegSample>> {
        read_samples(&self.paths.eval())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub classes: usize,
    pub pairs: usize,
    pub heldout_pairs: usize,
    pub train: usize,
    pub eval: usize,
    pub novel: Vec<usize>,
}

fn pairs_of(samples: Vec<SegSample>) -> Vec<(RgbImage, String)> {
    samples.into_iter().map(|s| (s.image, s.caption)).collect()
}

/// Renders all corpora and the class split into `paths.out`.
pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<DataSummary> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    let d = &cfg.data;
    prepare_out(&out, force, cfg)?;
    let names = class_names(d.n_classes);
    let classes = make_classes(&names, d.modes_per_class, &mut RngState::new(d.class_seed));
    let rng = RngState::new(cfg.seed);
    let split = split_classes(d.n_classes, d.fraction_novel, cfg.seed)?;
    let paths = DatasetPaths::new(&out);
    write_json(&out.join(DATA_CONFIG_FILE), d)?;
    write_json(&paths.classes(), &classes)?;
    write_json(&paths.split(), &split)?;
    Vocab::for_classes(&names).save(&paths.vocab())?;
    write_pairs(
        &paths.pairs(),
        &pairs_of(gen_corpus(&classes, d, d.n_pairs, &rng, PAIRS_TAG)),
    )?;
    write_pairs(
        &paths.heldout(),
        &pairs_of(gen_corpus(
            &classes,
            d,
            d.n_heldout_pairs,
            &rng,
            HELDOUT_TAG,
        )),
    )?;
    write_samples(
        &paths.train(),
        &gen_corpus(&classes, d, d.n_train, &rng, TRAIN_TAG),
    )?;
    write_samples(
        &paths.eval(),
        &gen_corpus(&classes, d, d.n_eval, &rng, EVAL_TAG),
    )?;
    let ds = Dataset::open(&out)?;
    Ok(DataSummary {
        classes: ds.names.len(),
        pairs: d.n_pairs,
        heldout_pairs: d.n_heldout_pairs,
        train: d.n_train,
        eval: d.n_eval,
        novel: ds.split.novel,
    })
}

/// The frozen encoder pair together with the vocabulary it was trained on.
#[derive(Clone, Debug)]
pub struct FrozenClip {
    pub model: ClipModel,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub config: EncoderConfig,
    pub class_names: Vec<String>,
}

impl FrozenClip {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.meta_str("kind")? != "clip" {
            return Err(Error::Archive("not an encoder archive".into()));
        }
        let config: EncoderConfig = meta_value(a, "encoder")?;
        let vocab = Vocab::from_file_contents(a.meta_str("vocab")?)?;
        let class_names: Vec<String> = meta_value(a, "classes")?;
        let mut store = a.params.subset(ClipModel::PREFIX);
        store.freeze_prefix(ClipModel::PREFIX);
        Ok(Self {
            model: ClipModel::new(&config, vocab.len()),
            store,
            vocab,
            config,
            class_names,
        })
    }

    fn check_classes(&self, names: &[String]) -> Result<()> {
        if self.class_names != names {
            return Err(Error::ClassMismatch(
                "the encoder archive was trained on a different class list".into(),
            ));
        }
        Ok(())
    }
}

fn meta_value<T: serde::de::DeserializeOwned>(a: &Archive, key: &str) -> Result<T> {
    let v = a
        .meta
        .get(key)
        .ok_or_else(|| Error::Archive(format!("missing meta key `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Archive(format!("meta key `{key}`: {e}")))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

/// Contrastive pre-training of the toy encoders on freshly rendered pairs.
pub fn pretrain_clip(cfg: &RunConfig, force: bool) -> Result<ClipReport> {
    cfg.validate()?;
    let ds = Dataset::open(&require(&cfg.paths.data, "dataset")?)?;
    let out = out_dir(cfg)?;
    prepare_out(&out, force, cfg)?;
    let rng = RngState::new(cfg.seed);
    let pairs = pairs_of(gen_corpus(
        &ds.classes,
        &ds.config,
        cfg.clip.pairs,
        &rng,
        CLIP_PAIRS_TAG,
    ));
    let heldout = pairs_of(gen_corpus(
        &ds.classes,
        &ds.config,
        cfg.clip.heldout_pairs,
        &rng,
        CLIP_HELDOUT_TAG,
    ));
    let (_, store, report) = pretrain_toy_clip(
        &pairs,
        &heldout,
        &ds.vocab,
        &cfg.encoder,
        &cfg.clip,
        cfg.seed,
    )?;
    Archive::new(store)
        .with_meta("kind", "clip")
        .with_meta("seed", cfg.seed)
        .with_meta("encoder", to_value(&cfg.encoder))
        .with_meta("vocab", ds.vocab.to_file_contents())
        .with_meta("classes", to_value(&ds.names))
        .save(&out.join(CLIP_FILE))?;
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Held-out retrieval before and after Stage I.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub steps: usize,
    pub loss_toggles: String,
    /// Image→text R@1 on held-out pairs with the untrained learner; absent when resuming.
    pub initial_heldout_r1: Option<f64>,
    pub heldout_r1: f64,
}

fn open_log(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn log_line<T: Serialize>(f: &mut fs::File, path: &Path, rec: &T) -> Result<()> {
    writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(path, e))
}

/// Stage-I pre-training of the learner; resumes when `paths.resume` is set.
pub fn pretrain(cfg: &RunConfig, force: bool) -> Result<Stage1Report> {
    cfg.validate()?;
    let ds = Dataset::open(&require(&cfg.paths.data, "dataset")?)?;
    let clip = FrozenClip::load(&require(&cfg.paths.clip, "encoder archive")?)?;
    clip.check_classes(&ds.names)?;
    let out = out_dir(cfg)?;
    prepare_out(&out, force, cfg)?;
    let data = PairData::encode(
        &clip.model,
        &clip.store,
        &ds.vocab,
        &ds.pairs()?,
        cfg.stage1.augment,
    )?;
    let heldout = PairData::encode(&clip.model, &clip.store, &ds.vocab, &ds.heldout()?, false)?;
    let model = Stage1Model::new(&cfg.foodlearner, clip.vocab.len(), clip.config.d_visual);
    let (mut trainer, initial) = match &cfg.paths.resume {
        Some(p) => {
            let archive = Archive::load(p)?;
            (
                Stage1Trainer::resume(model, &archive, cfg.stage1.clone())?,
                None,
            )
        }
        None => {
            let mut store = ParamStore::new();
            model.init(&mut store, &mut RngState::new(cfg.seed));
            if cfg.stage1.init_text_from_encoder {
                let word = clip.store.get("clip.text.tok")?;
                let pos = clip.store.get("clip.text.pos")?;
                model.fl.init_text_from(&mut store, word, pos);
            }
            let r1 = model.retrieval_r1(&store, &heldout)?;
            (
                Stage1Trainer::new(model, store, cfg.stage1.clone(), cfg.seed),
                Some(r1),
            )
        }
    };
    let log_path = out.join(LOSS_LOG);
    let mut log = open_log(&log_path)?;
    trainer.run(&data, |r| log_line(&mut log, &log_path, r))?;
    let report = Stage1Report {
        steps: trainer.step,
        loss_toggles: cfg.stage1.loss_toggles.to_string(),
        initial_heldout_r1: initial,
        heldout_r1: trainer.model.retrieval_r1(&trainer.store, &heldout)?,
    };
    trainer
        .checkpoint()
        .with_meta("classes", to_value(&ds.names))
        .save(&out.join(STAGE1_FILE))?;
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Summary {
    pub steps: usize,
    pub static_text: bool,
    pub from_stage1: bool,
    pub final_loss: Option<f64>,
    /// Training-target pixels that belong to novel classes; always zero.
    pub novel_target_pixels: usize,
}

/// Static embeddings of every class, and of the base classes only.
fn class_embeddings(
    clip: &FrozenClip,
    names: &[String],
    split: &ClassSplit,
    templates: &[String],
) -> Result<(Tensor, Tensor)> {
    let all = static_text_embeddings(&clip.model, &clip.store, &clip.vocab, names, templates)?;
    let rows: Vec<Vec<f64>> = split.base.iter().map(|&c| all.row(c).to_vec()).collect();
    Ok((all.clone(), Tensor::from_rows(&rows)?))
}

/// Stage-II segmentation training on the base classes.
pub fn train_seg(cfg: &RunConfig, force: bool) -> Result<Stage2Summary> {
    cfg.validate()?;
    let ds = Dataset::open(&require(&cfg.paths.data, "dataset")?)?;
    let clip = FrozenClip::load(&require(&cfg.paths.clip, "encoder archive")?)?;
    clip.check_classes(&ds.names)?;
    let stage1 = if cfg.no_stage1 {
        None
    } else {
        let a = Archive::load(&require(&cfg.paths.stage1, "Stage-I archive")?)?;
        if meta_value::<Vec<String>>(&a, "classes")? != ds.names {
            return Err(Error::ClassMismatch(
                "the Stage-I archive was trained on a different class list".into(),
            ));
        }
        Some(a)
    };
    let out = out_dir(cfg)?;
    prepare_out(&out, force, cfg)?;
    let data = SegData::encode(
        &clip.model,
        &clip.store,
        &ds.train()?,
        &ds.split,
        &cfg.stage2,
    )?;
    let (_, e_base) = class_embeddings(&clip, &ds.names, &ds.split, &cfg.stage2.templates)?;
    let model = Stage2Model::new(
        &clip.model,
        &cfg.foodlearner,
        clip.vocab.len(),
        cfg.stage2.clone(),
        cfg.static_text,
    );
    let mut store = clip.store.clone();
    match &stage1 {
        Some(a) => {
            let s1 = Stage1Model::new(&cfg.foodlearner, clip.vocab.len(), clip.config.d_visual);
            crate::pretrain::check_stage1_archive(&s1, a)?;
            store.absorb_prefix(&a.params, FoodLearner::PREFIX);
        }
        None => model.fl.init(&mut store, &mut RngState::new(cfg.seed)),
    }
    model.init_heads(&mut store, &mut RngState::new(cfg.seed).derive(9, 0));
    let mut trainer = Stage2Trainer::new(model, store, cfg.seed);
    let log_path = out.join(LOSS_LOG);
    let mut log = open_log(&log_path)?;
    let mut last = None;
    trainer.run(&data, &e_base, |r| {
        last = Some(r.loss);
        log_line(&mut log, &log_path, r)
    })?;
    let summary = Stage2Summary {
        steps: trainer.step,
        static_text: cfg.static_text,
        from_stage1: stage1.is_some(),
        final_loss: last,
        novel_target_pixels: data.novel_target_pixels,
    };
    trainer
        .checkpoint()
        .with_meta("config", to_value(cfg))
        .with_meta("classes", to_value(&ds.names))
        .save(&out.join(STAGE2_FILE))?;
    write_json(&out.join(REPORT_FILE), &summary)?;
    Ok(summary)
}

/// A trained segmenter ready for inference.
pub struct Segmenter {
    pub model: Stage2Model,
    pub store: ParamStore,
    /// Configuration the checkpoint was trained with.
    pub trained_with: RunConfig,
    pub class_names: Vec<String>,
    pub clip: FrozenClip,
}

impl Segmenter {
    pub fn load(checkpoint: &Path, clip: FrozenClip) -> Result<Self> {
        let a = Archive::load(checkpoint)?;
        if a.meta_str("kind")? != "stage2" {
            return Err(Error::Archive("not a Stage-II archive".into()));
        }
        let trained_with: RunConfig = meta_value(&a, "config")?;
        let class_names: Vec<String> = meta_value(&a, "classes")?;
        clip.check_classes(&class_names)?;
        let static_text = a
            .meta
            .get("static_text")
            .and_then(Value::as_bool)
            .unwrap_or(false);
        let model = Stage2Model::new(
            &clip.model,
            &trained_with.foodlearner,
            clip.vocab.len(),
            trained_with.stage2.clone(),
            static_text,
        );
        let mut store = clip.store.clone();
        store.absorb_prefix(&a.params, FoodLearner::PREFIX);
        store.absorb_prefix(&a.params, Stage2Model::PREFIX);
        Ok(Self {
            model,
            store,
            trained_with,
            class_names,
            clip,
        })
    }

    pub fn input(&self, image: &RgbImage) -> Result<SegInput> {
        SegInput::encode(
            &self.clip.model,
            &self.clip.store,
            image,
            self.model.cfg.side_patch,
        )
    }

    /// Static embeddings for an arbitrary class list.
    pub fn embeddings<S: AsRef<str>>(&self, names: &[S], templates: &[String]) -> Result<Tensor> {
        for n in names {
            if !self.clip.vocab.contains(n.as_ref()) {
                return Err(Error::invalid(format!(
                    "class name `{}` is not in the vocabulary",
                    n.as_ref()
                )));
            }
        }
        static_text_embeddings(
            &self.clip.model,
            &self.clip.store,
            &self.clip.vocab,
            names,
            templates,
        )
    }

    /// Per-pixel class indices into the list `e_static` was built from.
    pub fn segment(&self, image: &RgbImage, e_static: &Tensor) -> Result<Vec<usize>> {
        self.model
            .segment(&self.store, &self.input(image)?, e_static)
    }
}

fn load_segmenter(cfg: &RunConfig) -> Result<Segmenter> {
    let clip = FrozenClip::load(&require(&cfg.paths.clip, "encoder archive")?)?;
    Segmenter::load(&require(&cfg.paths.checkpoint, "checkpoint")?, clip)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSidecar {
    pub image: String,
    pub width: u32,
    pub height: u32,
    /// Pixel value → class name.
    pub classes: Vec<String>,
}

/// Segments one image. `classes` defaults to the checkpoint's class list and
/// may name classes never seen in training.
pub fn infer(
    cfg: &RunConfig,
    image: &Path,
    classes: Option<&[String]>,
    force: bool,
) -> Result<PredictionSidecar> {
    let seg = load_segmenter(cfg)?;
    let names: Vec<String> = classes
        .map(<[String]>::to_vec)
        .unwrap_or_else(|| seg.class_names.clone());
    if names.is_empty() || names.len() > BACKGROUND as usize {
        return Err(Error::invalid(format!(
            "{} classes do not fit a one-byte class map",
            names.len()
        )));
    }
    if !image.exists() {
        return Err(Error::MissingInput(format!(
            "image {} does not exist",
            image.display()
        )));
    }
    let img = image::open(image)?.to_rgb8();
    let out = out_dir(cfg)?;
    prepare_out(&out, force, cfg)?;
    let e_static = seg.embeddings(&names, &cfg.stage2.templates)?;
    let pred = seg.segment(&img, &e_static)?;
    let (w, h) = img.dimensions();
    let map = GrayImage::from_fn(w, h, |x, y| Luma([pred[(y * w + x) as usize] as u8]));
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("prediction");
    map.save(out.join(format!("{stem}.png")))?;
    let sidecar = PredictionSidecar {
        image: image.display().to_string(),
        width: w,
        height: h,
        classes: names,
    };
    write_json(&out.join(format!("{stem}.json")), &sidecar)?;
    Ok(sidecar)
}

/// Accumulated confusion counts of `seg` on `samples`, in sample order.
pub fn score(seg: &Segmenter, samples: &[SegSample], e_static: &Tensor) -> Result<ConfusionCounts> {
    let n = e_static.rows();
    let parts = samples
        .par_iter()
        .map(|s| {
            let pred = seg.segment(&s.image, e_static)?;
            let gt: Vec<usize> = s.mask.pixels().map(|p| p[0] as usize).collect();
            confusion_counts(&pred, &gt, n, Some(BACKGROUND as usize))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ConfusionCounts::new(n);
    for p in &parts {
        total.merge(p)?;
    }
    Ok(total)
}

/// Scores a checkpoint on the evaluation images over all classes.
pub fn eval(cfg: &RunConfig, force: bool) -> Result<MetricsReport> {
    let ds = Dataset::open(&require(&cfg.paths.data, "dataset")?)?;
    let seg = load_segmenter(cfg)?;
    if seg.class_names != ds.names {
        return Err(Error::ClassMismatch(
            "the checkpoint was trained on a different class list than the split file".into(),
        ));
    }
    let out = out_dir(cfg)?;
    prepare_out(&out, force, cfg)?;
    let e_static = seg.embeddings(&ds.names, &cfg.stage2.templates)?;
    let counts = score(&seg, &ds.eval()?, &e_static)?;
    let report = summarize(&counts, &ds.split, &ds.names, cfg.eval.include_background)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}
