//! Stage-II training behaviour on a small random-encoder setup.

use ovfs_core::datagen::{class_names, gen_corpus, make_classes, split_classes, DataConfig};
use ovfs_core::encoders::{ClipModel, EncoderConfig, Vocab};
use ovfs_core::foodlearner::FoodLearnerConfig;
use ovfs_core::numcore::{ParamStore, RngState, Tensor};
use ovfs_core::segmentation::{
    static_text_embeddings, vote, SegData, SegInput, Stage2Config, Stage2Model, Stage2Trainer,
};

const N_CLASSES: usize = 5;

struct Setup {
    clip: ClipModel,
    clip_store: ParamStore,
    data: SegData,
    e_static: Tensor,
    trainer: Stage2Trainer,
}

fn setup(seed: u64, steps: usize) -> Setup {
    let enc = EncoderConfig {
        image_size: 32,
        patch: 8,
        d_visual: 8,
        d_text: 8,
        layers: 1,
        heads: 2,
        mlp_ratio: 2,
        max_text_len: 8,
    };
    let names = class_names(N_CLASSES);
    let vocab = Vocab::for_classes(&names);
    let clip = ClipModel::new(&enc, vocab.len());
    let mut rng = RngState::new(seed);
    let mut clip_store = ParamStore::new();
    clip.init(&mut clip_store, &mut rng);
    clip_store.freeze_prefix(ClipModel::PREFIX);

    let data_cfg = DataConfig {
        n_classes: N_CLASSES,
        image_size: 32,
        min_blobs: 1,
        max_blobs: 2,
        ..Default::default()
    };
    let classes = make_classes(&names, data_cfg.modes_per_class, &mut RngState::new(0));
    let split = split_classes(N_CLASSES, 0.2, seed).unwrap();
    let samples = gen_corpus(&classes, &data_cfg, 32, &RngState::new(seed), 7);
    let cfg = Stage2Config {
        n_proposals: 4,
        head_dim: 8,
        head_layers: 1,
        head_heads: 2,
        side_patch: 4,
        mask_size: 8,
        steps,
        batch_size: 4,
        augment: false,
        ..Default::default()
    };
    let data = SegData::encode(&clip, &clip_store, &samples, &split, &cfg).unwrap();
    let base: Vec<&str> = split.base.iter().map(|&c| names[c].as_str()).collect();
    let e_static =
        static_text_embeddings(&clip, &clip_store, &vocab, &base, &cfg.templates).unwrap();

    let fl_cfg = FoodLearnerConfig {
        q_tokens: 2,
        d_q: 8,
        layers: 1,
        heads: 2,
        mlp_ratio: 2,
        max_text_len: 8,
        ..Default::default()
    };
    let model = Stage2Model::new(&clip, &fl_cfg, vocab.len(), cfg, false);
    let mut store = clip_store.clone();
    model.fl.init(&mut store, &mut rng);
    model.init_heads(&mut store, &mut rng);
    Setup {
        clip,
        clip_store,
        data,
        e_static,
        trainer: Stage2Trainer::new(model, store, seed),
    }
}

fn window_mean(losses: &[f64]) -> f64 {
    losses.iter().sum::<f64>() / losses.len() as f64
}

#[test]
fn training_loss_decreases() {
    let mut ratios = Vec::new();
    for seed in [1, 2, 3] {
        let mut s = setup(seed, 300);
        let mut losses = Vec::new();
        s.trainer
            .run(&s.data, &s.e_static, |r| {
                losses.push(r.loss);
                Ok(())
            })
            .unwrap();
        assert_eq!(losses.len(), 300);
        assert!(losses.iter().all(|l| l.is_finite()));
        ratios.push(window_mean(&losses[270..]) / window_mean(&losses[..30]));
    }
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[1] < 0.9, "late/early loss ratios {ratios:?}");
}

#[test]
fn frozen_encoder_weights_are_bit_identical_after_training() {
    let mut s = setup(4, 20);
    s.trainer.run(&s.data, &s.e_static, |_| Ok(())).unwrap();
    let mut checked = 0;
    for n in s.clip_store.names() {
        assert!(
            s.clip_store
                .get(n)
                .unwrap()
                .bit_eq(s.trainer.store.get(n).unwrap()),
            "{n} changed"
        );
        checked += 1;
    }
    assert!(checked > 0 && s.clip_store.names().any(|n| n.contains("text")));
    // Only trained parameters are written out.
    let a = s.trainer.checkpoint();
    assert_eq!(a.meta_u64("step").unwrap(), 20);
    assert!(a.params.names().all(|n| !n.starts_with(ClipModel::PREFIX)));
}

#[test]
fn vote_is_constant_when_one_class_dominates_everywhere() {
    // Three proposals, all sure of class 1, masks covering every pixel.
    let probs = Tensor::from_rows(&[
        vec![0.1, 0.8, 0.1, 0.0],
        vec![0.2, 0.7, 0.1, 0.0],
        vec![0.0, 0.9, 0.1, 0.0],
    ])
    .unwrap();
    let masks = Tensor::full(&[3, 16], 3.0);
    assert_eq!(vote(&probs, &masks, 3), vec![1; 16]);
    // Masks switched off everywhere: still a single label, decided by class mass.
    let masks = Tensor::full(&[3, 16], -30.0);
    assert_eq!(vote(&probs, &masks, 3), vec![1; 16]);
}

#[test]
fn segment_labels_every_pixel_from_the_given_list() {
    let s = setup(5, 0);
    let m = &s.trainer.model;
    let img = &image::RgbImage::from_pixel(32, 32, image::Rgb([200, 60, 40]));
    let input = SegInput::encode(&s.clip, &s.clip_store, img, 4).unwrap();
    let pred = m.segment(&s.trainer.store, &input, &s.e_static).unwrap();
    assert_eq!(pred.len(), 32 * 32);
    assert!(pred.iter().all(|&c| c < s.e_static.rows()));
    // A single candidate class yields a constant map.
    let one = Tensor::matrix(1, s.e_static.cols(), s.e_static.row(0).to_vec()).unwrap();
    assert_eq!(
        m.segment(&s.trainer.store, &input, &one).unwrap(),
        vec![0; 32 * 32]
    );
}
