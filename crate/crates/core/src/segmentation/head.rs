//! Lightweight mask head: a few learned proposal tokens attend to projected
//! patch features and are decoded into mask logits and class embeddings.
//! A small side branch embeds raw pixel patches on a finer grid so masks can
//! follow boundaries the coarse encoder grid cannot resolve.

use crate::numcore::layers::{Attention, LayerNorm, Linear, Mlp};
use crate::numcore::{concat_rows, Ctx, ParamStore, RngState, Tensor, Var};

/// Bilinear upsampling from a `grid×grid` patch map to `out×out` pixels
/// (half-pixel centers, edge clamped), as a `grid² × out²` matrix so that
/// `logits · U` upsamples every row.
pub fn upsample_matrix(grid: usize, out: usize) -> Tensor {
    let mut u = Tensor::zeros(&[grid * grid, out * out]);
    let scale = grid as f64 / out as f64;
    let taps = |i: usize| {
        let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (grid - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(grid - 1);
        (lo, hi, s - lo as f64)
    };
    let cols = out * out;
    let data = u.data_mut();
    for y in 0..out {
        let (y0, y1, wy) = taps(y);
        for x in 0..out {
            let (x0, x1, wx) = taps(x);
            let p = y * out + x;
            for (gy, fy) in [(y0, 1.0 - wy), (y1, wy)] {
                for (gx, fx) in [(x0, 1.0 - wx), (x1, wx)] {
                    data[(gy * grid + gx) * cols + p] += fy * fx;
                }
            }
        }
    }
    u
}

/// `1 − (2·Σpg + ε)/(Σp + Σg + ε)`.
pub fn dice_value(pred: &[f64], gt: &[f64], eps: f64) -> f64 {
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let total: f64 = pred.iter().sum::<f64>() + gt.iter().sum::<f64>();
    1.0 - (2.0 * inter + eps) / (total + eps)
}

/// Row-wise Dice loss between mask probabilities and binary targets: `k×n → k×1`.
pub fn dice_loss<'t>(cx: &Ctx<'t>, probs: Var<'t>, gt: &Tensor, eps: f64) -> Var<'t> {
    let g = cx.constant(gt.clone());
    let g_sum = cx.constant(
        Tensor::matrix(
            gt.rows(),
            1,
            gt.data()
                .chunks(gt.cols())
                .map(|r| r.iter().sum())
                .collect(),
        )
        .expect("shape"),
    );
    let num = (probs * g).sum_cols().scale(2.0).add_scalar(eps);
    let den = (probs.sum_cols() + g_sum).add_scalar(eps);
    num.div(den).neg().add_scalar(1.0)
}

/// Horizontal concatenation of two matrices with the same row count.
fn concat_cols<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    concat_rows(&[a.transpose(), b.transpose()]).transpose()
}

/// Class logits `N_p × (C+1)`: `τ·cos(proposal, class)` for each class,
/// followed by the no-object logit.
pub fn classify_logits<'t>(
    proposals: Var<'t>,
    fused: Var<'t>,
    no_object: Var<'t>,
    tau: f64,
) -> Var<'t> {
    let cos = proposals.l2_normalize().matmul_t(fused.l2_normalize());
    concat_cols(cos.scale(tau), no_object)
}

/// Class probabilities, softmax over the `C+1` logits.
pub fn classify_proposals<'t>(
    proposals: Var<'t>,
    fused: Var<'t>,
    no_object: Var<'t>,
    tau: f64,
) -> Var<'t> {
    classify_logits(proposals, fused, no_object, tau).softmax()
}

#[derive(Clone, Debug)]
struct HeadBlock {
    ln_q: LayerNorm,
    cross: Attention,
    bias: String,
    ln_s: LayerNorm,
    self_attn: Attention,
    ln_m: LayerNorm,
    mlp: Mlp,
}

/// Output of one head pass for one image.
pub struct HeadOutput<'t> {
    /// Final proposal tokens, `N_p × d_s`.
    pub tokens: Var<'t>,
    /// Mask logits on the encoder's patch grid, `N_p × P`.
    pub patch_logits: Var<'t>,
    /// Mask logits on the fine side grid, `N_p × P_fine`.
    pub fine_logits: Var<'t>,
    /// Residual added to the mask-pooled class embedding, `N_p × d`.
    pub adapter: Var<'t>,
    /// `N_p × 1`.
    pub no_object: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct MaskHead {
    pub n_proposals: usize,
    pub n_patches: usize,
    pub dim: usize,
    pix_ln: LayerNorm,
    pix_proj: Linear,
    side_proj: Linear,
    side_ln: LayerNorm,
    /// Coarse-to-fine bilinear map, `P × P_fine`.
    coarse_to_fine: Tensor,
    proposals: String,
    blocks: Vec<HeadBlock>,
    ln_out: LayerNorm,
    mask_embed: Linear,
    adapter: Linear,
    no_object: Linear,
}

impl MaskHead {
    /// `grid` is the encoder's patch grid side; the side branch reads
    /// `side_patch`-pixel patches of a `image_size` square image.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        n_proposals: usize,
        grid: usize,
        image_size: usize,
        side_patch: usize,
        d_visual: usize,
        dim: usize,
        d_embed: usize,
        layers: usize,
        heads: usize,
    ) -> Self {
        let n_patches = grid * grid;
        Self {
            n_proposals,
            n_patches,
            dim,
            pix_ln: LayerNorm::new(&format!("{name}.pix_ln"), d_visual),
            pix_proj: Linear::new(&format!("{name}.pix_proj"), d_visual, dim, true),
            side_proj: Linear::new(
                &format!("{name}.side_proj"),
                3 * side_patch * side_patch,
                dim,
                true,
            ),
            side_ln: LayerNorm::new(&format!("{name}.side_ln"), dim),
            coarse_to_fine: upsample_matrix(grid, image_size / side_patch),
            proposals: format!("{name}.proposals"),
            blocks: (0..layers)
                .map(|i| {
                    let b = format!("{name}.block{i}");
                    HeadBlock {
                        ln_q: LayerNorm::new(&format!("{b}.ln_q"), dim),
                        cross: Attention::new(&format!("{b}.cross"), dim, dim, heads),
                        bias: format!("{b}.attn_bias"),
                        ln_s: LayerNorm::new(&format!("{b}.ln_s"), dim),
                        self_attn: Attention::new(&format!("{b}.self"), dim, dim, heads),
                        ln_m: LayerNorm::new(&format!("{b}.ln_m"), dim),
                        mlp: Mlp::new(&format!("{b}.mlp"), dim, 2 * dim),
                    }
                })
                .collect(),
            ln_out: LayerNorm::new(&format!("{name}.ln_out"), dim),
            mask_embed: Linear::new(&format!("{name}.mask_embed"), dim, dim, true),
            adapter: Linear::new(&format!("{name}.adapter"), dim, d_embed, true),
            no_object: Linear::new(&format!("{name}.no_object"), dim, 1, true),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        self.pix_ln.init(store);
        self.pix_proj.init(store, rng);
        self.side_proj.init(store, rng);
        self.side_ln.init(store);
        store.insert(
            &self.proposals,
            rng.normal_tensor(&[self.n_proposals, self.dim], 1.0),
        );
        for b in &self.blocks {
            b.ln_q.init(store);
            b.cross.init(store, rng);
            store.insert(&b.bias, Tensor::zeros(&[self.n_proposals, self.n_patches]));
            b.ln_s.init(store);
            b.self_attn.init(store, rng);
            b.ln_m.init(store);
            b.mlp.init(store, rng);
        }
        self.ln_out.init(store);
        self.mask_embed.init(store, rng);
        self.adapter.init_std(store, rng, 0.0);
        self.no_object.init_std(store, rng, 0.0);
    }

    /// Side of the fine mask grid.
    pub fn fine_grid(&self) -> usize {
        (self.coarse_to_fine.cols() as f64).sqrt().round() as usize
    }

    /// Runs the proposal tokens `x0` (`N_p × d_s`) against one image's patch
    /// tokens (`P × d_visual`) and raw side patches (`P_fine × 3s²`).
    pub fn forward_tokens<'t>(
        &self,
        cx: &Ctx<'t>,
        visual: Var<'t>,
        pixels: Var<'t>,
        x0: Var<'t>,
    ) -> HeadOutput<'t> {
        let pix = self.pix_proj.forward(cx, self.pix_ln.forward(cx, visual));
        let mut x = x0;
        for b in &self.blocks {
            let h = b.ln_q.forward(cx, x);
            x = x + b.cross.forward(cx, h, pix, None, Some(cx.p(&b.bias)));
            let h = b.ln_s.forward(cx, x);
            x = x + b.self_attn.forward(cx, h, h, None, None);
            x = x + b.mlp.forward(cx, b.ln_m.forward(cx, x));
        }
        let x = self.ln_out.forward(cx, x);
        let scale = 1.0 / (self.dim as f64).sqrt();
        let fine = pix
            .transpose()
            .matmul(cx.constant(self.coarse_to_fine.clone()))
            .transpose()
            + self.side_ln.forward(cx, self.side_proj.forward(cx, pixels));
        let e = self.mask_embed.forward(cx, x);
        HeadOutput {
            tokens: x,
            patch_logits: e.matmul_t(pix).scale(scale),
            fine_logits: e.matmul_t(fine).scale(scale),
            adapter: self.adapter.forward(cx, x),
            no_object: self.no_object.forward(cx, x),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, visual: Var<'t>, pixels: Var<'t>) -> HeadOutput<'t> {
        self.forward_tokens(cx, visual, pixels, cx.p(&self.proposals))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{check_params, Tape};

    #[test]
    fn upsample_preserves_constants_and_rows_sum_to_one() {
        let u = upsample_matrix(4, 16);
        for p in 0..256 {
            let s: f64 = (0..16).map(|g| u.at(g, p)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // identity when sizes agree
        assert!(upsample_matrix(3, 3).bit_eq(&Tensor::identity(9)));
    }

    #[test]
    fn dice_cases() {
        assert_eq!(dice_value(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], 0.0), 0.0);
        // {a,b} vs {b,c}
        assert_eq!(dice_value(&[1.0, 1.0, 0.0], &[0.0, 1.0, 1.0], 0.0), 0.5);
        assert_eq!(dice_value(&[0.0; 4], &[0.0; 4], 1.0), 0.0);

        let tape = Tape::new();
        let store = ParamStore::new();
        let cx = Ctx::new(&tape, &store);
        let p =
            cx.constant(Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.2, 0.7, 0.4]]).unwrap());
        let g = Tensor::from_rows(&[vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0]]).unwrap();
        let d = dice_loss(&cx, p, &g, 1.0).to_tensor();
        assert!((d.at(0, 0) - dice_value(&[1.0, 1.0, 0.0], &[0.0, 1.0, 1.0], 1.0)).abs() < 1e-15);
        assert!((d.at(1, 0) - dice_value(&[0.2, 0.7, 0.4], &[1.0, 0.0, 1.0], 1.0)).abs() < 1e-15);
    }

    #[test]
    fn collinear_proposal_wins() {
        let tape = Tape::new();
        let prop = tape.constant(Tensor::row_vector(vec![2.0, 0.0, 0.0]));
        let fused = tape.constant(Tensor::identity(3));
        let no = tape.constant(Tensor::zeros(&[1, 1]));
        let p = classify_proposals(prop, fused, no, 100.0).to_tensor();
        assert!(p.at(0, 0) > 0.999);
        assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let same = tape.constant(Tensor::full(&[3, 3], 0.5));
        let p = classify_proposals(prop, same, no, 100.0).to_tensor();
        assert!((p.at(0, 0) - p.at(0, 1)).abs() < 1e-15 && (p.at(0, 1) - p.at(0, 2)).abs() < 1e-15);
    }

    fn head() -> (MaskHead, ParamStore) {
        let h = MaskHead::new("h", 3, 2, 8, 2, 6, 8, 5, 2, 2);
        let mut store = ParamStore::new();
        h.init(&mut store, &mut RngState::new(3));
        // make the zero-initialized parts non-trivial for the checks below
        let mut rng = RngState::new(4);
        for name in [
            "h.adapter.w",
            "h.no_object.w",
            "h.block0.attn_bias",
            "h.block1.attn_bias",
        ] {
            let shape = store.get(name).unwrap().shape().to_vec();
            store.insert(name, rng.normal_tensor(&shape, 0.3));
        }
        (h, store)
    }

    #[test]
    fn identical_tokens_give_identical_masks() {
        let (h, mut store) = head();
        // learned biases differ per proposal row, so zero them for this check
        store.insert("h.block0.attn_bias", Tensor::zeros(&[3, 4]));
        store.insert("h.block1.attn_bias", Tensor::zeros(&[3, 4]));
        let tape = Tape::new();
        let cx = Ctx::inference(&tape, &store);
        let vis = cx.constant(RngState::new(5).normal_tensor(&[4, 6], 1.0));
        let row = RngState::new(6).normal_tensor(&[1, 8], 1.0).into_data();
        let x0 = cx.constant(Tensor::from_rows(&[row.clone(), row, vec![0.1; 8]]).unwrap());
        let pixels = cx.constant(RngState::new(8).normal_tensor(&[16, 12], 1.0));
        let out = h.forward_tokens(&cx, vis, pixels, x0);
        for m in [out.patch_logits.to_tensor(), out.fine_logits.to_tensor()] {
            assert_eq!(m.row(0), m.row(1));
            assert_ne!(m.row(0), m.row(2));
        }
    }

    #[test]
    fn head_gradients() {
        let (h, store) = head();
        let vis = RngState::new(7).normal_tensor(&[4, 6], 1.0);
        let pixels = RngState::new(8).normal_tensor(&[16, 12], 1.0);
        let up = upsample_matrix(4, 4);
        let gt = Tensor::matrix(
            3,
            16,
            (0..48).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect(),
        )
        .unwrap();
        let names: Vec<String> = store.names().cloned().collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let report = check_params(
            &store,
            &names,
            |cx| {
                let out = h.forward(cx, cx.constant(vis.clone()), cx.constant(pixels.clone()));
                let masks = out.fine_logits.matmul(cx.constant(up.clone())).sigmoid();
                let d = dice_loss(cx, masks, &gt, 1.0).mean();
                Ok(d + out.adapter.mean()
                    + out.no_object.sum().scale(0.1)
                    + out.patch_logits.softmax().mean())
            },
            1e-6,
            1e-4,
            6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.0f64..=1.0, n)
        }

        fn classify(seed: u64, prop_scale: f64, class_scale: f64) -> Tensor {
            let mut rng = RngState::new(seed);
            let tape = Tape::new();
            let prop = tape.constant(rng.normal_tensor(&[4, 5], 1.0).map(|v| v * prop_scale));
            let fused = tape.constant(rng.normal_tensor(&[3, 5], 1.0).map(|v| v * class_scale));
            let no = tape.constant(rng.normal_tensor(&[4, 1], 1.0));
            classify_proposals(prop, fused, no, 10.0).to_tensor()
        }

        proptest! {
            #[test]
            fn dice_is_symmetric_and_bounded(p in probs(12), g in probs(12), eps in 0.0f64..2.0) {
                let a = dice_value(&p, &g, eps);
                prop_assert!((a - dice_value(&g, &p, eps)).abs() < 1e-12);
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&a));
            }

            #[test]
            fn class_rows_sum_to_one_and_ignore_vector_scale(
                seed in 0u64..1000,
                s1 in 0.01f64..100.0,
                s2 in 0.01f64..100.0,
            ) {
                let p = classify(seed, 1.0, 1.0);
                let q = classify(seed, s1, s2);
                for r in 0..p.rows() {
                    prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(p.row(r).iter().all(|&v| v >= 0.0));
                }
                for (a, b) in p.data().iter().zip(q.data()) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }
}
