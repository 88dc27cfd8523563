//! Query-token transformer that reads frozen patch features through
//! cross-attention and shares its self-attention stack with a small text
//! embedding, so one parameter set serves image, text and joint sequences.

use serde::{Deserialize, Serialize};

use crate::encoders::{VisualEmbedding, EOS};
use crate::error::{Error, Result};
use crate::numcore::layers::{Attention, LayerNorm, Linear, Mlp};
use crate::numcore::{concat_rows, Ctx, ParamStore, RngState, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoodLearnerConfig {
    pub q_tokens: usize,
    pub d_q: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_text_len: usize,
    pub query_init_std: f64,
}

impl Default for FoodLearnerConfig {
    fn default() -> Self {
        Self {
            q_tokens: 8,
            d_q: 64,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            max_text_len: 16,
            query_init_std: 0.02,
        }
    }
}

/// Which positions may attend to which.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionRegime {
    /// Queries and text never see each other; each part is bidirectional.
    Unimodal,
    /// Every position sees every position.
    BidirectionalMultimodal,
    /// Queries see only queries; text sees all queries and earlier text.
    CausalMultimodal,
}

impl AttentionRegime {
    /// Row-major `n×n` mask for `n_query` query positions followed by `n_text` text positions.
    pub fn mask(self, n_query: usize, n_text: usize) -> Result<Vec<bool>> {
        let n = n_query + n_text;
        if n == 0 {
            return Err(Error::invalid("empty token sequence"));
        }
        if self != AttentionRegime::Unimodal && (n_query == 0 || n_text == 0) {
            return Err(Error::invalid(format!(
                "{self:?} needs both query and text tokens, got {n_query} + {n_text}"
            )));
        }
        let mut m = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let (qi, qj) = (i < n_query, j < n_query);
                m[i * n + j] = match self {
                    AttentionRegime::Unimodal => qi == qj,
                    AttentionRegime::BidirectionalMultimodal => true,
                    AttentionRegime::CausalMultimodal => {
                        if qi {
                            qj
                        } else {
                            qj || j <= i
                        }
                    }
                };
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnrichedKind {
    EnrichedQuery,
    EnrichedText,
    MultimodalQuery,
    MultimodalText,
}

/// Output tokens of one pass, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct EnrichedTokens {
    pub value: Tensor,
    pub kind: EnrichedKind,
}

/// Joins query rows and text rows; returns the sequence and the boundary index.
pub fn concat_query_text<'t>(queries: Var<'t>, text: Var<'t>) -> Result<(Var<'t>, usize)> {
    if queries.cols() != text.cols() {
        return Err(Error::Shape {
            op: "concat_query_text",
            lhs: queries.shape().to_vec(),
            rhs: text.shape().to_vec(),
        });
    }
    Ok((concat_rows(&[queries, text]), queries.rows()))
}

#[derive(Clone, Debug)]
struct FlBlock {
    ln1: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct FoodLearner {
    pub cfg: FoodLearnerConfig,
    pub vocab_size: usize,
    pub d_visual: usize,
    query: String,
    word: String,
    pos: String,
    emb_ln: LayerNorm,
    vis_proj: Linear,
    blocks: Vec<FlBlock>,
    ln_final: LayerNorm,
}

impl FoodLearner {
    pub const PREFIX: &'static str = "foodlearner.";

    pub fn new(cfg: &FoodLearnerConfig, vocab_size: usize, d_visual: usize) -> Self {
        let p = "foodlearner";
        let d = cfg.d_q;
        let blocks = (0..cfg.layers)
            .map(|i| {
                let b = format!("{p}.block{i}");
                FlBlock {
                    ln1: LayerNorm::new(&format!("{b}.ln1"), d),
                    self_attn: Attention::new(&format!("{b}.self_attn"), d, d, cfg.heads),
                    ln_cross: LayerNorm::new(&format!("{b}.ln_cross"), d),
                    cross_attn: Attention::new(&format!("{b}.cross_attn"), d, d, cfg.heads),
                    ln2: LayerNorm::new(&format!("{b}.ln2"), d),
                    mlp: Mlp::new(&format!("{b}.mlp"), d, d * cfg.mlp_ratio),
                }
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            vocab_size,
            d_visual,
            query: format!("{p}.query"),
            word: format!("{p}.word"),
            pos: format!("{p}.pos"),
            emb_ln: LayerNorm::new(&format!("{p}.emb_ln"), d),
            vis_proj: Linear::new(&format!("{p}.vis_proj"), d_visual, d, true),
            blocks,
            ln_final: LayerNorm::new(&format!("{p}.ln_final"), d),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        let d = self.cfg.d_q;
        store.insert(
            &self.query,
            rng.normal_tensor(&[self.cfg.q_tokens, d], self.cfg.query_init_std),
        );
        store.insert(&self.word, rng.normal_tensor(&[self.vocab_size, d], 0.5));
        store.insert(
            &self.pos,
            rng.normal_tensor(&[self.cfg.max_text_len, d], 0.1),
        );
        self.emb_ln.init(store);
        self.vis_proj.init(store, rng);
        for b in &self.blocks {
            b.ln1.init(store);
            b.self_attn.init(store, rng);
            b.ln_cross.init(store);
            b.cross_attn.init(store, rng);
            b.ln2.init(store);
            b.mlp.init(store, rng);
        }
        self.ln_final.init(store);
    }

    /// Copies word and position tables from a text encoder with the same
    /// vocabulary and width. Returns whether anything was copied.
    pub fn init_text_from(&self, store: &mut ParamStore, word: &Tensor, pos: &Tensor) -> bool {
        let d = self.cfg.d_q;
        if word.shape() != [self.vocab_size, d]
            || pos.cols() != d
            || pos.rows() < self.cfg.max_text_len
        {
            return false;
        }
        let pos = Tensor::matrix(
            self.cfg.max_text_len,
            d,
            pos.data()[..self.cfg.max_text_len * d].to_vec(),
        )
        .expect("sliced rows");
        store.insert(&self.word, word.clone());
        store.insert(&self.pos, pos);
        true
    }

    /// Zeroes every cross-attention output projection.
    pub fn zero_cross_attention(&self, store: &mut ParamStore) {
        for b in &self.blocks {
            b.cross_attn.zero_output(store);
        }
    }

    pub fn query_tokens<'t>(&self, cx: &Ctx<'t>) -> Var<'t> {
        cx.p(&self.query)
    }

    /// Word plus position embedding of one unpadded sequence.
    pub fn embed_text<'t>(&self, cx: &Ctx<'t>, ids: &[u32]) -> Result<Var<'t>> {
        let n = ids.len();
        if n == 0 || n > self.cfg.max_text_len {
            return Err(Error::invalid(format!(
                "text length {n} outside 1..={}",
                self.cfg.max_text_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            return Err(Error::OutOfRange {
                what: "vocabulary",
                index: bad as usize,
                len: self.vocab_size,
            });
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let pos: Vec<usize> = (0..n).collect();
        let x = cx.p(&self.word).gather_rows(&idx) + cx.p(&self.pos).gather_rows(&pos);
        Ok(self.emb_ln.forward(cx, x))
    }

    /// Runs the stack over `[prefix; text]`. Cross-attention to `visual`
    /// (raw `P×d_visual` patch tokens) touches only the prefix rows and is
    /// skipped entirely when `visual` is `None`.
    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t>,
        visual: Option<Var<'t>>,
        prefix: Option<Var<'t>>,
        text: &[u32],
        regime: AttentionRegime,
    ) -> Result<Var<'t>> {
        let n_query = prefix.map_or(0, |p| p.rows());
        let n_text = text.len();
        let mask = regime.mask(n_query, n_text)?;
        if let Some(p) = prefix {
            if p.cols() != self.cfg.d_q {
                return Err(Error::Shape {
                    op: "foodlearner prefix",
                    lhs: p.shape().to_vec(),
                    rhs: vec![n_query, self.cfg.d_q],
                });
            }
        }
        let mut x = match (prefix, n_text) {
            (Some(p), 0) => p,
            (Some(p), _) => concat_query_text(p, self.embed_text(cx, text)?)?.0,
            (None, _) => self.embed_text(cx, text)?,
        };
        let keys = match visual {
            Some(v) if n_query > 0 => {
                if v.cols() != self.d_visual {
                    return Err(Error::Shape {
                        op: "foodlearner visual",
                        lhs: v.shape().to_vec(),
                        rhs: vec![v.rows(), self.d_visual],
                    });
                }
                Some(self.vis_proj.forward(cx, v))
            }
            _ => None,
        };
        for b in &self.blocks {
            let h = b.ln1.forward(cx, x);
            x = x + b.self_attn.forward(cx, h, h, Some(&mask), None);
            if let Some(k) = keys {
                let q = x.slice_rows(0, n_query);
                let q = q + b
                    .cross_attn
                    .forward(cx, b.ln_cross.forward(cx, q), k, None, None);
                x = if n_text > 0 {
                    concat_rows(&[q, x.slice_rows(n_query, n_text)])
                } else {
                    q
                };
            }
            x = x + b.mlp.forward(cx, b.ln2.forward(cx, x));
        }
        Ok(self.ln_final.forward(cx, x))
    }

    /// Enriched query tokens `FL(visual, T_query)`: `Q×d_q`.
    pub fn enrich_queries<'t>(&self, cx: &Ctx<'t>, visual: Option<Var<'t>>) -> Result<Var<'t>> {
        self.forward(
            cx,
            visual,
            Some(self.query_tokens(cx)),
            &[],
            AttentionRegime::Unimodal,
        )
    }

    /// Enriched text tokens `FL(NULL, T_text)` and the row of the last EOS.
    pub fn enrich_text<'t>(&self, cx: &Ctx<'t>, ids: &[u32]) -> Result<(Var<'t>, usize)> {
        let out = self.forward(cx, None, None, ids, AttentionRegime::Unimodal)?;
        let eos = ids.iter().rposition(|&i| i == EOS).unwrap_or(ids.len() - 1);
        Ok((out, eos))
    }

    /// Gradient-free pass against stored parameters. `prefix` of `None`
    /// with `query = true` uses the learned query tokens.
    pub fn fl_encode(
        &self,
        store: &ParamStore,
        visual: Option<&VisualEmbedding>,
        query: bool,
        text: &[u32],
        regime: AttentionRegime,
    ) -> Result<EnrichedTokens> {
        let tape = Tape::new();
        let cx = Ctx::inference(&tape, store);
        let vis = visual.map(|v| cx.constant(v.tokens.clone()));
        let prefix = query.then(|| self.query_tokens(&cx));
        let out = self.forward(&cx, vis, prefix, text, regime)?;
        tape.check_finite()?;
        let kind = match (query, text.is_empty()) {
            (true, true) => EnrichedKind::EnrichedQuery,
            (false, _) => EnrichedKind::EnrichedText,
            (true, false) if regime == AttentionRegime::CausalMultimodal => {
                EnrichedKind::MultimodalText
            }
            (true, false) => EnrichedKind::MultimodalQuery,
        };
        Ok(EnrichedTokens {
            value: out.to_tensor(),
            kind,
        })
    }
}
