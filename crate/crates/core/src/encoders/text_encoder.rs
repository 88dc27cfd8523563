use super::tokenizer::{TextBatch, EOS};
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::numcore::layers::{causal_mask, Block, LayerNorm, Linear};
use crate::numcore::{Ctx, ParamStore, RngState, Tape, Tensor, Var};

/// Pooled sentence embedding (`1 × d_text`).
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub value: Tensor,
}

/// Causal transformer over word tokens, pooled at the EOS position.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: EncoderConfig,
    pub vocab_size: usize,
    tok: String,
    pos: String,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    proj: Linear,
}

impl TextEncoder {
    pub const PREFIX: &'static str = "clip.text";

    pub fn new(cfg: &EncoderConfig, vocab_size: usize) -> Self {
        let p = Self::PREFIX;
        let d = cfg.d_text;
        Self {
            cfg: cfg.clone(),
            vocab_size,
            tok: format!("{p}.tok"),
            pos: format!("{p}.pos"),
            blocks: (0..cfg.layers)
                .map(|i| Block::new(&format!("{p}.block{i}"), d, cfg.heads, d * cfg.mlp_ratio))
                .collect(),
            ln_final: LayerNorm::new(&format!("{p}.ln_final"), d),
            proj: Linear::new(&format!("{p}.proj"), d, d, false),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        let d = self.cfg.d_text;
        store.insert(&self.tok, rng.normal_tensor(&[self.vocab_size, d], 0.5));
        store.insert(
            &self.pos,
            rng.normal_tensor(&[self.cfg.max_text_len, d], 0.1),
        );
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.ln_final.init(store);
        self.proj.init(store, rng);
    }

    /// Embeds one unpadded sequence; pools at its last EOS.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, ids: &[u32]) -> Result<Var<'t>> {
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
        let mut x = cx.p(&self.tok).gather_rows(&idx) + cx.p(&self.pos).gather_rows(&pos);
        let mask = causal_mask(n);
        for b in &self.blocks {
            x = b.forward(cx, x, Some(&mask));
        }
        let x = self.ln_final.forward(cx, x);
        let eos = ids.iter().rposition(|&i| i == EOS).unwrap_or(n - 1);
        Ok(self.proj.forward(cx, x.row(eos)))
    }

    pub fn encode_one(&self, store: &ParamStore, ids: &[u32]) -> Result<TextEmbedding> {
        let tape = Tape::new();
        let cx = Ctx::inference(&tape, store);
        let v = self.forward(&cx, ids)?;
        tape.check_finite()?;
        Ok(TextEmbedding {
            value: v.to_tensor(),
        })
    }

    /// One embedding per batch item.
    pub fn encode(&self, store: &ParamStore, batch: &TextBatch) -> Result<Vec<TextEmbedding>> {
        (0..batch.len())
            .map(|i| self.encode_one(store, batch.unpadded(i)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::class_names;
    use crate::encoders::Vocab;

    #[test]
    fn deterministic_and_shaped() {
        let cfg = EncoderConfig::default();
        let vocab = Vocab::for_classes(&["egg", "rice"]);
        let enc = TextEncoder::new(&cfg, vocab.len());
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut RngState::new(9));
        let seqs = vec![
            vocab.tokenize("a photo of egg"),
            vocab.tokenize("a photo of egg"),
        ];
        let batch = TextBatch::new(&seqs, cfg.max_text_len, vocab.len()).unwrap();
        let e = enc.encode(&store, &batch).unwrap();
        assert_eq!(e[0].value.shape(), &[1, cfg.d_text]);
        assert!(e[0].value.bit_eq(&e[1].value));
    }

    #[test]
    fn hundred_class_names_do_not_collide() {
        let cfg = EncoderConfig::default();
        let names = class_names(100);
        let vocab = Vocab::for_classes(&names);
        let enc = TextEncoder::new(&cfg, vocab.len());
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut RngState::new(4));
        let embs: Vec<Tensor> = names
            .iter()
            .map(|n| enc.encode_one(&store, &vocab.tokenize(n)).unwrap().value)
            .collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                assert!(
                    embs[i].max_abs_diff(&embs[j]) > 1e-9,
                    "{} vs {}",
                    names[i],
                    names[j]
                );
            }
        }
    }
}
