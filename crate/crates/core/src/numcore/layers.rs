//! Small neural building blocks. Each layer only records parameter names;
//! values live in a [`ParamStore`] and are bound per pass through a [`Ctx`].

use super::params::{init_const, init_normal, Ctx, ParamStore};
use super::rng::RngState;
use super::tape::{sum_all, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: Option<String>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            w: format!("{name}.w"),
            b: bias.then(|| format!("{name}.b")),
            d_in,
            d_out,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        self.init_std(store, rng, 1.0 / (self.d_in as f64).sqrt());
    }

    pub fn init_std(&self, store: &mut ParamStore, rng: &mut RngState, std: f64) {
        if std == 0.0 {
            init_const(store, &self.w, &[self.d_in, self.d_out], 0.0);
        } else {
            init_normal(store, rng, &self.w, &[self.d_in, self.d_out], std);
        }
        if let Some(b) = &self.b {
            init_const(store, b, &[1, self.d_out], 0.0);
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(cx.p(&self.w));
        match &self.b {
            Some(b) => y.add_row(cx.p(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gain: format!("{name}.g"),
            bias: format!("{name}.b"),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        init_const(store, &self.gain, &[1, self.dim], 1.0);
        init_const(store, &self.bias, &[1, self.dim], 0.0);
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        x.layer_norm(LN_EPS)
            .mul_row(cx.p(&self.gain))
            .add_row(cx.p(&self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(&format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, dim, true),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        self.fc2.forward(cx, self.fc1.forward(cx, x).gelu())
    }
}

#[derive(Clone, Debug)]
struct Head {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

/// Multi-head scaled dot-product attention. Heads are summed after their
/// own output projections, which equals concatenation followed by one projection.
#[derive(Clone, Debug)]
pub struct Attention {
    heads: Vec<Head>,
    out_bias: String,
    pub d_model: usize,
    pub d_kv: usize,
    pub d_head: usize,
}

impl Attention {
    pub fn new(name: &str, d_model: usize, d_kv: usize, n_heads: usize) -> Self {
        assert!(
            n_heads > 0 && d_model.is_multiple_of(n_heads),
            "heads must divide d_model"
        );
        let d_head = d_model / n_heads;
        let heads = (0..n_heads)
            .map(|h| Head {
                q: Linear::new(&format!("{name}.h{h}.q"), d_model, d_head, false),
                k: Linear::new(&format!("{name}.h{h}.k"), d_kv, d_head, false),
                v: Linear::new(&format!("{name}.h{h}.v"), d_kv, d_head, false),
                o: Linear::new(&format!("{name}.h{h}.o"), d_head, d_model, false),
            })
            .collect();
        Self {
            heads,
            out_bias: format!("{name}.o.b"),
            d_model,
            d_kv,
            d_head,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        for h in &self.heads {
            h.q.init(store, rng);
            h.k.init(store, rng);
            h.v.init(store, rng);
            h.o.init(store, rng);
        }
        init_const(store, &self.out_bias, &[1, self.d_model], 0.0);
    }

    /// Sets the output projection to zero so the layer contributes nothing.
    pub fn zero_output(&self, store: &mut ParamStore) {
        for h in &self.heads {
            for v in store.get_mut(&h.o.w).expect("initialized").data_mut() {
                *v = 0.0;
            }
        }
        for v in store
            .get_mut(&self.out_bias)
            .expect("initialized")
            .data_mut()
        {
            *v = 0.0;
        }
    }

    /// Names of the output-projection parameters.
    pub fn output_param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.heads.iter().map(|h| h.o.w.clone()).collect();
        v.push(self.out_bias.clone());
        v
    }

    /// `queries: n×d_model`, `keys: m×d_kv`; `allowed` is an `n×m` row-major mask,
    /// `bias` an additive `n×m` logit term.
    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t>,
        queries: Var<'t>,
        keys: Var<'t>,
        allowed: Option<&[bool]>,
        bias: Option<Var<'t>>,
    ) -> Var<'t> {
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let outs: Vec<Var<'t>> = self
            .heads
            .iter()
            .map(|h| {
                let q = h.q.forward(cx, queries);
                let k = h.k.forward(cx, keys);
                let v = h.v.forward(cx, keys);
                let mut logits = q.matmul_t(k).scale(scale);
                if let Some(b) = bias {
                    logits = logits + b;
                }
                let attn = logits.masked_softmax(allowed);
                h.o.forward(cx, attn.matmul(v))
            })
            .collect();
        sum_all(&outs).add_row(cx.p(&self.out_bias))
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(name: &str, dim: usize, n_heads: usize, mlp_hidden: usize) -> Self {
        Self {
            ln1: LayerNorm::new(&format!("{name}.ln1"), dim),
            attn: Attention::new(&format!("{name}.attn"), dim, dim, n_heads),
            ln2: LayerNorm::new(&format!("{name}.ln2"), dim),
            mlp: Mlp::new(&format!("{name}.mlp"), dim, mlp_hidden),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngState) {
        self.ln1.init(store);
        self.attn.init(store, rng);
        self.ln2.init(store);
        self.mlp.init(store, rng);
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>, allowed: Option<&[bool]>) -> Var<'t> {
        let h = self.ln1.forward(cx, x);
        let x = x + self.attn.forward(cx, h, h, allowed, None);
        x + self.mlp.forward(cx, self.ln2.forward(cx, x))
    }
}

/// Lower-triangular `n×n` mask (position i sees positions ≤ i).
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{check_params, Tape};

    #[test]
    fn causal_mask_shape() {
        let m = causal_mask(3);
        assert_eq!(
            m,
            vec![true, false, false, true, true, false, true, true, true]
        );
    }

    #[test]
    fn block_gradients() {
        let mut rng = RngState::new(5);
        let mut store = ParamStore::new();
        let block = Block::new("blk", 8, 2, 16);
        block.init(&mut store, &mut rng);
        let x = rng.normal_tensor(&[5, 8], 1.0);
        let target = rng.normal_tensor(&[5, 8], 1.0);
        let mask = causal_mask(5);
        let names: Vec<String> = store.names().cloned().collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let r = check_params(
            &store,
            &names,
            |cx| {
                let xv = cx.constant(x.clone());
                let y = block.forward(cx, xv, Some(&mask));
                Ok((y * cx.constant(target.clone())).sum())
            },
            1e-6,
            1e-4,
            6,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn zeroed_attention_output_adds_exact_zeros() {
        let mut rng = RngState::new(2);
        let mut store = ParamStore::new();
        let attn = Attention::new("a", 4, 6, 2);
        attn.init(&mut store, &mut rng);
        attn.zero_output(&mut store);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let q = cx.constant(rng.normal_tensor(&[3, 4], 1.0));
        let k = cx.constant(rng.normal_tensor(&[5, 6], 1.0));
        let y = attn.forward(&cx, q, k, None, None);
        let out = q + y;
        assert!(out.to_tensor().bit_eq(&q.to_tensor()));
    }
}
