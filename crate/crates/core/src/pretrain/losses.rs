use serde::{Deserialize, Serialize};

use crate::encoders::PAD;
use crate::error::{Error, Result};
use crate::numcore::layers::Linear;
use crate::numcore::{concat_rows, Ctx, RngState, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ItcConfig {
    pub phi: f64,
}

impl Default for ItcConfig {
    fn default() -> Self {
        Self { phi: 10.0 }
    }
}

/// Per-objective losses of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_itc: f64,
    pub l_itm: f64,
    pub l_lm: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn new(l_itc: f64, l_itm: f64, l_lm: f64) -> Self {
        Self {
            l_itc,
            l_itm,
            l_lm,
            total: l_itc + l_itm + l_lm,
        }
    }
}

/// `B×B` matrix (images × texts) of the best cosine over each image's query tokens.
pub fn itc_similarity<'t>(queries: &[Var<'t>], texts: Var<'t>) -> Result<Var<'t>> {
    let Some(first) = queries.first() else {
        return Err(Error::invalid("no images"));
    };
    let q = first.rows();
    if let Some(bad) = queries
        .iter()
        .find(|v| v.rows() != q || v.cols() != texts.cols())
    {
        return Err(Error::Shape {
            op: "itc_similarity",
            lhs: bad.shape().to_vec(),
            rhs: vec![q, texts.cols()],
        });
    }
    let qn = concat_rows(queries).l2_normalize();
    let tn = texts.l2_normalize();
    // (B·Q)×B_text, then max over each image's Q rows
    Ok(qn.matmul_t(tn).max_groups(q))
}

pub struct ItcOutput<'t> {
    pub loss: Var<'t>,
    /// `φ`-scaled similarities, images as rows.
    pub logits: Var<'t>,
}

impl ItcOutput<'_> {
    /// Image→text probabilities (each row sums to 1).
    pub fn p_i2t(&self) -> Tensor {
        crate::numcore::softmax(&self.logits.to_tensor()).expect("non-empty")
    }

    /// Text→image probabilities, texts as rows.
    pub fn p_t2i(&self) -> Tensor {
        crate::numcore::softmax(&self.logits.to_tensor().transpose()).expect("non-empty")
    }
}

/// Symmetric contrastive loss with diagonal positives.
pub fn itc_loss<'t>(queries: &[Var<'t>], texts: Var<'t>, cfg: &ItcConfig) -> Result<ItcOutput<'t>> {
    let b = queries.len();
    if b < 2 {
        return Err(Error::invalid(format!(
            "contrastive loss needs B >= 2, got {b}"
        )));
    }
    if texts.rows() != b {
        return Err(Error::Shape {
            op: "itc_loss",
            lhs: vec![b],
            rhs: texts.shape().to_vec(),
        });
    }
    // negated so that NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(cfg.phi > 0.0) {
        return Err(Error::invalid(format!(
            "phi must be positive, got {}",
            cfg.phi
        )));
    }
    let logits = itc_similarity(queries, texts)?.scale(cfg.phi);
    let diag: Vec<usize> = (0..b).collect();
    let i2t = logits.log_softmax().pick(&diag).mean().neg();
    let t2i = logits.transpose().log_softmax().pick(&diag).mean().neg();
    Ok(ItcOutput {
        loss: (i2t + t2i).scale(0.5),
        logits,
    })
}

/// One image/caption candidate for the matching objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItmCandidate {
    pub image: usize,
    pub text: usize,
    pub matched: bool,
}

/// For every image: its own caption, then one caption from another batch
/// item. Items whose caption text differs are preferred so a negative is
/// never a verbatim duplicate of the positive. With `similarity` given
/// (images × texts) the most similar such caption is taken instead of a
/// uniform draw.
pub fn sample_negatives<S: AsRef<str>>(
    captions: &[S],
    rng: &mut RngState,
    similarity: Option<&Tensor>,
) -> Result<Vec<ItmCandidate>> {
    let b = captions.len();
    if b < 2 {
        return Err(Error::invalid(format!(
            "negative sampling needs B >= 2, got {b}"
        )));
    }
    let mut out = Vec::with_capacity(2 * b);
    for i in 0..b {
        let differing: Vec<usize> = (0..b)
            .filter(|&j| j != i && captions[j].as_ref() != captions[i].as_ref())
            .collect();
        let pool: Vec<usize> = if differing.is_empty() {
            (0..b).filter(|&j| j != i).collect()
        } else {
            differing
        };
        let j = match similarity {
            Some(sim) => *pool
                .iter()
                .max_by(|&&a, &&c| sim.at(i, a).total_cmp(&sim.at(i, c)).then(c.cmp(&a)))
                .expect("non-empty pool"),
            None => pool[rng.below(pool.len())],
        };
        out.push(ItmCandidate {
            image: i,
            text: i,
            matched: true,
        });
        out.push(ItmCandidate {
            image: i,
            text: j,
            matched: false,
        });
    }
    Ok(out)
}

pub struct ItmOutput<'t> {
    pub loss: Var<'t>,
    /// Per-candidate `[p(no match), p(match)]`, averaged over query tokens.
    pub p_itm: Var<'t>,
}

/// Matching loss: every query token goes through the shared 2-logit head,
/// per-token probabilities are averaged, and the average is scored with CE.
pub fn itm_loss<'t>(
    cx: &Ctx<'t>,
    head: &Linear,
    queries: &[Var<'t>],
    labels: &[bool],
) -> Result<ItmOutput<'t>> {
    let n = queries.len();
    if n == 0 || labels.len() != n {
        return Err(Error::invalid(format!(
            "{n} candidates but {} labels",
            labels.len()
        )));
    }
    if labels.iter().all(|&l| l) {
        return Err(Error::invalid(
            "matching loss needs at least one negative candidate",
        ));
    }
    let q = queries[0].rows();
    if queries.iter().any(|v| v.rows() != q) {
        return Err(Error::invalid("candidates differ in query-token count"));
    }
    let probs = head.forward(cx, concat_rows(queries)).softmax();
    let mut avg = vec![0.0; n * n * q];
    for i in 0..n {
        for t in 0..q {
            avg[i * n * q + i * q + t] = 1.0 / q as f64;
        }
    }
    let avg = cx.constant(Tensor::matrix(n, n * q, avg)?);
    let p_itm = avg.matmul(probs);
    let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let loss = p_itm.pick(&targets).ln().mean().neg();
    Ok(ItmOutput { loss, p_itm })
}

/// Next-token loss: the state at position `w` predicts token `w+1`.
/// Positions whose target is padding are skipped; the mean runs over all
/// remaining positions of all sequences.
pub fn lm_loss<'t>(
    cx: &Ctx<'t>,
    head: &Linear,
    text_states: &[Var<'t>],
    ids: &[&[u32]],
) -> Result<Var<'t>> {
    if text_states.len() != ids.len() {
        return Err(Error::invalid("one id sequence per state matrix required"));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (states, seq) in text_states.iter().zip(ids) {
        if states.rows() != seq.len() {
            return Err(Error::Shape {
                op: "lm_loss",
                lhs: states.shape().to_vec(),
                rhs: vec![seq.len()],
            });
        }
        let pos: Vec<usize> = (0..seq.len().saturating_sub(1))
            .filter(|&w| seq[w + 1] != PAD)
            .collect();
        if pos.is_empty() {
            continue;
        }
        rows.push(states.gather_rows(&pos));
        targets.extend(pos.iter().map(|&w| seq[w + 1] as usize));
    }
    if rows.is_empty() {
        return Err(Error::invalid("every language-model position is padding"));
    }
    let logits = head.forward(cx, concat_rows(&rows));
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::OutOfRange {
            what: "vocabulary",
            index: bad,
            len: logits.cols(),
        });
    }
    Ok(logits.log_softmax().pick(&targets).mean().neg())
}
