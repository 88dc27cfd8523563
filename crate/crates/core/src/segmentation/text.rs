use crate::encoders::{ClipModel, Vocab};
use crate::error::{Error, Result};
use crate::numcore::layers::Linear;
use crate::numcore::{Ctx, ParamStore, Tensor, Var};

pub const DEFAULT_TEMPLATE: &str = "a photo of {}";

/// One prompt per `(class, template)`; an empty template list uses the bare name.
pub fn build_prompts<S: AsRef<str>>(
    class_names: &[S],
    templates: &[String],
) -> Result<Vec<Vec<String>>> {
    if class_names.is_empty() {
        return Err(Error::invalid("no class names to prompt"));
    }
    for t in templates {
        if t.matches("{}").count() != 1 {
            return Err(Error::invalid(format!(
                "template {t:?} needs exactly one {{}} placeholder"
            )));
        }
    }
    Ok(class_names
        .iter()
        .map(|c| {
            let c = c.as_ref();
            if templates.is_empty() {
                vec![c.to_string()]
            } else {
                templates.iter().map(|t| t.replace("{}", c)).collect()
            }
        })
        .collect())
}

/// Tokenized prompts, grouped per class.
pub fn build_text_tokens<S: AsRef<str>>(
    vocab: &Vocab,
    class_names: &[S],
    templates: &[String],
) -> Result<Vec<Vec<Vec<u32>>>> {
    Ok(build_prompts(class_names, templates)?
        .iter()
        .map(|ps| ps.iter().map(|p| vocab.tokenize(p)).collect())
        .collect())
}

/// Frozen class-name embeddings (`C × d`): the mean over templates of the
/// unit-norm text-encoder outputs.
pub fn static_text_embeddings<S: AsRef<str>>(
    clip: &ClipModel,
    store: &ParamStore,
    vocab: &Vocab,
    class_names: &[S],
    templates: &[String],
) -> Result<Tensor> {
    let prompts = build_prompts(class_names, templates)?;
    let per_class = prompts[0].len();
    let flat: Vec<&str> = prompts.iter().flatten().map(String::as_str).collect();
    let emb = clip.text_embeddings(store, vocab, &flat)?;
    let d = emb.cols();
    let mut out = Vec::with_capacity(prompts.len() * d);
    for c in 0..prompts.len() {
        let mut acc = vec![0.0; d];
        for t in 0..per_class {
            for (a, v) in acc.iter_mut().zip(emb.row(c * per_class + t)) {
                *a += v;
            }
        }
        out.extend(acc.into_iter().map(|v| v / per_class as f64));
    }
    Tensor::matrix(prompts.len(), d, out)
}

/// Mean over the enriched query tokens followed by a learned projection: `Q×d_q → 1×d`.
pub fn pool_queries<'t>(cx: &Ctx<'t>, enriched: Var<'t>, proj: &Linear) -> Var<'t> {
    proj.forward(cx, enriched.mean_rows())
}

/// Adds the pooled image vector to every class embedding.
pub fn fuse<'t>(e_hat: Var<'t>, e_static: Var<'t>) -> Result<Var<'t>> {
    if e_hat.rows() != 1 || e_hat.cols() != e_static.cols() {
        return Err(Error::Shape {
            op: "fuse",
            lhs: e_hat.shape().to_vec(),
            rhs: e_static.shape().to_vec(),
        });
    }
    Ok(e_static.add_row(e_hat))
}
