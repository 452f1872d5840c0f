//! Retain (symmetric InfoNCE), forget (cosine push-away) and mismatch
//! (similarity drift against the frozen model) objectives, and their
//! weighted composite.
//!
//! The `*_on` functions build the loss on an existing graph from embedding
//! nodes; the plain functions evaluate a checkpoint on a batch of pairs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Pair;
use crate::error::{RazorError, Result};
use crate::model::{Checkpoint, ModelGraph};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Forget/retain ratio, in (0, 1].
    pub rho: f64,
    pub lambda_f: f64,
    pub lambda_m: f64,
    /// InfoNCE temperature.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rho: 0.5, lambda_f: 1.0, lambda_m: 0.1, temperature: 0.07 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(RazorError::Config(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        for (name, v) in [("lambda_f", self.lambda_f), ("lambda_m", self.lambda_m), ("temperature", self.temperature)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RazorError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Weight on the forget term: `λ_f · ρ`.
    pub fn forget_weight(&self) -> f64 {
        self.lambda_f * self.rho
    }
}

/// How the mismatch term measures drift from the frozen similarities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MismatchVariant {
    /// Mean signed difference `⟨v,t⟩ − ⟨v⁰,t⁰⟩`.
    #[default]
    Signed,
    /// Mean squared difference.
    Squared,
}

/// Which terms of the composite objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_retain: bool,
    pub use_forget: bool,
    pub use_mismatch: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::ALL
    }
}

impl Ablation {
    pub const ALL: Ablation = Ablation { use_retain: true, use_forget: true, use_mismatch: true };
    pub const WITHOUT_RETAIN: Ablation = Ablation { use_retain: false, ..Self::ALL };
    pub const WITHOUT_FORGET: Ablation = Ablation { use_forget: false, ..Self::ALL };
    pub const WITHOUT_MISMATCH: Ablation = Ablation { use_mismatch: false, ..Self::ALL };

    pub fn validate(&self) -> Result<()> {
        if !(self.use_retain || self.use_forget || self.use_mismatch) {
            return Err(RazorError::Config("every loss term is disabled".into()));
        }
        Ok(())
    }
}

/// Image–caption similarities of the frozen pre-edit model on the forget set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSims(Vec<f64>);

impl BaselineSims {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(-1.0 - 1e-12..=1.0 + 1e-12).contains(v)) {
            return Err(RazorError::Contract("baseline similarities must lie in [-1, 1]".into()));
        }
        Ok(Self(values))
    }

    pub fn compute(frozen: &Checkpoint, forget: &[Pair]) -> Result<Self> {
        Self::new(pair_similarities(frozen, forget)?)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `⟨v_i, t_i⟩` for every pair.
pub fn pair_similarities(params: &Checkpoint, pairs: &[Pair]) -> Result<Vec<f64>> {
    let mut mg = ModelGraph::new(params);
    let (v, t) = embed_pairs(&mut mg, pairs)?;
    let s = mg.graph.row_dot(v, t)?;
    Ok(mg.graph.value(s).data().to_vec())
}

/// Encodes the images and captions of `pairs`; returns `[n × d]` nodes.
pub fn embed_pairs(mg: &mut ModelGraph, pairs: &[Pair]) -> Result<(Var, Var)> {
    if pairs.is_empty() {
        return Err(RazorError::Input("empty batch".into()));
    }
    let images: Vec<&Tensor> = pairs.iter().map(|p| &p.image).collect();
    let captions: Vec<&[usize]> = pairs.iter().map(|p| p.tokens.as_slice()).collect();
    let v = mg.encode_images(&images)?;
    let t = mg.encode_texts(&captions)?;
    Ok((v, t))
}

fn batch_rows(g: &Graph, images: Var, texts: Var) -> Result<usize> {
    let (n, _) = g.value(images).dims2();
    if g.value(images).shape() != g.value(texts).shape() {
        return Err(RazorError::Dimension("image and text embeddings differ in shape".into()));
    }
    if n == 0 {
        return Err(RazorError::Input("empty batch".into()));
    }
    Ok(n)
}

/// Symmetric InfoNCE over the in-batch similarity matrix.
pub fn retain_loss_on(g: &mut Graph, images: Var, texts: Var, temperature: f64) -> Result<Var> {
    batch_rows(g, images, texts)?;
    let tt = g.transpose(texts)?;
    let sims = g.matmul(images, tt)?;
    let logits = g.scale(sims, 1.0 / temperature)?;
    let img_to_txt = g.log_softmax_rows(logits)?;
    let img_to_txt = g.diag(img_to_txt)?;
    let logits_t = g.transpose(logits)?;
    let txt_to_img = g.log_softmax_rows(logits_t)?;
    let txt_to_img = g.diag(txt_to_img)?;
    let a = g.mean(img_to_txt)?;
    let b = g.mean(txt_to_img)?;
    let total = g.add(a, b)?;
    g.scale(total, -0.5)
}

/// Mean of `1 − ⟨v_i, t_i⟩`.
pub fn forget_loss_on(g: &mut Graph, images: Var, texts: Var) -> Result<Var> {
    batch_rows(g, images, texts)?;
    let sims = g.row_dot(images, texts)?;
    let m = g.mean(sims)?;
    let neg = g.scale(m, -1.0)?;
    let one = g.input(Tensor::scalar(1.0)?);
    g.add(one, neg)
}

pub fn mismatch_loss_on(
    g: &mut Graph,
    images: Var,
    texts: Var,
    baseline: &BaselineSims,
    variant: MismatchVariant,
) -> Result<Var> {
    let n = batch_rows(g, images, texts)?;
    if baseline.len() != n {
        return Err(RazorError::Contract(format!(
            "baseline has {} similarities for a batch of {n}",
            baseline.len()
        )));
    }
    let sims = g.row_dot(images, texts)?;
    let base = g.input(Tensor::vector(baseline.values().to_vec())?);
    let drift = g.sub(sims, base)?;
    match variant {
        MismatchVariant::Signed => g.mean(drift),
        MismatchVariant::Squared => {
            let sq = g.mul(drift, drift)?;
            g.mean(sq)
        }
    }
}

/// Loss nodes of a composite evaluation; disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct CompositeNodes {
    pub total: Var,
    pub retain: Option<Var>,
    pub forget: Option<Var>,
    pub mismatch: Option<Var>,
}

/// `L_retain + λ_f·ρ·L_forget + λ_m·L_mismatch` with disabled terms dropped.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss_on(
    g: &mut Graph,
    retain: (Var, Var),
    forget: (Var, Var),
    baseline: &BaselineSims,
    weights: &LossWeights,
    ablation: Ablation,
    variant: MismatchVariant,
) -> Result<CompositeNodes> {
    ablation.validate()?;
    let mut terms = Vec::with_capacity(3);
    let retain_node = if ablation.use_retain {
        let l = retain_loss_on(g, retain.0, retain.1, weights.temperature)?;
        terms.push(l);
        Some(l)
    } else {
        None
    };
    let forget_node = if ablation.use_forget {
        let l = forget_loss_on(g, forget.0, forget.1)?;
        terms.push(g.scale(l, weights.forget_weight())?);
        Some(l)
    } else {
        None
    };
    let mismatch_node = if ablation.use_mismatch {
        let l = mismatch_loss_on(g, forget.0, forget.1, baseline, variant)?;
        terms.push(g.scale(l, weights.lambda_m)?);
        Some(l)
    } else {
        None
    };
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(CompositeNodes { total, retain: retain_node, forget: forget_node, mismatch: mismatch_node })
}

pub fn retain_loss(params: &Checkpoint, batch: &[Pair], temperature: f64) -> Result<f64> {
    let mut mg = ModelGraph::new(params);
    let (v, t) = embed_pairs(&mut mg, batch)?;
    let l = retain_loss_on(&mut mg.graph, v, t, temperature)?;
    Ok(mg.graph.scalar(l))
}

pub fn forget_loss(params: &Checkpoint, batch: &[Pair]) -> Result<f64> {
    let mut mg = ModelGraph::new(params);
    let (v, t) = embed_pairs(&mut mg, batch)?;
    let l = forget_loss_on(&mut mg.graph, v, t)?;
    Ok(mg.graph.scalar(l))
}

pub fn mismatch_loss(
    params: &Checkpoint,
    batch: &[Pair],
    baseline: &BaselineSims,
    variant: MismatchVariant,
) -> Result<f64> {
    let mut mg = ModelGraph::new(params);
    let (v, t) = embed_pairs(&mut mg, batch)?;
    let l = mismatch_loss_on(&mut mg.graph, v, t, baseline, variant)?;
    Ok(mg.graph.scalar(l))
}

/// Value of each enabled term and the weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeValue {
    pub total: f64,
    pub retain: Option<f64>,
    pub forget: Option<f64>,
    pub mismatch: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn composite_loss(
    params: &Checkpoint,
    retain_batch: &[Pair],
    forget_batch: &[Pair],
    baseline: &BaselineSims,
    weights: &LossWeights,
    ablation: Ablation,
    variant: MismatchVariant,
) -> Result<CompositeValue> {
    weights.validate()?;
    ablation.validate()?;
    let mut mg = ModelGraph::new(params);
    let retain = embed_pairs(&mut mg, retain_batch)?;
    let forget = embed_pairs(&mut mg, forget_batch)?;
    let nodes = composite_loss_on(&mut mg.graph, retain, forget, baseline, weights, ablation, variant)?;
    let g = &mg.graph;
    Ok(CompositeValue {
        total: g.scalar(nodes.total),
        retain: nodes.retain.map(|v| g.scalar(v)),
        forget: nodes.forget.map(|v| g.scalar(v)),
        mismatch: nodes.mismatch.map(|v| g.scalar(v)),
    })
}

/// Mean of per-pair similarities, for callers that already hold embeddings.
pub fn mean_similarity(images: &Tensor, texts: &Tensor) -> f64 {
    let (n, _) = images.dims2();
    let total = (0..n).fold(0.0, |acc, i| acc + tensor::dot(images.row(i), texts.row(i)));
    total / n as f64
}
