//! Per-component forget/retain gradients and the ratio-aware saliency
//! score used to pick which components to edit.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Pair;
use crate::error::{RazorError, Result};
use crate::losses::{self, BaselineSims, MismatchVariant};
use crate::model::{enumerate_components, Checkpoint, ComponentId, ComponentKind, ModelGraph, ParamMap};
use crate::tensor;

/// Full-model gradients of the three losses, one backward pass each.
#[derive(Clone, Debug)]
pub struct GradientSet {
    pub forget: ParamMap,
    pub retain: ParamMap,
    pub mismatch: ParamMap,
}

impl GradientSet {
    pub fn compute(
        params: &Checkpoint,
        retain_batch: &[Pair],
        forget_batch: &[Pair],
        baseline: &BaselineSims,
        temperature: f64,
        variant: MismatchVariant,
    ) -> Result<Self> {
        let mut mg = ModelGraph::new(params);
        let (rv, rt) = losses::embed_pairs(&mut mg, retain_batch)?;
        let (fv, ft) = losses::embed_pairs(&mut mg, forget_batch)?;
        let g = &mut mg.graph;
        let l_r = losses::retain_loss_on(g, rv, rt, temperature)?;
        let l_f = losses::forget_loss_on(g, fv, ft)?;
        let l_m = losses::mismatch_loss_on(g, fv, ft, baseline, variant)?;
        g.backward(l_f)?;
        let forget = g.param_grads();
        g.backward(l_r)?;
        let retain = g.param_grads();
        g.backward(l_m)?;
        let mismatch = g.param_grads();
        Ok(Self { forget, retain, mismatch })
    }

    /// Slices the full maps into one entry per editable component.
    pub fn per_component(&self, params: &Checkpoint) -> Result<Vec<ComponentGradients>> {
        enumerate_components(params.config())
            .into_iter()
            .map(|id| ComponentGradients::slice(id, params, self))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ComponentGradients {
    pub id: ComponentId,
    pub g_f: ParamMap,
    pub g_r: ParamMap,
    pub g_m: ParamMap,
    pub flattened_f: Vec<f64>,
    pub flattened_r: Vec<f64>,
}

impl ComponentGradients {
    fn slice(id: ComponentId, params: &Checkpoint, full: &GradientSet) -> Result<Self> {
        let names = id.param_names(params.config())?;
        let take = |map: &ParamMap| -> Result<ParamMap> {
            names
                .iter()
                .map(|n| {
                    let t = map.get(n).ok_or_else(|| RazorError::Lookup(format!("no gradient for {n}")))?;
                    Ok((n.clone(), t.clone()))
                })
                .collect()
        };
        let g_f = take(&full.forget)?;
        let g_r = take(&full.retain)?;
        let g_m = take(&full.mismatch)?;
        let flattened_f = flatten(&g_f);
        let flattened_r = flatten(&g_r);
        Ok(Self { id, g_f, g_r, g_m, flattened_f, flattened_r })
    }
}

/// Concatenates tensors in key order.
pub fn flatten(map: &ParamMap) -> Vec<f64> {
    map.values().flat_map(|t| t.data().iter().copied()).collect()
}

/// One-shot gradients for every editable component.
pub fn component_gradients(
    params: &Checkpoint,
    retain_batch: &[Pair],
    forget_batch: &[Pair],
    baseline: &BaselineSims,
    temperature: f64,
    variant: MismatchVariant,
) -> Result<Vec<ComponentGradients>> {
    GradientSet::compute(params, retain_batch, forget_batch, baseline, temperature, variant)?.per_component(params)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyVariant {
    /// Plain L2 norms.
    #[default]
    Norm,
    /// Squared norms: `‖g_f‖² / (‖θ‖² + ε)`.
    SquaredNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreParams {
    pub alpha: f64,
    pub eps: f64,
    pub variant: SaliencyVariant,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self { alpha: 0.5, eps: 1e-8, variant: SaliencyVariant::Norm }
    }
}

impl ScoreParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(RazorError::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(RazorError::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = tensor::sum_sq(a).sqrt();
    let nb = tensor::sum_sq(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (tensor::dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub norm_gf: f64,
    pub norm_theta: f64,
    pub cos: f64,
    pub phi: f64,
}

// Rounding leaves parallel vectors a few ulps short of cos = 1.
const ALIGNED_TOL: f64 = 8.0 * f64::EPSILON;

pub fn score(g_f: &[f64], g_r: &[f64], theta: &[f64], p: &ScoreParams) -> Score {
    let norm_gf = tensor::sum_sq(g_f).sqrt();
    let norm_theta = tensor::sum_sq(theta).sqrt();
    let cos = cosine(g_f, g_r);
    let magnitude = match p.variant {
        SaliencyVariant::Norm => norm_gf / (norm_theta + p.eps),
        SaliencyVariant::SquaredNorm => norm_gf * norm_gf / (norm_theta * norm_theta + p.eps),
    };
    let mut base = 1.0 - cos;
    if base <= ALIGNED_TOL {
        base = 0.0;
    }
    let phi = magnitude * base.powf(p.alpha);
    Score { norm_gf, norm_theta, cos, phi }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyEntry {
    pub id: ComponentId,
    #[serde(flatten)]
    pub score: Score,
}

/// Scores sorted by descending φ, canonical component order on ties.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyTable {
    pub params: ScoreParams,
    entries: Vec<SaliencyEntry>,
}

impl SaliencyTable {
    pub fn new(params: ScoreParams, mut entries: Vec<SaliencyEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(RazorError::Input("saliency table is empty".into()));
        }
        if let Some(e) = entries.iter().find(|e| !e.score.phi.is_finite()) {
            return Err(RazorError::NonFinite(format!("saliency of {} is {}", e.id, e.score.phi)));
        }
        entries.sort_by(|a, b| b.score.phi.total_cmp(&a.score.phi).then(a.id.cmp(&b.id)));
        Ok(Self { params, entries })
    }

    pub fn build(params: &Checkpoint, grads: &[ComponentGradients], p: &ScoreParams) -> Result<Self> {
        p.validate()?;
        let entries = grads
            .iter()
            .map(|g| {
                let theta = params.component_flat(g.id)?;
                Ok(SaliencyEntry { id: g.id, score: score(&g.flattened_f, &g.flattened_r, &theta, p) })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(*p, entries)
    }

    pub fn entries(&self) -> &[SaliencyEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn phi(&self, id: ComponentId) -> Option<f64> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.score.phi)
    }

    pub fn max_phi(&self) -> f64 {
        self.entries[0].score.phi
    }

    /// `K = {φ > τ}` in table order, or the single top entry if that is empty.
    pub fn select(&self, tau: f64) -> Vec<ComponentId> {
        let k: Vec<ComponentId> = self.entries.iter().filter(|e| e.score.phi > tau).map(|e| e.id).collect();
        if k.is_empty() {
            vec![self.entries[0].id]
        } else {
            k
        }
    }

    /// Highest-φ entry not already in `chosen`.
    pub fn best_excluding(&self, chosen: &BTreeSet<ComponentId>) -> Option<&SaliencyEntry> {
        self.entries.iter().find(|e| !chosen.contains(&e.id))
    }

    /// CRC32 over the ordered ids and φ bits.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for e in &self.entries {
            h.update(e.id.to_string().as_bytes());
            h.update(&e.score.phi.to_le_bytes());
        }
        h.finalize()
    }

    pub fn write_csv<W: Write>(&self, out: W, selected: &BTreeSet<ComponentId>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["component", "tower", "block", "kind", "head", "norm_gf", "norm_theta", "cos", "phi", "selected"])?;
        for e in &self.entries {
            let (kind, head) = match e.id.kind {
                ComponentKind::MsaHead(h) => ("msa_head", h.to_string()),
                ComponentKind::Mlp => ("mlp", String::new()),
            };
            w.write_record([
                e.id.to_string(),
                e.id.tower.prefix().to_string(),
                e.id.block.to_string(),
                kind.to_string(),
                head,
                e.score.norm_gf.to_string(),
                e.score.norm_theta.to_string(),
                e.score.cos.to_string(),
                e.score.phi.to_string(),
                selected.contains(&e.id).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// How the initial selection threshold is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum TauPolicy {
    /// Percentile in [0, 100] of the φ distribution, linear interpolation.
    Percentile(f64),
    Fixed(f64),
}

impl Default for TauPolicy {
    fn default() -> Self {
        TauPolicy::Percentile(90.0)
    }
}

impl TauPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TauPolicy::Percentile(p) if !(0.0..=100.0).contains(&p) => {
                Err(RazorError::Config(format!("tau percentile must be in [0, 100], got {p}")))
            }
            TauPolicy::Fixed(t) if t.is_nan() => Err(RazorError::Config("tau is NaN".into())),
            _ => Ok(()),
        }
    }

    pub fn resolve(&self, table: &SaliencyTable) -> f64 {
        match *self {
            TauPolicy::Fixed(t) => t,
            TauPolicy::Percentile(p) => {
                let mut phis: Vec<f64> = table.entries.iter().map(|e| e.score.phi).collect();
                phis.sort_by(f64::total_cmp);
                percentile(&phis, p)
            }
        }
    }
}

/// Linear-interpolated percentile of sorted, nonempty data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}
