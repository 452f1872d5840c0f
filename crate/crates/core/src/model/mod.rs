//! Two-tower contrastive encoder: parameters, checkpoints and the editable
//! component partition.
//!
//! Every attention head and every MLP block of either tower is an editable
//! component. Heads are stored as separate tensors (`…attn.head{h}.q.weight`
//! and friends) holding the head's rows of the Q, K, V projections and its
//! columns of the output projection, so a component's parameters are a plain
//! key set and components never share bytes. Embeddings, positional tables,
//! layer norms and the final projection belong to no component.

mod encoder;

use std::collections::BTreeMap;
use std::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{RazorError, Result};
use crate::rng::{SeedStreams, STREAM_INIT};
use crate::tensor::Tensor;

pub use encoder::{embed_images, embed_texts, encode_image, encode_text, ModelGraph};

/// Parameter or gradient tensors keyed by canonical parameter name.
pub type ParamMap = BTreeMap<String, Tensor>;

pub const INIT_STD: f64 = 0.02;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub n_patches: usize,
    pub patch_dim: usize,
    pub max_text_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            n_blocks: 4,
            n_heads: 4,
            mlp_hidden: 64,
            vocab_size: 64,
            n_patches: 16,
            patch_dim: 16,
            max_text_len: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("embed_dim", self.embed_dim),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("mlp_hidden", self.mlp_hidden),
            ("vocab_size", self.vocab_size),
            ("n_patches", self.n_patches),
            ("patch_dim", self.patch_dim),
            ("max_text_len", self.max_text_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(RazorError::Config(format!("model.{name} must be at least 1")));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(RazorError::Config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn component_count(&self) -> usize {
        2 * self.n_blocks * (self.n_heads + 1)
    }

    /// Shape of every parameter, keyed by canonical name.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let d = self.embed_dim;
        let dh = self.head_dim();
        let mut shapes = BTreeMap::new();
        let mut put = |k: String, s: Vec<usize>| {
            shapes.insert(k, s);
        };
        put("image.embed.weight".into(), vec![d, self.patch_dim]);
        put("image.embed.bias".into(), vec![d]);
        put("image.pos_embed".into(), vec![self.n_patches, d]);
        put("text.embed.weight".into(), vec![self.vocab_size, d]);
        put("text.pos_embed".into(), vec![self.max_text_len, d]);
        for tower in Tower::ALL {
            let t = tower.prefix();
            for b in 0..self.n_blocks {
                let p = format!("{t}.blocks.{b}");
                for ln in ["ln1", "ln2"] {
                    put(format!("{p}.{ln}.gamma"), vec![d]);
                    put(format!("{p}.{ln}.beta"), vec![d]);
                }
                for h in 0..self.n_heads {
                    for m in ["q", "k", "v"] {
                        put(format!("{p}.attn.head{h}.{m}.weight"), vec![dh, d]);
                        put(format!("{p}.attn.head{h}.{m}.bias"), vec![dh]);
                    }
                    put(format!("{p}.attn.head{h}.o.weight"), vec![d, dh]);
                }
                put(format!("{p}.mlp.fc1.weight"), vec![self.mlp_hidden, d]);
                put(format!("{p}.mlp.fc1.bias"), vec![self.mlp_hidden]);
                put(format!("{p}.mlp.fc2.weight"), vec![d, self.mlp_hidden]);
                put(format!("{p}.mlp.fc2.bias"), vec![d]);
            }
            put(format!("{t}.ln_final.gamma"), vec![d]);
            put(format!("{t}.ln_final.beta"), vec![d]);
            put(format!("{t}.proj.weight"), vec![d, d]);
        }
        shapes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tower {
    Image,
    Text,
}

impl Tower {
    pub const ALL: [Tower; 2] = [Tower::Image, Tower::Text];

    pub fn prefix(self) -> &'static str {
        match self {
            Tower::Image => "image",
            Tower::Text => "text",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    MsaHead(usize),
    Mlp,
}

/// One editable unit: an attention head or an MLP block of one tower.
///
/// The derived ordering is the canonical component order: image tower
/// first, then by block, heads (by index) before the MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComponentId {
    pub tower: Tower,
    pub block: usize,
    pub kind: ComponentKind,
}

impl ComponentId {
    pub fn head(tower: Tower, block: usize, head: usize) -> Self {
        Self { tower, block, kind: ComponentKind::MsaHead(head) }
    }

    pub fn mlp(tower: Tower, block: usize) -> Self {
        Self { tower, block, kind: ComponentKind::Mlp }
    }

    pub fn head_index(&self) -> Option<usize> {
        match self.kind {
            ComponentKind::MsaHead(h) => Some(h),
            ComponentKind::Mlp => None,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let head_ok = self.head_index().is_none_or(|h| h < config.n_heads);
        if self.block >= config.n_blocks || !head_ok {
            return Err(RazorError::Lookup(format!("component {self} is outside the model")));
        }
        Ok(())
    }

    /// Canonical parameter names owned by this component, sorted.
    pub fn param_names(&self, config: &ModelConfig) -> Result<Vec<String>> {
        self.validate(config)?;
        let p = format!("{}.blocks.{}", self.tower.prefix(), self.block);
        let mut names: Vec<String> = match self.kind {
            ComponentKind::MsaHead(h) => ["q.weight", "q.bias", "k.weight", "k.bias", "v.weight", "v.bias", "o.weight"]
                .iter()
                .map(|s| format!("{p}.attn.head{h}.{s}"))
                .collect(),
            ComponentKind::Mlp => ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]
                .iter()
                .map(|s| format!("{p}.mlp.{s}"))
                .collect(),
        };
        names.sort();
        Ok(names)
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ComponentKind::MsaHead(h) => write!(f, "{}.b{}.head{}", self.tower.prefix(), self.block, h),
            ComponentKind::Mlp => write!(f, "{}.b{}.mlp", self.tower.prefix(), self.block),
        }
    }
}

/// All editable components in canonical order.
pub fn enumerate_components(config: &ModelConfig) -> Vec<ComponentId> {
    let mut out = Vec::with_capacity(config.component_count());
    for tower in Tower::ALL {
        for block in 0..config.n_blocks {
            out.extend((0..config.n_heads).map(|h| ComponentId::head(tower, block, h)));
            out.push(ComponentId::mlp(tower, block));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Training or editing step that produced the parameters.
    pub step: u64,
    pub format_version: u32,
    /// Bit width when the weights were passed through post-training quantization.
    pub quant_bits: Option<u8>,
}

impl CheckpointMeta {
    pub fn new(seed: u64) -> Self {
        Self { seed, step: 0, format_version: CHECKPOINT_FORMAT_VERSION, quant_bits: None }
    }
}

/// Immutable snapshot of every model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    config: ModelConfig,
    params: ParamMap,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamMap, meta: CheckpointMeta) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(RazorError::Contract(format!(
                "checkpoint has {} tensors, architecture needs {}",
                params.len(),
                shapes.len()
            )));
        }
        for (name, shape) in &shapes {
            match params.get(name) {
                None => return Err(RazorError::Contract(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(RazorError::Contract(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => return Err(RazorError::NonFinite(name.clone())),
                Some(_) => {}
            }
        }
        Ok(Self { config, params, meta })
    }

    /// Gaussian(0, 0.02) weights and embeddings, zero biases, unit layer-norm
    /// scales; drawn from the `init` stream in canonical key order.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedStreams::new(seed).stream(STREAM_INIT);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                let data = if name.ends_with(".gamma") {
                    vec![1.0; n]
                } else if name.ends_with(".beta") || name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                (name, Tensor::from_parts(shape, data))
            })
            .collect();
        Self::new(config.clone(), params, CheckpointMeta::new(seed))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| RazorError::Lookup(name.to_string()))
    }

    pub fn into_params(self) -> ParamMap {
        self.params
    }

    /// Replaces the parameter values, keeping config and metadata. Shapes must
    /// be unchanged.
    pub fn with_params(&self, params: ParamMap) -> Result<Self> {
        Self::new(self.config.clone(), params, self.meta.clone())
    }

    pub fn is_layer_norm(name: &str) -> bool {
        name.ends_with(".gamma") || name.ends_with(".beta")
    }

    /// The tensors owned by one component, keyed by canonical name.
    pub fn component_params(&self, id: ComponentId) -> Result<BTreeMap<String, &Tensor>> {
        id.param_names(&self.config)?
            .into_iter()
            .map(|n| {
                let t = self.get(&n)?;
                Ok((n, t))
            })
            .collect()
    }

    /// Concatenation of a component's tensors in canonical key order.
    pub fn component_flat(&self, id: ComponentId) -> Result<Vec<f64>> {
        Ok(self.component_params(id)?.values().flat_map(|t| t.data().iter().copied()).collect())
    }

    /// `θ_l ← θ_l + Δ` for the keys of `delta`, which must all belong to `id`.
    /// Every other tensor is carried over untouched.
    pub fn apply_delta(&self, id: ComponentId, delta: &ParamMap) -> Result<Self> {
        self.apply_scaled(id, delta, 1.0)
    }

    /// `θ_l ← θ_l + scale·Δ` restricted to component `id`.
    pub fn apply_scaled(&self, id: ComponentId, delta: &ParamMap, scale: f64) -> Result<Self> {
        let owned = id.param_names(&self.config)?;
        let mut params = self.params.clone();
        for (name, d) in delta {
            if owned.binary_search(name).is_err() {
                return Err(RazorError::Contract(format!("{name} is not a parameter of {id}")));
            }
            let target = params.get_mut(name).expect("component names exist in a valid checkpoint");
            if target.shape() != d.shape() {
                return Err(RazorError::Dimension(format!(
                    "delta for {name} has shape {:?}, parameter has {:?}",
                    d.shape(),
                    target.shape()
                )));
            }
            for (t, v) in target.data_mut().iter_mut().zip(d.data()) {
                *t += scale * v;
            }
            if !target.is_finite() {
                return Err(RazorError::NonFinite(format!("update of {name}")));
            }
        }
        Ok(Self { config: self.config.clone(), params, meta: self.meta.clone() })
    }
}
