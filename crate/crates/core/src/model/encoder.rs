//! Forward pass of both towers on a [`Graph`].
//!
//! Pre-norm blocks (`x + attn(ln1(x))`, then `h + mlp(ln2(h))`), a final layer
//! norm, mean pooling over the sequence, a bias-free projection and L2
//! normalization.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::{RazorError, Result};
use crate::tensor::Tensor;

use super::{Checkpoint, ModelConfig, Tower};

/// A graph with every checkpoint parameter registered as a named leaf.
pub struct ModelGraph {
    pub graph: Graph,
    vars: BTreeMap<String, Var>,
    config: ModelConfig,
}

impl ModelGraph {
    pub fn new(params: &Checkpoint) -> Self {
        let mut graph = Graph::new();
        let vars = params
            .params()
            .iter()
            .map(|(name, t)| (name.clone(), graph.param(name.clone(), t.clone())))
            .collect();
        Self { graph, vars, config: params.config().clone() }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// Unit-norm embeddings `[n × d]` for a batch of `[n_patches × patch_dim]` images.
    pub fn encode_images(&mut self, images: &[&Tensor]) -> Result<Var> {
        let cfg = &self.config;
        if images.is_empty() {
            return Err(RazorError::Input("no images to encode".into()));
        }
        let (p, pd) = (cfg.n_patches, cfg.patch_dim);
        let mut data = Vec::with_capacity(images.len() * p * pd);
        for img in images {
            if img.shape() != [p, pd] {
                return Err(RazorError::Dimension(format!(
                    "image shape {:?}, expected [{p}, {pd}]",
                    img.shape()
                )));
            }
            data.extend_from_slice(img.data());
        }
        let n = images.len();
        let x = self.graph.input(Tensor::from_parts(vec![n * p, pd], data));
        let h = self.graph.linear(x, self.var("image.embed.weight"), Some(self.var("image.embed.bias")))?;
        let positions: Vec<usize> = (0..n).flat_map(|_| 0..p).collect();
        let pos = self.graph.gather_rows(self.var("image.pos_embed"), &positions)?;
        let h = self.graph.add(h, pos)?;
        self.tower_trunk(Tower::Image, h, n, p)
    }

    /// Unit-norm embeddings `[n × d]` for token sequences of length
    /// `1..=max_text_len`. Sequences are batched by length and returned in
    /// input order.
    pub fn encode_texts(&mut self, prompts: &[&[usize]]) -> Result<Var> {
        if prompts.is_empty() {
            return Err(RazorError::Input("no prompts to encode".into()));
        }
        for tokens in prompts {
            if tokens.is_empty() || tokens.len() > self.config.max_text_len {
                return Err(RazorError::Dimension(format!(
                    "prompt length {} outside 1..={}",
                    tokens.len(),
                    self.config.max_text_len
                )));
            }
            if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(RazorError::Input(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, t) in prompts.iter().enumerate() {
            by_len.entry(t.len()).or_default().push(i);
        }
        let mut parts = Vec::with_capacity(by_len.len());
        let mut order = Vec::with_capacity(prompts.len());
        for (len, members) in &by_len {
            let ids: Vec<usize> = members.iter().flat_map(|&i| prompts[i].iter().copied()).collect();
            let tok = self.graph.gather_rows(self.var("text.embed.weight"), &ids)?;
            let positions: Vec<usize> = members.iter().flat_map(|_| 0..*len).collect();
            let pos = self.graph.gather_rows(self.var("text.pos_embed"), &positions)?;
            let h = self.graph.add(tok, pos)?;
            parts.push(self.tower_trunk(Tower::Text, h, members.len(), *len)?);
            order.extend_from_slice(members);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let stacked = self.graph.concat_rows(&parts)?;
        // row k of `stacked` is prompt order[k]; invert to restore input order
        let mut inverse = vec![0; order.len()];
        for (k, &i) in order.iter().enumerate() {
            inverse[i] = k;
        }
        self.graph.gather_rows(stacked, &inverse)
    }

    fn tower_trunk(&mut self, tower: Tower, mut h: Var, batch: usize, seq: usize) -> Result<Var> {
        let t = tower.prefix();
        for b in 0..self.config.n_blocks {
            h = self.block(&format!("{t}.blocks.{b}"), h, batch, seq)?;
        }
        let h = self.graph.layer_norm(h, self.var(&format!("{t}.ln_final.gamma")), self.var(&format!("{t}.ln_final.beta")))?;
        let pooled = self.graph.mean_pool(h, seq)?;
        let projected = self.graph.linear(pooled, self.var(&format!("{t}.proj.weight")), None)?;
        self.graph.l2_normalize(projected)
    }

    fn block(&mut self, p: &str, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let heads = self.config.n_heads;
        let ln1 = self.graph.layer_norm(x, self.var(&format!("{p}.ln1.gamma")), self.var(&format!("{p}.ln1.beta")))?;

        let mut weights = Vec::with_capacity(3 * heads);
        let mut biases = Vec::with_capacity(3 * heads);
        for m in ["q", "k", "v"] {
            for h in 0..heads {
                weights.push(self.var(&format!("{p}.attn.head{h}.{m}.weight")));
                biases.push(self.var(&format!("{p}.attn.head{h}.{m}.bias")));
            }
        }
        let w_qkv = self.graph.concat_rows(&weights)?;
        let b_qkv = self.graph.concat_cols(&biases)?;
        let qkv = self.graph.linear(ln1, w_qkv, Some(b_qkv))?;
        let attended = self.graph.attention(qkv, batch, seq, heads)?;
        let out_cols: Vec<Var> = (0..heads).map(|h| self.var(&format!("{p}.attn.head{h}.o.weight"))).collect();
        let w_o = self.graph.concat_cols(&out_cols)?;
        let attn_out = self.graph.linear(attended, w_o, None)?;
        let h = self.graph.add(x, attn_out)?;

        let ln2 = self.graph.layer_norm(h, self.var(&format!("{p}.ln2.gamma")), self.var(&format!("{p}.ln2.beta")))?;
        let hidden = self.graph.linear(ln2, self.var(&format!("{p}.mlp.fc1.weight")), Some(self.var(&format!("{p}.mlp.fc1.bias"))))?;
        let hidden = self.graph.gelu(hidden)?;
        let mlp_out = self.graph.linear(hidden, self.var(&format!("{p}.mlp.fc2.weight")), Some(self.var(&format!("{p}.mlp.fc2.bias"))))?;
        self.graph.add(h, mlp_out)
    }
}

pub fn embed_images(params: &Checkpoint, images: &[&Tensor]) -> Result<Tensor> {
    let mut mg = ModelGraph::new(params);
    let v = mg.encode_images(images)?;
    Ok(mg.graph.value(v).clone())
}

pub fn embed_texts(params: &Checkpoint, prompts: &[&[usize]]) -> Result<Tensor> {
    let mut mg = ModelGraph::new(params);
    let v = mg.encode_texts(prompts)?;
    Ok(mg.graph.value(v).clone())
}

/// Unit-norm embedding of one image.
pub fn encode_image(params: &Checkpoint, image: &Tensor) -> Result<Tensor> {
    let e = embed_images(params, &[image])?;
    Tensor::vector(e.into_data())
}

/// Unit-norm embedding of one token sequence.
pub fn encode_text(params: &Checkpoint, tokens: &[usize]) -> Result<Tensor> {
    let e = embed_texts(params, &[tokens])?;
    Tensor::vector(e.into_data())
}
