//! Contrastive pretraining of the two-tower model on the synthetic pairs.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Pair;
use crate::error::{RazorError, Result};
use crate::losses;
use crate::model::{Checkpoint, ModelGraph, ParamMap};
use crate::rng::{SeedStreams, STREAM_PRETRAIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Pairs per step; 0 means the whole training set.
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub temperature: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 300, step_size: 1e-3, batch_size: 128, optimizer: Optimizer::Adam, temperature: 0.07 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(RazorError::Config(format!("pretrain.step_size must be positive, got {}", self.step_size)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(RazorError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    m: ParamMap,
    v: ParamMap,
    t: i32,
}

impl Adam {
    fn new(params: &ParamMap) -> Self {
        let zeros: ParamMap = params.iter().map(|(k, t)| (k.clone(), crate::Tensor::zeros(t.shape()))).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, params: &mut ParamMap, grads: &ParamMap, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self.m.get_mut(name).unwrap().data_mut();
            let v = self.v.get_mut(name).unwrap().data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// Minibatch loss before each step.
    pub losses: Vec<f64>,
}

/// Minimizes the symmetric InfoNCE loss over `pairs`.
pub fn pretrain(init: &Checkpoint, pairs: &[Pair], cfg: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(RazorError::Input("no training pairs".into()));
    }
    let mut rng = SeedStreams::new(seed).stream(STREAM_PRETRAIN);
    let batch = if cfg.batch_size == 0 { pairs.len() } else { cfg.batch_size.min(pairs.len()) };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = pairs.len();
    let mut params = init.params().clone();
    let mut adam = Adam::new(&params);
    let mut losses_seen = Vec::with_capacity(cfg.steps);
    let mut current = init.clone();

    for _ in 0..cfg.steps {
        let chosen: Vec<Pair> = if batch == pairs.len() {
            pairs.to_vec()
        } else {
            if cursor + batch > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let b = order[cursor..cursor + batch].iter().map(|&i| pairs[i].clone()).collect();
            cursor += batch;
            b
        };
        let mut mg = ModelGraph::new(&current);
        let (v, t) = losses::embed_pairs(&mut mg, &chosen)?;
        let loss = losses::retain_loss_on(&mut mg.graph, v, t, cfg.temperature)?;
        losses_seen.push(mg.graph.scalar(loss));
        mg.graph.backward(loss)?;
        let grads = mg.graph.param_grads();
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (name, p) in params.iter_mut() {
                    for (w, g) in p.data_mut().iter_mut().zip(grads[name].data()) {
                        *w -= cfg.step_size * g;
                    }
                }
            }
            Optimizer::Adam => adam.step(&mut params, &grads, cfg.step_size),
        }
        current = current.with_params(params.clone())?;
    }
    current.meta.step = init.meta.step + cfg.steps as u64;
    Ok(PretrainOutcome { checkpoint: current, losses: losses_seen })
}
