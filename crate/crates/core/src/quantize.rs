//! Symmetric per-tensor post-training weight quantization.

use serde::{Deserialize, Serialize};

use crate::error::{RazorError, Result};
use crate::model::{Checkpoint, ParamMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    bits: u8,
}

impl QuantSpec {
    pub const Q8: QuantSpec = QuantSpec { bits: 8 };
    pub const Q4: QuantSpec = QuantSpec { bits: 4 };

    pub fn new(bits: u8) -> Result<Self> {
        match bits {
            4 | 8 => Ok(Self { bits }),
            _ => Err(RazorError::Config(format!("quantization bits must be 4 or 8, got {bits}"))),
        }
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// Largest integer level, `2^(bits−1) − 1`.
    pub fn qmax(&self) -> f64 {
        ((1u32 << (self.bits - 1)) - 1) as f64
    }

    pub fn scale(&self, w: &[f64]) -> f64 {
        max_abs(w) / self.qmax()
    }
}

fn max_abs(w: &[f64]) -> f64 {
    w.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Round-trips `w` through the integer grid.
///
/// The extreme levels map back to `±max|w|` exactly so that quantizing
/// twice reproduces the same scale.
pub fn quantize_values(w: &[f64], spec: QuantSpec) -> Vec<f64> {
    let amax = max_abs(w);
    if amax == 0.0 {
        return w.to_vec();
    }
    let qmax = spec.qmax();
    let s = amax / qmax;
    w.iter()
        .map(|&x| {
            let q = (x / s).round_ties_even().clamp(-qmax, qmax);
            if q == qmax {
                amax
            } else if q == -qmax {
                -amax
            } else {
                q * s
            }
        })
        .collect()
}

/// Quantizes every tensor except layer-norm parameters.
pub fn quantize(c: &Checkpoint, spec: QuantSpec) -> Result<Checkpoint> {
    let mut params: ParamMap = c.params().clone();
    for (name, t) in params.iter_mut() {
        if Checkpoint::is_layer_norm(name) {
            continue;
        }
        let q = quantize_values(t.data(), spec);
        t.data_mut().copy_from_slice(&q);
    }
    let mut out = c.with_params(params)?;
    out.meta.quant_bits = Some(spec.bits);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorQuantError {
    pub name: String,
    pub scale: f64,
    pub max_abs: f64,
    pub rms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantErrorReport {
    pub bits: u8,
    pub tensors: Vec<TensorQuantError>,
    /// RMS over every quantized element.
    pub rms: f64,
    pub max_abs: f64,
}

pub fn quant_error(c: &Checkpoint, spec: QuantSpec) -> QuantErrorReport {
    let mut tensors = Vec::new();
    let (mut total_sq, mut count, mut worst) = (0.0, 0usize, 0.0f64);
    for (name, t) in c.params() {
        if Checkpoint::is_layer_norm(name) {
            continue;
        }
        let q = quantize_values(t.data(), spec);
        let (mut sq, mut mx) = (0.0, 0.0f64);
        for (a, b) in t.data().iter().zip(&q) {
            let e = a - b;
            sq += e * e;
            mx = mx.max(e.abs());
        }
        total_sq += sq;
        count += q.len();
        worst = worst.max(mx);
        tensors.push(TensorQuantError {
            name: name.clone(),
            scale: spec.scale(t.data()),
            max_abs: mx,
            rms: (sq / q.len() as f64).sqrt(),
        });
    }
    let rms = if count == 0 { 0.0 } else { (total_sq / count as f64).sqrt() };
    QuantErrorReport { bits: spec.bits, tensors, rms, max_abs: worst }
}
