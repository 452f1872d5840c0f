//! Procedural identity-labelled image–text pairs and the forget / retain /
//! validation splits.
//!
//! Each class has a random prototype image built from orthonormal patterns:
//! its own pattern mixed with one pattern shared by every class, so that
//! `class_overlap` sets the cosine between prototypes. Each style adds its
//! own orthogonal pattern. A pair's image is
//! `prototype + style pattern + Gaussian noise` and its caption is
//! `[BOS, class token, style token, EOS]`. Class prompts use style 0.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{RazorError, Result};
use crate::model::ModelConfig;
use crate::rng::{SeedStreams, STREAM_DATA, STREAM_NOISE};
use crate::tensor::{self, Tensor};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
const FIRST_CLASS_TOKEN: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_classes: usize,
    pub forget_classes: Vec<usize>,
    pub pairs_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub n_styles: usize,
    /// Per-element RMS of a style pattern relative to a class prototype.
    pub style_scale: f64,
    /// Cosine between any two class prototypes, in [0, 1).
    pub class_overlap: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            forget_classes: vec![0],
            pairs_per_class: 64,
            noise_sigma: 0.1,
            seed: 0,
            val_fraction: 0.2,
            n_styles: 1,
            style_scale: 0.5,
            class_overlap: 0.0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let err = |m: String| Err(RazorError::Config(m));
        if self.n_classes < 2 {
            return err("data.n_classes must be at least 2".into());
        }
        if self.forget_classes.is_empty() {
            return err("data.forget_classes must not be empty".into());
        }
        let mut sorted = self.forget_classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.forget_classes.len() {
            return err("data.forget_classes has duplicates".into());
        }
        if let Some(c) = sorted.iter().find(|&&c| c >= self.n_classes) {
            return err(format!("forget class {c} is not below n_classes {}", self.n_classes));
        }
        if sorted.len() == self.n_classes {
            return err("forget_classes must be a proper subset of the classes".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return err("data.val_fraction must be in [0, 1)".into());
        }
        if self.train_per_class() == 0 {
            return err("no training pairs per class; raise pairs_per_class".into());
        }
        if !(self.noise_sigma >= 0.0 && self.style_scale >= 0.0) {
            return err("noise_sigma and style_scale must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.class_overlap) {
            return err("data.class_overlap must be in [0, 1)".into());
        }
        if self.n_styles == 0 {
            return err("data.n_styles must be at least 1".into());
        }
        if self.vocab_needed() > model.vocab_size {
            return err(format!(
                "captions need {} tokens but the vocabulary has {}",
                self.vocab_needed(),
                model.vocab_size
            ));
        }
        if model.max_text_len < 4 {
            return err("captions need max_text_len >= 4".into());
        }
        if self.n_classes + self.n_styles + 1 > model.n_patches * model.patch_dim {
            return err("too many classes and styles to orthogonalize in the image space".into());
        }
        Ok(())
    }

    /// Training pairs per class: `⌊pairs_per_class · (1 − val_fraction)⌋`.
    pub fn train_per_class(&self) -> usize {
        (self.pairs_per_class as f64 * (1.0 - self.val_fraction)).floor() as usize
    }

    pub fn is_forget(&self, class_id: usize) -> bool {
        self.forget_classes.contains(&class_id)
    }

    pub fn class_token(&self, class_id: usize) -> usize {
        FIRST_CLASS_TOKEN + class_id
    }

    pub fn style_token(&self, style: usize) -> usize {
        FIRST_CLASS_TOKEN + self.n_classes + style
    }

    pub fn caption(&self, class_id: usize, style: usize) -> Vec<usize> {
        vec![BOS, self.class_token(class_id), self.style_token(style), EOS]
    }

    fn vocab_needed(&self) -> usize {
        FIRST_CLASS_TOKEN + self.n_classes + self.n_styles
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub class_id: usize,
    pub prototype: Tensor,
    /// Class prompt used for zero-shot classification.
    pub prompt: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub image: Tensor,
    pub tokens: Vec<usize>,
    pub class_id: usize,
    pub style: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub spec: SplitSpec,
    pub identities: Vec<Identity>,
    pub forget: Vec<Pair>,
    pub retain: Vec<Pair>,
    pub val: Vec<Pair>,
}

impl Splits {
    /// One prompt per class, indexed by class id.
    pub fn prompt_bank(&self) -> Vec<Vec<usize>> {
        self.identities.iter().map(|i| i.prompt.clone()).collect()
    }

    pub fn val_forget(&self) -> Vec<Pair> {
        self.val.iter().filter(|p| self.spec.is_forget(p.class_id)).cloned().collect()
    }

    pub fn val_retain(&self) -> Vec<Pair> {
        self.val.iter().filter(|p| !self.spec.is_forget(p.class_id)).cloned().collect()
    }

    /// Forget and retain training pairs together (the pretraining set).
    pub fn train(&self) -> Vec<Pair> {
        self.forget.iter().chain(&self.retain).cloned().collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub fn generate(spec: &SplitSpec, model: &ModelConfig) -> Result<Splits> {
    spec.validate(model)?;
    let streams = SeedStreams::new(spec.seed);
    let mut rng = streams.stream(STREAM_DATA);
    let mut noise_rng = streams.stream(STREAM_NOISE);
    let dim = model.n_patches * model.patch_dim;

    let patterns = orthonormal_patterns(spec.n_classes + spec.n_styles + 1, dim, &mut rng)?;
    let unit = (dim as f64).sqrt();
    let shape = vec![model.n_patches, model.patch_dim];
    let shared = &patterns[spec.n_classes + spec.n_styles];
    let (own, common) = ((1.0 - spec.class_overlap).sqrt(), spec.class_overlap.sqrt());
    let prototypes: Vec<Vec<f64>> = patterns[..spec.n_classes]
        .iter()
        .map(|p| p.iter().zip(shared).map(|(v, s)| (own * v + common * s) * unit).collect())
        .collect();
    let styles: Vec<Vec<f64>> = patterns[spec.n_classes..spec.n_classes + spec.n_styles]
        .iter()
        .map(|p| p.iter().map(|v| v * unit * spec.style_scale).collect())
        .collect();

    let identities = prototypes
        .iter()
        .enumerate()
        .map(|(c, p)| Identity {
            class_id: c,
            prototype: Tensor::from_parts(shape.clone(), p.clone()),
            prompt: spec.caption(c, 0),
        })
        .collect();

    let n_train = spec.train_per_class();
    let (mut forget, mut retain, mut val) = (Vec::new(), Vec::new(), Vec::new());
    for (c, proto) in prototypes.iter().enumerate() {
        for k in 0..spec.pairs_per_class {
            let style = rng.gen_range(0..spec.n_styles);
            let data: Vec<f64> = proto
                .iter()
                .zip(&styles[style])
                .map(|(p, s)| {
                    let z: f64 = StandardNormal.sample(&mut noise_rng);
                    p + s + spec.noise_sigma * z
                })
                .collect();
            let pair = Pair {
                image: Tensor::from_parts(shape.clone(), data),
                tokens: spec.caption(c, style),
                class_id: c,
                style,
            };
            match (k < n_train, spec.is_forget(c)) {
                (false, _) => val.push(pair),
                (true, true) => forget.push(pair),
                (true, false) => retain.push(pair),
            }
        }
    }
    Ok(Splits { spec: spec.clone(), identities, forget, retain, val })
}

/// `count` Gaussian vectors orthonormalized by modified Gram–Schmidt.
fn orthonormal_patterns(count: usize, dim: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let proj = tensor::dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = tensor::sum_sq(&v).sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    Ok(basis)
}

/// Class of the nearest prototype in Euclidean distance; first index wins ties.
pub fn nearest_prototype(identities: &[Identity], image: &Tensor) -> usize {
    identities
        .iter()
        .map(|id| {
            id.prototype.data().iter().zip(image.data()).fold(0.0, |acc, (a, b)| acc + (a - b) * (a - b))
        })
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, d)| if d < best.1 { (i, d) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_splits(seed: u64) -> Splits {
        let spec = SplitSpec { seed, ..SplitSpec::default() };
        generate(&spec, &ModelConfig::default()).unwrap()
    }

    #[test]
    fn split_sizes_follow_the_counting_rule() {
        let s = default_splits(0);
        // floor(64 * 0.8) = 51 training pairs per class
        assert_eq!(s.forget.len(), 51);
        assert_eq!(s.retain.len(), 9 * 51);
        assert_eq!(s.val.len(), 10 * 13);
        assert!(s.forget.iter().all(|p| p.class_id == 0));
        let mut retained: Vec<usize> = s.retain.iter().map(|p| p.class_id).collect();
        retained.dedup();
        assert_eq!(retained, (1..10).collect::<Vec<_>>());
        assert!(s.val.iter().any(|p| p.class_id == 0) && s.val.iter().any(|p| p.class_id == 9));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = serde_json::to_vec(&default_splits(5)).unwrap();
        let b = serde_json::to_vec(&default_splits(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(default_splits(5).forget[0], default_splits(6).forget[0]);
    }

    #[test]
    fn forget_set_must_be_a_proper_nonempty_subset() {
        let model = ModelConfig::default();
        let all = SplitSpec { forget_classes: (0..10).collect(), ..SplitSpec::default() };
        assert!(matches!(generate(&all, &model), Err(RazorError::Config(_))));
        let none = SplitSpec { forget_classes: vec![], ..SplitSpec::default() };
        assert!(generate(&none, &model).is_err());
        let out_of_range = SplitSpec { forget_classes: vec![10], ..SplitSpec::default() };
        assert!(generate(&out_of_range, &model).is_err());
    }

    #[test]
    fn prototypes_are_separable() {
        let s = default_splits(1);
        for id in &s.identities {
            assert_eq!(nearest_prototype(&s.identities, &id.prototype), id.class_id);
        }
        let all: Vec<&Pair> = s.forget.iter().chain(&s.retain).chain(&s.val).collect();
        let correct = all.iter().filter(|p| nearest_prototype(&s.identities, &p.image) == p.class_id).count();
        assert!(correct as f64 / all.len() as f64 >= 0.99);
    }

    #[test]
    fn forget_and_retain_captions_never_overlap() {
        let s = default_splits(2);
        for f in &s.forget {
            assert!(s.retain.iter().all(|r| r.tokens != f.tokens));
        }
    }

    #[test]
    fn json_round_trip() {
        let s = default_splits(3);
        let dir = std::env::temp_dir().join(format!("razor-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("splits.json");
        s.save_json(&path).unwrap();
        assert_eq!(Splits::load_json(&path).unwrap(), s);
        std::fs::remove_dir_all(dir).unwrap();
    }
}
