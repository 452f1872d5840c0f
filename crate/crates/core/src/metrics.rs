//! Evaluation metrics M1–M5 and the serialized report.
//!
//! - M1: forget-class zero-shot accuracy (lower is better after editing)
//! - M2: mean forget image–caption cosine
//! - M3: mean squared similarity drift on held-out retain pairs
//! - M4: retain-class zero-shot accuracy
//! - M5: `1 − |Util_after − Util_before|` with retrieval accuracy as utility

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Pair, Splits};
use crate::error::{RazorError, Result};
use crate::model::{embed_images, embed_texts, Checkpoint};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp,
    Q8,
    Q4,
}

impl Precision {
    pub fn from_bits(bits: Option<u8>) -> Result<Self> {
        match bits {
            None => Ok(Precision::Fp),
            Some(8) => Ok(Precision::Q8),
            Some(4) => Ok(Precision::Q4),
            Some(b) => Err(RazorError::Config(format!("unsupported quantization width {b}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Fp => "fp",
            Precision::Q8 => "q8",
            Precision::Q4 => "q4",
        }
    }
}

fn nonempty(pairs: &[Pair], what: &str) -> Result<()> {
    if pairs.is_empty() {
        return Err(RazorError::Input(format!("{what} split is empty")));
    }
    Ok(())
}

fn image_embeddings(c: &Checkpoint, pairs: &[Pair]) -> Result<Tensor> {
    let images: Vec<&Tensor> = pairs.iter().map(|p| &p.image).collect();
    embed_images(c, &images)
}

fn caption_embeddings(c: &Checkpoint, pairs: &[Pair]) -> Result<Tensor> {
    let captions: Vec<&[usize]> = pairs.iter().map(|p| p.tokens.as_slice()).collect();
    embed_texts(c, &captions)
}

fn bank_embeddings(c: &Checkpoint, bank: &[Vec<usize>]) -> Result<Tensor> {
    let prompts: Vec<&[usize]> = bank.iter().map(Vec::as_slice).collect();
    embed_texts(c, &prompts)
}

/// `[n_images × n_texts]` dot products of unit embeddings.
pub fn similarity_matrix(images: &Tensor, texts: &Tensor) -> Result<Tensor> {
    images.matmul(&texts.transpose()?)
}

fn row_sims(images: &Tensor, texts: &Tensor) -> Vec<f64> {
    let (n, _) = images.dims2();
    (0..n).map(|i| tensor::dot(images.row(i), texts.row(i))).collect()
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    let (n, k) = logits.dims2();
    if n != labels.len() {
        return Err(RazorError::Dimension(format!("{n} logit rows for {} labels", labels.len())));
    }
    if n == 0 {
        return Err(RazorError::Input("no samples to score".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(RazorError::Input(format!("label {l} outside {k} classes")));
    }
    Ok(())
}

/// Fraction of rows whose own label attains the maximum (ties count as hits).
pub fn tie_inclusive_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = logits.row(i);
            row.iter().all(|&x| x <= row[l])
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean over rows of `logit[label] − max_{j≠label} logit[j]`.
pub fn mean_margin(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let margins: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let row = logits.row(i);
            let other = row.iter().enumerate().filter(|&(j, _)| j != l).fold(f64::NEG_INFINITY, |m, (_, &x)| m.max(x));
            row[l] - other
        })
        .collect();
    Ok(mean(&margins))
}

/// Fraction of rows whose first-index argmax equals the label.
pub fn argmax_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let hits = labels.iter().enumerate().filter(|&(i, &l)| argmax(logits.row(i)) == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = j;
        }
    }
    best
}

/// Share of forget images still classified as their (forget) class.
pub fn m1_forget_accuracy(c: &Checkpoint, forget: &[Pair], bank: &[Vec<usize>]) -> Result<f64> {
    nonempty(forget, "forget")?;
    let logits = similarity_matrix(&image_embeddings(c, forget)?, &bank_embeddings(c, bank)?)?;
    let labels: Vec<usize> = forget.iter().map(|p| p.class_id).collect();
    tie_inclusive_accuracy(&logits, &labels)
}

pub fn m2_forget_cosine(c: &Checkpoint, forget: &[Pair]) -> Result<f64> {
    nonempty(forget, "forget")?;
    let sims = row_sims(&image_embeddings(c, forget)?, &caption_embeddings(c, forget)?);
    Ok(mean(&sims))
}

pub fn pair_sims(c: &Checkpoint, pairs: &[Pair]) -> Result<Vec<f64>> {
    nonempty(pairs, "probe")?;
    Ok(row_sims(&image_embeddings(c, pairs)?, &caption_embeddings(c, pairs)?))
}

/// Mean squared difference of two aligned similarity lists.
pub fn mean_squared_drift(before: &[f64], after: &[f64]) -> Result<f64> {
    if before.len() != after.len() {
        return Err(RazorError::Contract(format!(
            "drift over {} and {} similarities",
            before.len(),
            after.len()
        )));
    }
    if before.is_empty() {
        return Err(RazorError::Input("no similarities to compare".into()));
    }
    let sq: Vec<f64> = before.iter().zip(after).map(|(b, a)| (a - b) * (a - b)).collect();
    Ok(mean(&sq))
}

pub fn m3_privleak(before: &Checkpoint, after: &Checkpoint, probe: &[Pair]) -> Result<f64> {
    if before.config() != after.config() {
        return Err(RazorError::Contract("checkpoints have different model configs".into()));
    }
    mean_squared_drift(&pair_sims(before, probe)?, &pair_sims(after, probe)?)
}

pub fn m4_retain_accuracy(c: &Checkpoint, retain: &[Pair], bank: &[Vec<usize>]) -> Result<f64> {
    nonempty(retain, "retain")?;
    let logits = similarity_matrix(&image_embeddings(c, retain)?, &bank_embeddings(c, bank)?)?;
    let labels: Vec<usize> = retain.iter().map(|p| p.class_id).collect();
    argmax_accuracy(&logits, &labels)
}

/// Image→caption top-1 retrieval accuracy within `pairs`.
///
/// Captions are shared between pairs of the same class and style, so a tie
/// with the image's own caption counts as a hit.
pub fn retrieval_utility(c: &Checkpoint, pairs: &[Pair]) -> Result<f64> {
    nonempty(pairs, "retrieval")?;
    utility_from_embeddings(&image_embeddings(c, pairs)?, &caption_embeddings(c, pairs)?)
}

fn utility_from_embeddings(images: &Tensor, captions: &Tensor) -> Result<f64> {
    let sims = similarity_matrix(images, captions)?;
    let labels: Vec<usize> = (0..images.dims2().0).collect();
    tie_inclusive_accuracy(&sims, &labels)
}

pub fn m5_stability(util_before: f64, util_after: f64) -> f64 {
    (1.0 - (util_after - util_before).abs()).clamp(0.0, 1.0)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Which pairs each metric is computed on.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub name: String,
    pub forget: Vec<Pair>,
    pub retain: Vec<Pair>,
    /// Retain-class pairs for M3.
    pub probe: Vec<Pair>,
    /// Forget-class pairs for the diagnostic drift column.
    pub probe_forget: Vec<Pair>,
    pub bank: Vec<Vec<usize>>,
}

impl EvalSet {
    /// Reporting view: training forget/retain splits, held-out probes.
    pub fn train(splits: &Splits) -> Self {
        Self {
            name: "train".into(),
            forget: splits.forget.clone(),
            retain: splits.retain.clone(),
            probe: splits.val_retain(),
            probe_forget: splits.forget.clone(),
            bank: splits.prompt_bank(),
        }
    }

    /// Held-out view used for step selection and target checks.
    pub fn val(splits: &Splits) -> Self {
        Self {
            name: "val".into(),
            forget: splits.val_forget(),
            retain: splits.val_retain(),
            probe: splits.val_retain(),
            probe_forget: splits.val_forget(),
            bank: splits.prompt_bank(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub forget: String,
    pub retain: String,
    pub probe: String,
}

/// Metrics as percentages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentColumns {
    pub m1_pct: f64,
    pub m2_pct: f64,
    pub m3_pct: f64,
    pub m4_pct: f64,
    pub m5_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    /// Drift on forget-class pairs; diagnostic only.
    pub m3_forget: f64,
    /// Mean of own-prompt similarity minus best other-prompt similarity
    /// over forget images; positive while they are still recognized.
    pub forget_margin: f64,
    pub m4: f64,
    pub m5: f64,
    pub util_before: f64,
    pub util_after: f64,
    pub splits: SplitIds,
    pub checkpoint: String,
    pub precision: Precision,
    pub percent: PercentColumns,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Evaluates edited checkpoints against one fixed reference checkpoint,
/// caching everything that depends only on the reference.
#[derive(Clone, Debug)]
pub struct Evaluator {
    set: EvalSet,
    util_before: f64,
    probe_before: Vec<f64>,
    probe_forget_before: Vec<f64>,
    config: crate::model::ModelConfig,
}

impl Evaluator {
    pub fn new(before: &Checkpoint, set: EvalSet) -> Result<Self> {
        nonempty(&set.forget, "forget")?;
        nonempty(&set.retain, "retain")?;
        let util_before = retrieval_utility(before, &set.retain)?;
        let probe_before = pair_sims(before, &set.probe)?;
        let probe_forget_before = pair_sims(before, &set.probe_forget)?;
        Ok(Self { set, util_before, probe_before, probe_forget_before, config: before.config().clone() })
    }

    pub fn set(&self) -> &EvalSet {
        &self.set
    }

    pub fn util_before(&self) -> f64 {
        self.util_before
    }

    pub fn evaluate(&self, after: &Checkpoint, checkpoint: &str) -> Result<MetricsReport> {
        if after.config() != &self.config {
            return Err(RazorError::Contract("checkpoints have different model configs".into()));
        }
        let s = &self.set;
        let bank = bank_embeddings(after, &s.bank)?;

        let fv = image_embeddings(after, &s.forget)?;
        let ft = caption_embeddings(after, &s.forget)?;
        let f_labels: Vec<usize> = s.forget.iter().map(|p| p.class_id).collect();
        let f_logits = similarity_matrix(&fv, &bank)?;
        let m1 = tie_inclusive_accuracy(&f_logits, &f_labels)?;
        let forget_margin = mean_margin(&f_logits, &f_labels)?;
        let m2 = mean(&row_sims(&fv, &ft));

        let rv = image_embeddings(after, &s.retain)?;
        let rt = caption_embeddings(after, &s.retain)?;
        let r_labels: Vec<usize> = s.retain.iter().map(|p| p.class_id).collect();
        let m4 = argmax_accuracy(&similarity_matrix(&rv, &bank)?, &r_labels)?;
        let util_after = utility_from_embeddings(&rv, &rt)?;
        let m5 = m5_stability(self.util_before, util_after);

        let m3 = mean_squared_drift(&self.probe_before, &pair_sims(after, &s.probe)?)?;
        let m3_forget = mean_squared_drift(&self.probe_forget_before, &pair_sims(after, &s.probe_forget)?)?;

        let precision = Precision::from_bits(after.meta.quant_bits)?;
        Ok(MetricsReport {
            m1,
            m2,
            m3,
            m3_forget,
            forget_margin,
            m4,
            m5,
            util_before: self.util_before,
            util_after,
            splits: SplitIds {
                forget: format!("{}.forget", s.name),
                retain: format!("{}.retain", s.name),
                probe: format!("{}.probe", s.name),
            },
            checkpoint: checkpoint.to_string(),
            precision,
            percent: PercentColumns {
                m1_pct: m1 * 100.0,
                m2_pct: m2 * 100.0,
                m3_pct: m3 * 100.0,
                m4_pct: m4 * 100.0,
                m5_pct: m5 * 100.0,
            },
        })
    }
}

/// Reporting-view metrics of `after` relative to `before`.
pub fn evaluate_all(before: &Checkpoint, after: &Checkpoint, splits: &Splits, checkpoint: &str) -> Result<MetricsReport> {
    Evaluator::new(before, EvalSet::train(splits))?.evaluate(after, checkpoint)
}

/// One row of a sweep grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub scenario: String,
    pub precision: Precision,
    #[serde(rename = "M1")]
    pub m1: f64,
    #[serde(rename = "M2")]
    pub m2: f64,
    #[serde(rename = "M3")]
    pub m3: f64,
    #[serde(rename = "M4")]
    pub m4: f64,
    #[serde(rename = "M5")]
    pub m5: f64,
}

impl GridRow {
    pub fn new(scenario: impl Into<String>, r: &MetricsReport) -> Self {
        Self { scenario: scenario.into(), precision: r.precision, m1: r.m1, m2: r.m2, m3: r.m3, m4: r.m4, m5: r.m5 }
    }
}

pub fn write_grid<W: Write>(out: W, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn forget_accuracy_counts_ties_as_hits() {
        let logits = m(&[vec![0.5, 0.5], vec![0.4, 0.6], vec![0.9, 0.1]]);
        assert!((tie_inclusive_accuracy(&logits, &[0, 0, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(argmax_accuracy(&logits, &[0, 0, 0]).unwrap(), 2.0 / 3.0);
        assert_eq!(argmax_accuracy(&logits, &[1, 1, 1]).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn accuracy_is_scale_invariant() {
        let logits = m(&[vec![0.1, 0.7, -0.2], vec![0.3, 0.2, 0.25]]);
        let scaled = m(&[vec![1.0, 7.0, -2.0], vec![3.0, 2.0, 2.5]]);
        for labels in [[1, 0], [0, 2]] {
            assert_eq!(argmax_accuracy(&logits, &labels).unwrap(), argmax_accuracy(&scaled, &labels).unwrap());
            assert_eq!(
                tie_inclusive_accuracy(&logits, &labels).unwrap(),
                tie_inclusive_accuracy(&scaled, &labels).unwrap()
            );
        }
    }

    #[test]
    fn label_errors() {
        let logits = m(&[vec![0.1, 0.7]]);
        assert!(matches!(argmax_accuracy(&logits, &[2]), Err(RazorError::Input(_))));
        assert!(matches!(argmax_accuracy(&logits, &[0, 1]), Err(RazorError::Dimension(_))));
    }

    #[test]
    fn drift_arithmetic() {
        assert_eq!(mean_squared_drift(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
        let d = mean_squared_drift(&[0.5, 0.5, 0.5], &[0.6, 0.6, 0.6]).unwrap();
        assert!((d - 0.01).abs() < 1e-15);
        let d = mean_squared_drift(&[0.5, 0.5], &[0.6, 0.4]).unwrap();
        assert!((d - 0.01).abs() < 1e-15);
        assert!(matches!(mean_squared_drift(&[0.1], &[0.1, 0.2]), Err(RazorError::Contract(_))));
    }

    #[test]
    fn stability_formula() {
        assert_eq!(m5_stability(0.7, 0.7), 1.0);
        assert!((m5_stability(0.9, 0.8) - 0.9).abs() < 1e-15);
        assert_eq!(m5_stability(0.0, 1.0), 0.0);
    }

    #[test]
    fn precision_tags() {
        assert_eq!(Precision::from_bits(None).unwrap(), Precision::Fp);
        assert_eq!(Precision::from_bits(Some(8)).unwrap().as_str(), "q8");
        assert_eq!(serde_json::to_string(&Precision::Q4).unwrap(), "\"q4\"");
        assert!(Precision::from_bits(Some(2)).is_err());
    }

    #[test]
    fn grid_csv_columns() {
        let row = GridRow {
            scenario: "full".into(),
            precision: Precision::Q8,
            m1: 0.1,
            m2: 0.2,
            m3: 0.0,
            m4: 0.9,
            m5: 1.0,
        };
        let mut buf = Vec::new();
        write_grid(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "scenario,precision,M1,M2,M3,M4,M5");
        assert_eq!(text.lines().nth(1).unwrap(), "full,q8,0.1,0.2,0.0,0.9,1.0");
    }
}
