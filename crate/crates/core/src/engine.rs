//! The editing pipeline: baseline capture, saliency scoring, per-component
//! updates with bisected step sizes, and iterative growth of the edit set.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Splits;
use crate::error::{RazorError, Result};
use crate::losses::{Ablation, BaselineSims, LossWeights, MismatchVariant};
use crate::metrics::{EvalSet, Evaluator, MetricsReport};
use crate::model::{Checkpoint, ComponentId, ParamMap};
use crate::saliency::{ComponentGradients, GradientSet, SaliencyTable, ScoreParams, TauPolicy};

/// Lower bound on retain accuracy, absolute or as a share of the pre-edit value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum RetainFloor {
    Absolute(f64),
    RelativeToPre(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub m1_max: f64,
    pub m3_max: f64,
    pub m4_min: RetainFloor,
    pub m5_min: f64,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self { m1_max: 0.55, m3_max: 0.01, m4_min: RetainFloor::RelativeToPre(0.85), m5_min: 0.95 }
    }
}

impl TargetSpec {
    pub fn validate(&self) -> Result<()> {
        let floor = match self.m4_min {
            RetainFloor::Absolute(v) | RetainFloor::RelativeToPre(v) => v,
        };
        for (name, v) in [("m1_max", self.m1_max), ("m3_max", self.m3_max), ("m4_min", floor), ("m5_min", self.m5_min)] {
            if !v.is_finite() {
                return Err(RazorError::Config(format!("target.{name} must be finite")));
            }
        }
        if self.m1_max <= 0.0 {
            return Err(RazorError::Config("target.m1_max must be positive".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, pre_m4: f64) -> Result<ResolvedTarget> {
        self.validate()?;
        let m4_min = match self.m4_min {
            RetainFloor::Absolute(v) => v,
            RetainFloor::RelativeToPre(f) => f * pre_m4,
        };
        if m4_min >= 1.0 {
            return Err(RazorError::Config(format!("retain floor {m4_min} leaves no room below 1")));
        }
        Ok(ResolvedTarget { m1_max: self.m1_max, m3_max: self.m3_max, m4_min, m5_min: self.m5_min })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTarget {
    pub m1_max: f64,
    pub m3_max: f64,
    pub m4_min: f64,
    pub m5_min: f64,
}

impl ResolvedTarget {
    pub fn satisfied(&self, r: &MetricsReport) -> bool {
        r.m1 <= self.m1_max && r.m3 <= self.m3_max && r.m4 >= self.m4_min && r.m5 >= self.m5_min
    }

    /// Retention constraints a proposal must meet to be accepted.
    pub fn stable(&self, r: &MetricsReport) -> bool {
        r.m4 >= self.m4_min && r.m5 >= self.m5_min
    }

    /// Higher is better: normalized forgetting margin plus retention margin.
    pub fn score(&self, r: &MetricsReport, clip_forget: bool) -> f64 {
        let mut forget = (self.m1_max - r.m1) / self.m1_max;
        if clip_forget {
            forget = forget.max(0.0);
        }
        let retain = ((r.m4 - self.m4_min) / (1.0 - self.m4_min)).max(0.0);
        forget + retain
    }
}

/// Which update strategy to run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditMode {
    /// Initial selection, then iterative growth.
    #[default]
    Full,
    /// Initial selection only.
    NoIteration,
    /// Every component once, no growth.
    NoSelection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RazorConfig {
    pub weights: LossWeights,
    pub score: ScoreParams,
    pub tau: TauPolicy,
    pub t_max: usize,
    pub lambda_init: f64,
    pub delta: f64,
    pub target: TargetSpec,
    pub mismatch_variant: MismatchVariant,
    pub ablation: Ablation,
    pub mode: EditMode,
    pub step: StepPolicy,
}

/// How the step search ranks candidate step sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPolicy {
    /// A step must beat leaving the component unchanged.
    pub noop_incumbent: bool,
    /// Break score ties by the lower forget classification margin.
    pub margin_tiebreak: bool,
    /// Clip the forgetting term of the score at zero.
    pub clip_forget: bool,
}

impl Default for StepPolicy {
    fn default() -> Self {
        Self { noop_incumbent: true, margin_tiebreak: true, clip_forget: true }
    }
}

impl Default for RazorConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            score: ScoreParams::default(),
            tau: TauPolicy::default(),
            t_max: 6,
            lambda_init: 0.25,
            delta: 2.5e-4,
            target: TargetSpec::default(),
            mismatch_variant: MismatchVariant::default(),
            ablation: Ablation::ALL,
            mode: EditMode::Full,
            step: StepPolicy::default(),
        }
    }
}

impl RazorConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.score.validate()?;
        self.tau.validate()?;
        self.target.validate()?;
        self.ablation.validate()?;
        if self.t_max < 1 {
            return Err(RazorError::Config("t_max must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.lambda_init > self.delta && self.lambda_init.is_finite()) {
            return Err(RazorError::Config(format!(
                "need lambda_init > delta > 0, got lambda_init={} delta={}",
                self.lambda_init, self.delta
            )));
        }
        Ok(())
    }
}

/// `−λ_f·ρ·g_f + g_r + λ_m·g_m`, dropping disabled terms.
pub fn blended_gradient(
    g_f: &ParamMap,
    g_r: &ParamMap,
    g_m: &ParamMap,
    w: &LossWeights,
    ablation: Ablation,
) -> Result<ParamMap> {
    if !g_f.keys().eq(g_r.keys()) || !g_f.keys().eq(g_m.keys()) {
        return Err(RazorError::Contract("gradient maps cover different parameters".into()));
    }
    let cf = if ablation.use_forget { -w.forget_weight() } else { 0.0 };
    let cr = if ablation.use_retain { 1.0 } else { 0.0 };
    let cm = if ablation.use_mismatch { w.lambda_m } else { 0.0 };
    let mut out = ParamMap::new();
    for (name, f) in g_f {
        let (r, m) = (&g_r[name], &g_m[name]);
        if f.shape() != r.shape() || f.shape() != m.shape() {
            return Err(RazorError::Contract(format!("gradient shapes differ for {name}")));
        }
        let data = f.data().iter().zip(r.data()).zip(m.data()).map(|((f, r), m)| cf * f + cr * r + cm * m).collect();
        out.insert(name.clone(), crate::Tensor::new(f.shape().to_vec(), data)?);
    }
    Ok(out)
}

pub fn component_blend(g: &ComponentGradients, w: &LossWeights, ablation: Ablation) -> Result<ParamMap> {
    blended_gradient(&g.g_f, &g.g_r, &g.g_m, w, ablation)
}

/// Result of evaluating one candidate step size.
#[derive(Clone, Debug, PartialEq)]
pub enum Probe<T> {
    /// `tiebreak` orders proposals whose scores are equal.
    Stable { score: f64, tiebreak: f64, info: T },
    Unstable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepSearch<T> {
    pub lambda: f64,
    pub score: f64,
    /// Details of the accepted proposal; `None` when the no-op won.
    pub best: Option<T>,
    pub evaluations: usize,
    pub rejected: usize,
}

/// Upper bound on probe calls made by [`bisect_step`], counting the no-op probe.
pub fn evaluation_budget(lambda_init: f64, delta: f64) -> usize {
    (lambda_init / delta).log2().ceil() as usize + 1
}

/// Bisects `[0, λ_init]` for the best-scoring stable step.
///
/// Stable proposals raise the lower end of the interval, unstable ones
/// lower the upper end. Proposals are ranked by `(score, tiebreak)` and
/// full ties go to the larger step. With `noop_incumbent` the search first
/// probes `λ = 0` and a step must beat it strictly. Returns `λ = 0` when no
/// proposal wins.
pub fn bisect_step<T, F>(lambda_init: f64, delta: f64, noop_incumbent: bool, mut probe: F) -> Result<StepSearch<T>>
where
    F: FnMut(f64) -> Result<Probe<T>>,
{
    let mut lambda_best = 0.0;
    let mut key_best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut best = None;
    let (mut evaluations, mut rejected) = (0, 0);
    if noop_incumbent {
        evaluations += 1;
        if let Probe::Stable { score, tiebreak, .. } = probe(0.0)? {
            key_best = (score, tiebreak);
        }
    }
    let (mut lo, mut hi) = (0.0, lambda_init);
    while hi - lo > delta {
        let mid = 0.5 * (lo + hi);
        evaluations += 1;
        match probe(mid)? {
            Probe::Stable { score, tiebreak, info } => {
                let key = (score, tiebreak);
                let wins = if best.is_none() && noop_incumbent { key > key_best } else { key >= key_best };
                if wins {
                    key_best = key;
                    lambda_best = mid;
                    best = Some(info);
                }
                lo = mid;
            }
            Probe::Unstable => {
                rejected += 1;
                hi = mid;
            }
        }
    }
    Ok(StepSearch { lambda: lambda_best, score: key_best.0, best, evaluations, rejected })
}

/// Step search for one component's update `θ_l − λ·blend`.
#[allow(clippy::too_many_arguments)]
pub fn binary_search_step(
    params: &Checkpoint,
    id: ComponentId,
    blend: &ParamMap,
    evaluator: &Evaluator,
    target: &ResolvedTarget,
    lambda_init: f64,
    delta: f64,
    policy: StepPolicy,
) -> Result<StepSearch<MetricsReport>> {
    if blend.values().all(|t| t.data().iter().all(|&x| x == 0.0)) {
        return Ok(StepSearch { lambda: 0.0, score: f64::NAN, best: None, evaluations: 0, rejected: 0 });
    }
    bisect_step(lambda_init, delta, policy.noop_incumbent, |lambda| {
        let candidate = match params.apply_scaled(id, blend, -lambda) {
            Ok(c) => c,
            Err(RazorError::NonFinite(_)) => return Ok(Probe::Unstable),
            Err(e) => return Err(e),
        };
        let report = match evaluator.evaluate(&candidate, "candidate") {
            Ok(r) => r,
            Err(RazorError::NonFinite(_) | RazorError::DegenerateInput(_)) => return Ok(Probe::Unstable),
            Err(e) => return Err(e),
        };
        if target.stable(&report) {
            let tiebreak = if policy.margin_tiebreak { -report.forget_margin } else { 0.0 };
            Ok(Probe::Stable { score: target.score(&report, policy.clip_forget), tiebreak, info: report })
        } else {
            Ok(Probe::Unstable)
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceEvent {
    Step,
    NoStep,
    TargetMet,
    /// Final record of a run that ended without meeting the target.
    TargetNotMet,
    NoUsefulComponent,
    NumericInstability,
}

/// Metric values on the held-out split after an iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
    pub m5: f64,
}

impl From<&MetricsReport> for TraceMetrics {
    fn from(r: &MetricsReport) -> Self {
        Self { m1: r.m1, m2: r.m2, m3: r.m3, m4: r.m4, m5: r.m5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// 0 for the initial pass, then the growth iteration.
    pub t: usize,
    pub event: TraceEvent,
    pub k: Vec<String>,
    pub component: Option<String>,
    pub lambda: f64,
    pub evaluations: usize,
    pub rejected: usize,
    pub metrics: Option<TraceMetrics>,
    /// Saliency table in force at this record, when one was computed.
    pub phi_max: Option<f64>,
    pub phi_table_hash: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditTrace {
    pub records: Vec<TraceRecord>,
    pub target_met: bool,
}

impl EditTrace {
    /// Growth iterations that added a component.
    pub fn growth_records(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(|r| r.t > 0 && matches!(r.event, TraceEvent::Step | TraceEvent::NoStep))
    }

    pub fn stage3_iterations(&self) -> usize {
        self.records.iter().filter(|r| r.t > 0).map(|r| r.t).max().unwrap_or(0)
    }

    pub fn edited_components(&self) -> BTreeSet<String> {
        self.records.iter().filter(|r| r.event == TraceEvent::Step).filter_map(|r| r.component.clone()).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Vec<TraceRecord>> {
        text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub edited: Checkpoint,
    pub trace: EditTrace,
    /// Reporting-view metrics of the frozen model.
    pub before: MetricsReport,
    pub after: MetricsReport,
    pub target: ResolvedTarget,
    pub pre_val: MetricsReport,
    pub post_val: MetricsReport,
}

/// Similarities of the frozen model on the forget split.
pub fn stage0_baseline(frozen: &Checkpoint, splits: &Splits) -> Result<BaselineSims> {
    BaselineSims::compute(frozen, &splits.forget)
}

struct Run<'a> {
    cfg: &'a RazorConfig,
    splits: &'a Splits,
    baseline: BaselineSims,
    evaluator: Evaluator,
    target: ResolvedTarget,
    current: Checkpoint,
    trace: EditTrace,
    k: Vec<ComponentId>,
}

impl Run<'_> {
    fn gradients(&self) -> Result<Vec<ComponentGradients>> {
        GradientSet::compute(
            &self.current,
            &self.splits.retain,
            &self.splits.forget,
            &self.baseline,
            self.cfg.weights.temperature,
            self.cfg.mismatch_variant,
        )?
        .per_component(&self.current)
    }

    fn table(&self, grads: &[ComponentGradients]) -> Result<SaliencyTable> {
        SaliencyTable::build(&self.current, grads, &self.cfg.score)
    }

    fn k_names(&self) -> Vec<String> {
        self.k.iter().map(ToString::to_string).collect()
    }

    fn record(&mut self, t: usize, event: TraceEvent, table: Option<&SaliencyTable>) {
        let (phi_max, hash) = table.map(|t| (t.max_phi(), format!("{:08x}", t.fingerprint()))).unzip();
        self.trace.records.push(TraceRecord {
            t,
            event,
            k: self.k_names(),
            component: None,
            lambda: 0.0,
            evaluations: 0,
            rejected: 0,
            metrics: None,
            phi_max,
            phi_table_hash: hash,
        });
    }

    /// Applies the searched step to `id` and logs it.
    fn edit(&mut self, t: usize, id: ComponentId, grads: &[ComponentGradients], table: &SaliencyTable) -> Result<()> {
        let g = grads.iter().find(|g| g.id == id).ok_or_else(|| RazorError::Lookup(id.to_string()))?;
        let blend = component_blend(g, &self.cfg.weights, self.cfg.ablation)?;
        let search = binary_search_step(
            &self.current,
            id,
            &blend,
            &self.evaluator,
            &self.target,
            self.cfg.lambda_init,
            self.cfg.delta,
            self.cfg.step,
        )?;
        let event = if search.lambda > 0.0 {
            let mut next = self.current.apply_scaled(id, &blend, -search.lambda)?;
            next.meta.step += 1;
            self.current = next;
            TraceEvent::Step
        } else {
            TraceEvent::NoStep
        };
        self.trace.records.push(TraceRecord {
            t,
            event,
            k: self.k_names(),
            component: Some(id.to_string()),
            lambda: search.lambda,
            evaluations: search.evaluations,
            rejected: search.rejected,
            metrics: search.best.as_ref().map(TraceMetrics::from),
            phi_max: Some(table.max_phi()),
            phi_table_hash: Some(format!("{:08x}", table.fingerprint())),
        });
        Ok(())
    }

    fn stage2(&mut self, initial: Vec<ComponentId>, grads: Vec<ComponentGradients>, table: SaliencyTable) -> Result<()> {
        let (mut grads, mut table) = (grads, table);
        for (i, id) in initial.into_iter().enumerate() {
            if i > 0 {
                grads = self.gradients()?;
                table = self.table(&grads)?;
            }
            if !self.k.contains(&id) {
                self.k.push(id);
            }
            self.edit(0, id, &grads, &table)?;
        }
        Ok(())
    }

    fn stage3(&mut self) -> Result<()> {
        for t in 1..=self.cfg.t_max {
            let val = self.evaluator.evaluate(&self.current, "current")?;
            if self.target.satisfied(&val) {
                self.trace.target_met = true;
                self.record(t, TraceEvent::TargetMet, None);
                return Ok(());
            }
            let grads = match self.gradients() {
                Ok(g) => g,
                Err(RazorError::NonFinite(_)) => {
                    self.record(t, TraceEvent::NumericInstability, None);
                    return Ok(());
                }
                Err(e) => return Err(e),
            };
            let table = self.table(&grads)?;
            let chosen: BTreeSet<ComponentId> = self.k.iter().copied().collect();
            let next = table.best_excluding(&chosen).filter(|e| e.score.phi > 0.0).map(|e| e.id);
            let Some(id) = next else {
                self.record(t, TraceEvent::NoUsefulComponent, Some(&table));
                return Ok(());
            };
            self.k.push(id);
            self.edit(t, id, &grads, &table)?;
        }
        Ok(())
    }
}

/// Runs the full pipeline on `frozen`; `frozen` itself is never modified.
pub fn run(frozen: &Checkpoint, splits: &Splits, cfg: &RazorConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let baseline = stage0_baseline(frozen, splits)?;
    let evaluator = Evaluator::new(frozen, EvalSet::val(splits))?;
    let pre_val = evaluator.evaluate(frozen, "frozen")?;
    let target = cfg.target.resolve(pre_val.m4)?;
    let mut state = Run {
        cfg,
        splits,
        baseline,
        evaluator,
        target,
        current: frozen.clone(),
        trace: EditTrace::default(),
        k: Vec::new(),
    };

    let grads = state.gradients()?;
    let table = state.table(&grads)?;
    let initial = match cfg.mode {
        EditMode::NoSelection => table.entries().iter().map(|e| e.id).collect(),
        EditMode::Full | EditMode::NoIteration => table.select(cfg.tau.resolve(&table)),
    };
    state.stage2(initial, grads, table)?;
    if cfg.mode == EditMode::Full {
        state.stage3()?;
    }

    let post_val = state.evaluator.evaluate(&state.current, "edited")?;
    state.trace.target_met = target.satisfied(&post_val);
    let last = state.trace.records.last().map(|r| (r.t, r.event));
    if last.map(|(_, e)| e) != Some(TraceEvent::TargetMet) {
        let event = if state.trace.target_met { TraceEvent::TargetMet } else { TraceEvent::TargetNotMet };
        state.record(last.map_or(0, |(t, _)| t), event, None);
        if let Some(r) = state.trace.records.last_mut() {
            r.metrics = Some(TraceMetrics::from(&post_val));
        }
    }
    let reporter = Evaluator::new(frozen, EvalSet::train(splits))?;
    let before = reporter.evaluate(frozen, "frozen")?;
    let after = reporter.evaluate(&state.current, "edited")?;
    Ok(RunOutcome { edited: state.current, trace: state.trace, before, after, target, pre_val, post_val })
}
