//! The five subcommands. Each `cmd_*` computes, writes its artifacts under
//! the output directory and returns what it wrote about.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use razor_core::engine::{self, EditMode, RunOutcome};
use razor_core::metrics::{self, EvalSet, Evaluator, GridRow, MetricsReport};
use razor_core::quantize::{self, QuantSpec};
use razor_core::{data, persist, train, Ablation, Checkpoint, Splits};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const PRETRAINED_FILE: &str = "pretrained.rzck";
pub const EDITED_FILE: &str = "edited.rzck";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const LOG_FILE: &str = "run.log";

/// Convergence bar for `pretrain`.
pub const PRETRAIN_MIN_M1: f64 = 0.9;
pub const PRETRAIN_MIN_M4: f64 = 0.9;

/// Plain-text sidecar log. The only place timestamps are written.
pub struct RunLog {
    file: File,
}

impl RunLog {
    pub fn open(dir: &Path) -> CliResult<Self> {
        let file = OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?;
        Ok(Self { file })
    }

    pub fn line(&mut self, msg: &str) {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        // A failing log write must not fail the run.
        let _ = writeln!(self.file, "[{secs}] {msg}");
    }
}

pub fn prepare_output(dir: &Path) -> CliResult<RunLog> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("output dir {}: {e}", dir.display())))?;
    RunLog::open(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(razor_core::RazorError::from)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r).map_err(razor_core::RazorError::from)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Ok(persist::load(path)?)
}

/// Splits for an existing checkpoint, generated with its model shape.
pub fn splits_for(cfg: &RunConfig, c: &Checkpoint) -> CliResult<Splits> {
    Ok(data::generate(&cfg.data, c.config())?)
}

#[derive(Clone, Debug)]
pub struct PretrainResult {
    pub checkpoint: Checkpoint,
    pub train: MetricsReport,
    pub val: MetricsReport,
    pub losses: Vec<f64>,
}

impl PretrainResult {
    pub fn converged(&self) -> bool {
        self.train.m1 >= PRETRAIN_MIN_M1 && self.train.m4 >= PRETRAIN_MIN_M4
    }
}

/// Initializes and trains a model; writes nothing.
pub fn pretrain(cfg: &RunConfig) -> CliResult<PretrainResult> {
    cfg.validate()?;
    let splits = data::generate(&cfg.data, &cfg.model)?;
    let init = Checkpoint::init(&cfg.model, cfg.seed)?;
    let out = train::pretrain(&init, &splits.train(), &cfg.pretrain, cfg.seed)?;
    let c = out.checkpoint;
    let train = Evaluator::new(&c, EvalSet::train(&splits))?.evaluate(&c, PRETRAINED_FILE)?;
    let val = Evaluator::new(&c, EvalSet::val(&splits))?.evaluate(&c, PRETRAINED_FILE)?;
    Ok(PretrainResult { checkpoint: c, train, val, losses: out.losses })
}

#[derive(Serialize)]
struct PretrainSummary<'a> {
    seed: u64,
    steps: usize,
    first_loss: Option<f64>,
    final_loss: Option<f64>,
    converged: bool,
    train: &'a MetricsReport,
    val: &'a MetricsReport,
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> CliResult<PretrainResult> {
    let mut log = prepare_output(out)?;
    log.line(&format!("pretrain seed={} steps={}", cfg.seed, cfg.pretrain.steps));
    let r = pretrain(cfg)?;
    persist::save(&r.checkpoint, &out.join(PRETRAINED_FILE))?;
    let summary = PretrainSummary {
        seed: cfg.seed,
        steps: cfg.pretrain.steps,
        first_loss: r.losses.first().copied(),
        final_loss: r.losses.last().copied(),
        converged: r.converged(),
        train: &r.train,
        val: &r.val,
    };
    write_json(&out.join("pretrain_metrics.json"), &summary)?;
    let rows: Vec<LossRow> = r.losses.iter().enumerate().map(|(step, &loss)| LossRow { step, loss }).collect();
    write_csv(&out.join("pretrain_losses.csv"), &rows)?;
    log.line(&format!("pretrain M1={:.4} M4={:.4} converged={}", r.train.m1, r.train.m4, r.converged()));
    if !r.converged() {
        return Err(CliError::NotConverged(format!(
            "M1={:.4} M4={:.4}, need both >= {PRETRAIN_MIN_M1}; metrics in {}",
            r.train.m1,
            r.train.m4,
            out.join("pretrain_metrics.json").display()
        )));
    }
    Ok(r)
}

#[derive(Serialize)]
struct UnlearnSummary<'a> {
    seed: u64,
    target_met: bool,
    target: &'a engine::ResolvedTarget,
    edited_components: Vec<String>,
    stage3_iterations: usize,
    pre_val: &'a MetricsReport,
    post_val: &'a MetricsReport,
}

pub fn unlearn(cfg: &RunConfig, frozen: &Checkpoint) -> CliResult<RunOutcome> {
    cfg.validate()?;
    let splits = splits_for(cfg, frozen)?;
    Ok(engine::run(frozen, &splits, &cfg.razor)?)
}

pub fn cmd_unlearn(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> CliResult<RunOutcome> {
    let mut log = prepare_output(out)?;
    let frozen = load_checkpoint(checkpoint)?;
    log.line(&format!("unlearn {} seed={}", checkpoint.display(), cfg.seed));
    if frozen.meta.seed != cfg.seed {
        log.line(&format!("warning: checkpoint was trained with seed {}", frozen.meta.seed));
    }
    let r = unlearn(cfg, &frozen)?;
    persist::save(&r.edited, &out.join(EDITED_FILE))?;
    let mut trace = BufWriter::new(File::create(out.join(TRACE_FILE))?);
    r.trace.write_jsonl(&mut trace)?;
    trace.flush()?;
    write_json(&out.join("before.json"), &r.before)?;
    write_json(&out.join("after.json"), &r.after)?;
    let summary = UnlearnSummary {
        seed: cfg.seed,
        target_met: r.trace.target_met,
        target: &r.target,
        edited_components: r.trace.edited_components().into_iter().collect(),
        stage3_iterations: r.trace.stage3_iterations(),
        pre_val: &r.pre_val,
        post_val: &r.post_val,
    };
    write_json(&out.join("summary.json"), &summary)?;
    let flag = if r.trace.target_met { "target-met" } else { "target-not-met" };
    log.line(&format!("unlearn done: {flag} M1 {:.4}->{:.4} M4 {:.4}->{:.4}", r.before.m1, r.after.m1, r.before.m4, r.after.m4));
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuantRow {
    pub precision: metrics::Precision,
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
    /// `|M1 − M1_fp|`.
    #[serde(rename = "M1_drift")]
    pub m1_drift: f64,
    /// RMS weight error of the quantization pass; 0 for fp.
    pub weight_rms: f64,
}

#[derive(Clone, Debug)]
pub struct QuantEval {
    pub rows: Vec<QuantRow>,
    pub reports: Vec<MetricsReport>,
}

/// Metrics of `c` at fp, 8 and 4 bits, all against `reference`.
pub fn quant_eval(cfg: &RunConfig, c: &Checkpoint, reference: &Checkpoint) -> CliResult<QuantEval> {
    cfg.validate()?;
    let splits = splits_for(cfg, c)?;
    let eval = Evaluator::new(reference, EvalSet::train(&splits))?;
    let fp = eval.evaluate(c, "fp")?;
    let mut rows = Vec::new();
    let mut reports = vec![fp.clone()];
    let row = |r: &MetricsReport, rms: f64| QuantRow {
        precision: r.precision,
        m1: r.m1,
        m2: r.m2,
        m3: r.m3,
        m4: r.m4,
        m5: r.m5,
        m1_drift: (r.m1 - fp.m1).abs(),
        weight_rms: rms,
    };
    rows.push(row(&fp, 0.0));
    for spec in [QuantSpec::Q8, QuantSpec::Q4] {
        let q = quantize::quantize(c, spec)?;
        let r = eval.evaluate(&q, &format!("q{}", spec.bits()))?;
        rows.push(row(&r, quantize::quant_error(c, spec).rms));
        reports.push(r);
    }
    Ok(QuantEval { rows, reports })
}

pub fn cmd_quant_eval(cfg: &RunConfig, checkpoint: &Path, reference: Option<&Path>, out: &Path) -> CliResult<QuantEval> {
    let mut log = prepare_output(out)?;
    let c = load_checkpoint(checkpoint)?;
    let reference = match reference {
        Some(p) => load_checkpoint(p)?,
        None => {
            log.line("no --reference given; M3 and M5 are measured against the checkpoint itself");
            c.clone()
        }
    };
    let q = quant_eval(cfg, &c, &reference)?;
    write_csv(&out.join("quant.csv"), &q.rows)?;
    for r in &q.reports {
        write_json(&out.join(format!("quant_{}.json", r.precision.as_str())), r)?;
    }
    log.line(&format!("quant-eval {}: q8 drift {:.4}, q4 drift {:.4}", checkpoint.display(), q.rows[1].m1_drift, q.rows[2].m1_drift));
    Ok(q)
}

/// The six ablation scenarios, in grid order.
pub fn ablation_scenarios(base: &engine::RazorConfig) -> Vec<(&'static str, engine::RazorConfig)> {
    let with = |ablation: Ablation, mode: EditMode| engine::RazorConfig { ablation, mode, ..*base };
    vec![
        ("without-retain", with(Ablation::WITHOUT_RETAIN, EditMode::Full)),
        ("without-mismatch", with(Ablation::WITHOUT_MISMATCH, EditMode::Full)),
        ("without-forget", with(Ablation::WITHOUT_FORGET, EditMode::Full)),
        ("no-selection", with(Ablation::ALL, EditMode::NoSelection)),
        ("no-iteration", with(Ablation::ALL, EditMode::NoIteration)),
        ("full", with(Ablation::ALL, EditMode::Full)),
    ]
}

#[derive(Clone, Debug)]
pub struct Ablate {
    pub pre: MetricsReport,
    pub rows: Vec<GridRow>,
    pub outcomes: Vec<RunOutcome>,
}

pub fn ablate(cfg: &RunConfig, frozen: &Checkpoint) -> CliResult<Ablate> {
    cfg.validate()?;
    let splits = splits_for(cfg, frozen)?;
    let (mut rows, mut outcomes) = (Vec::new(), Vec::new());
    for (name, rc) in ablation_scenarios(&cfg.razor) {
        let r = engine::run(frozen, &splits, &rc)?;
        rows.push(GridRow::new(name, &r.after));
        outcomes.push(r);
    }
    let pre = outcomes[0].before.clone();
    Ok(Ablate { pre, rows, outcomes })
}

pub fn cmd_ablate(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> CliResult<Ablate> {
    let mut log = prepare_output(out)?;
    let frozen = load_checkpoint(checkpoint)?;
    log.line(&format!("ablate {} seed={}", checkpoint.display(), cfg.seed));
    let a = ablate(cfg, &frozen)?;
    let mut file = BufWriter::new(File::create(out.join("ablation.csv"))?);
    metrics::write_grid(&mut file, &a.rows)?;
    file.flush()?;
    write_json(&out.join("ablation_pre.json"), &a.pre)?;
    for row in &a.rows {
        log.line(&format!("{}: M1={:.4} M4={:.4} M5={:.4}", row.scenario, row.m1, row.m4, row.m5));
    }
    Ok(a)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda_init: f64,
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

pub const DEFAULT_SWEEP: [f64; 5] = [1.0, 0.5, 0.25, 0.1, 0.01];

/// One full run per `λ_init`, sorted by `λ_init` descending.
pub fn sweep_lr(cfg: &RunConfig, frozen: &Checkpoint, lambdas: &[f64]) -> CliResult<Vec<SweepRow>> {
    cfg.validate()?;
    if lambdas.is_empty() {
        return Err(CliError::Usage("sweep-lr needs at least one lambda".into()));
    }
    let splits = splits_for(cfg, frozen)?;
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut rows = Vec::with_capacity(sorted.len());
    for lambda_init in sorted {
        let rc = engine::RazorConfig { lambda_init, ..cfg.razor };
        let a = engine::run(frozen, &splits, &rc)?.after;
        rows.push(SweepRow { lambda_init, m1: a.m1, m2: a.m2, m3: a.m3, m4: a.m4, m5: a.m5 });
    }
    Ok(rows)
}

pub fn cmd_sweep_lr(cfg: &RunConfig, checkpoint: &Path, lambdas: &[f64], out: &Path) -> CliResult<Vec<SweepRow>> {
    let mut log = prepare_output(out)?;
    let frozen = load_checkpoint(checkpoint)?;
    log.line(&format!("sweep-lr {} over {lambdas:?}", checkpoint.display()));
    let rows = sweep_lr(cfg, &frozen, lambdas)?;
    write_csv(&out.join("sweep_lr.csv"), &rows)?;
    Ok(rows)
}

/// Output directory: the flag wins over the config's `output_dir`.
pub fn output_dir(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    flag.map_or_else(|| cfg.output_dir.clone(), Path::to_path_buf)
}
