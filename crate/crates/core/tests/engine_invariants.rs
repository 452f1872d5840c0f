use std::collections::BTreeSet;

use razor_core::engine::{self, evaluation_budget, EditMode, RazorConfig, RetainFloor, TargetSpec, TraceEvent};
use razor_core::model::enumerate_components;
use razor_core::train::{self, PretrainConfig};
use razor_core::{data, Checkpoint, ModelConfig, SplitSpec, Splits};

fn tiny(seed: u64) -> (Checkpoint, Splits) {
    let cfg = ModelConfig { embed_dim: 8, n_blocks: 1, n_heads: 2, mlp_hidden: 16, n_patches: 4, patch_dim: 8, ..ModelConfig::default() };
    let spec = SplitSpec { n_classes: 4, pairs_per_class: 20, seed, ..SplitSpec::default() };
    let splits = data::generate(&spec, &cfg).unwrap();
    let init = Checkpoint::init(&cfg, seed).unwrap();
    let pc = PretrainConfig { steps: 150, step_size: 0.01, batch_size: 0, ..PretrainConfig::default() };
    (train::pretrain(&init, &splits.train(), &pc, seed).unwrap().checkpoint, splits)
}

fn component_of(name: &str, c: &Checkpoint) -> Option<String> {
    enumerate_components(c.config())
        .into_iter()
        .find(|id| id.param_names(c.config()).unwrap().iter().any(|n| n == name))
        .map(|id| id.to_string())
}

#[test]
fn trace_invariants_hold_across_seeds() {
    for seed in 0..4 {
        let (frozen, splits) = tiny(seed);
        let snapshot = frozen.clone();
        let cfg = RazorConfig::default();
        let out = engine::run(&frozen, &splits, &cfg).unwrap();
        assert_eq!(frozen, snapshot, "frozen model was modified");

        let n_components = frozen.config().component_count();
        assert!(out.trace.stage3_iterations() <= cfg.t_max.min(n_components));

        let budget = evaluation_budget(cfg.lambda_init, cfg.delta);
        let mut prev_k = None;
        for r in &out.trace.records {
            assert!(r.evaluations <= budget, "{} evaluations", r.evaluations);
            assert!(r.t <= cfg.t_max);
            if r.t > 0 && matches!(r.event, TraceEvent::Step | TraceEvent::NoStep) {
                if let Some(p) = prev_k {
                    assert_eq!(r.k.len(), p + 1, "K must grow by exactly one");
                }
                let before: BTreeSet<&String> = r.k[..r.k.len() - 1].iter().collect();
                assert!(!before.contains(r.component.as_ref().unwrap()));
                prev_k = Some(r.k.len());
            }
            if r.event == TraceEvent::NoStep {
                assert_eq!(r.lambda, 0.0);
            }
        }

        // Parameters outside edited components are bit-identical.
        let edited = out.trace.edited_components();
        for (name, t) in frozen.params() {
            let owner = component_of(name, &frozen);
            let touched = owner.as_ref().is_some_and(|o| edited.contains(o));
            if !touched {
                assert_eq!(out.edited.get(name).unwrap(), t, "{name} changed outside K");
            }
        }
        assert!(matches!(out.trace.records.last().unwrap().event, TraceEvent::TargetMet | TraceEvent::TargetNotMet));
    }
}

#[test]
fn runs_are_deterministic() {
    let (frozen, splits) = tiny(5);
    let a = engine::run(&frozen, &splits, &RazorConfig::default()).unwrap();
    let b = engine::run(&frozen, &splits, &RazorConfig::default()).unwrap();
    assert_eq!(a.edited, b.edited);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn satisfied_target_exits_stage3_at_first_iteration() {
    let (frozen, splits) = tiny(1);
    let target = TargetSpec { m1_max: 1.0, m3_max: f64::MAX, m4_min: RetainFloor::Absolute(0.0), m5_min: 0.0 };
    let out = engine::run(&frozen, &splits, &RazorConfig { target, ..RazorConfig::default() }).unwrap();
    let stage3: Vec<_> = out.trace.records.iter().filter(|r| r.t > 0).collect();
    assert_eq!(stage3.len(), 1);
    assert_eq!(stage3[0].t, 1);
    assert_eq!(stage3[0].event, TraceEvent::TargetMet);
    assert!(out.trace.target_met);
    assert_eq!(out.trace.growth_records().count(), 0);
}

#[test]
fn iteration_limit_bounds_growth() {
    let (frozen, splits) = tiny(2);
    for t_max in [1, 2] {
        let out = engine::run(&frozen, &splits, &RazorConfig { t_max, ..RazorConfig::default() }).unwrap();
        assert!(out.trace.growth_records().count() <= t_max);
        assert!(out.trace.stage3_iterations() <= t_max);
    }
}

#[test]
fn edit_modes_shape_the_trace() {
    let (frozen, splits) = tiny(3);
    let all = frozen.config().component_count();
    let nosel = engine::run(&frozen, &splits, &RazorConfig { mode: EditMode::NoSelection, ..RazorConfig::default() }).unwrap();
    let stage2: Vec<_> = nosel.trace.records.iter().filter(|r| r.t == 0 && r.component.is_some()).collect();
    assert_eq!(stage2.len(), all);
    let visited: BTreeSet<_> = stage2.iter().map(|r| r.component.clone().unwrap()).collect();
    assert_eq!(visited.len(), all);
    assert!(nosel.trace.records.iter().all(|r| r.t == 0));

    let noiter = engine::run(&frozen, &splits, &RazorConfig { mode: EditMode::NoIteration, ..RazorConfig::default() }).unwrap();
    assert!(noiter.trace.records.iter().all(|r| r.t == 0));
    assert!(noiter.trace.records.iter().filter(|r| r.component.is_some()).count() < all);
}
