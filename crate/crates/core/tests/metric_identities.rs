use proptest::prelude::*;

use razor_core::metrics::{self, argmax_accuracy, m5_stability, tie_inclusive_accuracy, EvalSet, Evaluator};
use razor_core::{data, Checkpoint, ModelConfig, SplitSpec, Tensor};

fn small() -> (ModelConfig, SplitSpec) {
    let cfg = ModelConfig { embed_dim: 8, n_blocks: 1, n_heads: 2, mlp_hidden: 8, ..ModelConfig::default() };
    let spec = SplitSpec { n_classes: 4, pairs_per_class: 10, ..SplitSpec::default() };
    (cfg, spec)
}

#[test]
fn self_comparison_has_no_drift_and_full_stability() {
    let (cfg, spec) = small();
    for seed in 0..5 {
        let splits = data::generate(&SplitSpec { seed, ..spec.clone() }, &cfg).unwrap();
        let c = Checkpoint::init(&cfg, seed).unwrap();
        for set in [EvalSet::train(&splits), EvalSet::val(&splits)] {
            let r = Evaluator::new(&c, set).unwrap().evaluate(&c, "self").unwrap();
            assert_eq!(r.m3, 0.0);
            assert_eq!(r.m3_forget, 0.0);
            assert_eq!(r.m5, 1.0);
        }
        assert_eq!(metrics::m3_privleak(&c, &c, &splits.val_retain()).unwrap(), 0.0);
    }
}

proptest! {
    #[test]
    fn stability_of_equal_utilities_is_one(u in 0.0f64..=1.0) {
        prop_assert_eq!(m5_stability(u, u), 1.0);
    }

    #[test]
    fn accuracies_are_invariant_to_positive_rescaling(
        vals in prop::collection::vec(-1.0f64..1.0, 12),
        labels in prop::collection::vec(0usize..4, 3),
        k in 0.01f64..100.0,
    ) {
        let logits = Tensor::new(vec![3, 4], vals.clone()).unwrap();
        let scaled = Tensor::new(vec![3, 4], vals.iter().map(|x| x * k).collect()).unwrap();
        prop_assert_eq!(argmax_accuracy(&logits, &labels).unwrap(), argmax_accuracy(&scaled, &labels).unwrap());
        prop_assert_eq!(tie_inclusive_accuracy(&logits, &labels).unwrap(), tie_inclusive_accuracy(&scaled, &labels).unwrap());
    }
}

/// Every 2×3 matrix over {−1, 0, 1} with every labelling, at several
/// scales that keep integer entries exact.
#[test]
fn exhaustive_rescaling_on_a_small_grid() {
    let levels = [-1.0, 0.0, 1.0];
    for code in 0..3usize.pow(6) {
        let mut c = code;
        let vals: Vec<f64> = (0..6)
            .map(|_| {
                let v = levels[c % 3];
                c /= 3;
                v
            })
            .collect();
        let logits = Tensor::new(vec![2, 3], vals.clone()).unwrap();
        for k in [0.5, 3.0, 1024.0] {
            let scaled = Tensor::new(vec![2, 3], vals.iter().map(|x| x * k).collect()).unwrap();
            for a in 0..3 {
                for b in 0..3 {
                    let labels = [a, b];
                    assert_eq!(argmax_accuracy(&logits, &labels).unwrap(), argmax_accuracy(&scaled, &labels).unwrap());
                    assert_eq!(
                        tie_inclusive_accuracy(&logits, &labels).unwrap(),
                        tie_inclusive_accuracy(&scaled, &labels).unwrap()
                    );
                }
            }
        }
    }
}

#[test]
fn accuracy_oracles_on_ties() {
    let logits = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
    // Tie-inclusive: a tie with the own class counts.
    assert_eq!(tie_inclusive_accuracy(&logits, &[1, 2]).unwrap(), 1.0);
    // First-index argmax: row 0 -> 0, row 1 -> 1.
    assert_eq!(argmax_accuracy(&logits, &[1, 2]).unwrap(), 0.0);
    assert_eq!(argmax_accuracy(&logits, &[0, 1]).unwrap(), 1.0);
}

#[test]
fn report_json_round_trips() {
    let (cfg, spec) = small();
    let splits = data::generate(&spec, &cfg).unwrap();
    let a = Checkpoint::init(&cfg, 1).unwrap();
    let b = Checkpoint::init(&cfg, 2).unwrap();
    let r = metrics::evaluate_all(&a, &b, &splits, "b").unwrap();
    assert_eq!(metrics::MetricsReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    assert!(r.m3 > 0.0);
    for v in [r.m1, r.m4, r.m5] {
        assert!((0.0..=1.0).contains(&v));
    }
}
