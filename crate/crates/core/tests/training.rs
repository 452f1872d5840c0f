use razor_core::metrics::evaluate_all;
use razor_core::train::{pretrain, PretrainConfig};
use razor_core::{data, Checkpoint, ModelConfig, SplitSpec};

#[test]
fn untrained_models_score_near_chance() {
    let cfg = ModelConfig::default();
    let spec = SplitSpec::default();
    let seeds = 0..12u64;
    let n = seeds.clone().count() as f64;
    let (mut m1, mut m4) = (0.0, 0.0);
    for seed in seeds {
        let splits = data::generate(&SplitSpec { seed, ..spec.clone() }, &cfg).unwrap();
        let init = Checkpoint::init(&cfg, seed).unwrap();
        let c = pretrain(&init, &splits.train(), &PretrainConfig { steps: 0, ..PretrainConfig::default() }, seed)
            .unwrap()
            .checkpoint;
        assert_eq!(c.params(), init.params());
        let r = evaluate_all(&c, &c, &splits, "init").unwrap();
        m1 += r.m1 / n;
        m4 += r.m4 / n;
    }
    // One forget class among 10 prompts; 9 retain classes.
    assert!((m1 - 0.1).abs() < 0.15, "mean M1 {m1}");
    assert!((m4 - 1.0 / 9.0).abs() < 0.15, "mean M4 {m4}");
}

#[test]
fn pretraining_is_deterministic_and_reduces_the_loss() {
    let cfg = ModelConfig { embed_dim: 8, n_blocks: 1, n_heads: 2, mlp_hidden: 16, ..ModelConfig::default() };
    let spec = SplitSpec { n_classes: 4, pairs_per_class: 20, ..SplitSpec::default() };
    let splits = data::generate(&spec, &cfg).unwrap();
    let init = Checkpoint::init(&cfg, 3).unwrap();
    let pc = PretrainConfig { steps: 60, step_size: 0.01, batch_size: 16, ..PretrainConfig::default() };
    let a = pretrain(&init, &splits.train(), &pc, 3).unwrap();
    let b = pretrain(&init, &splits.train(), &pc, 3).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.losses.len(), 60);
    assert_eq!(a.checkpoint.meta.step, 60);
    let head: f64 = a.losses[..10].iter().sum();
    let tail: f64 = a.losses[50..].iter().sum();
    assert!(tail < head, "{head} -> {tail}");
}
