//! Criterion benchmarks for the unlearning pipeline live in `benches/`.
