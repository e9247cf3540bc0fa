//! Criterion benchmarks for detector fitting and scoring, the ranking
//! metrics and the toy model forward pass. Run with `cargo bench -p llmood-bench`.
