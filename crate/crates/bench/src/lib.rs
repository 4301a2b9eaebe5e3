//! Benchmarks for the sparse-grid ROM trust-region kernels live in `benches/`.
