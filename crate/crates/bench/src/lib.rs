//! Benchmark-only crate; see `benches/kernels.rs` and `bin/profile_step.rs`.
