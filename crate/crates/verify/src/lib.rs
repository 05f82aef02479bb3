//! Acceptance gate for the learngene workspace. The checks live in
//! `tests/acceptance.rs`; this package exists so they run after every other
//! test binary in `cargo test --workspace`.
