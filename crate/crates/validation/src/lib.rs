//! Acceptance report for `tlpf`; see `tests/acceptance.rs`.
