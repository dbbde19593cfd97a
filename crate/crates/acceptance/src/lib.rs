//! Holds the `acceptance` test target; run it with
//! `cargo test -p csalloc-validation --test acceptance -- --nocapture`.
