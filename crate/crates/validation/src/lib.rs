//! Holds the `acceptance` test target; run it with `cargo test -p kanoclip-validation --test acceptance`.
