//! Holds the `acceptance` test target. Run it with
//! `cargo test -p xfft-validation --test acceptance`.
