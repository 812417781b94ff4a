//! Holds the end-to-end acceptance suite in `tests/acceptance.rs`; there is no
//! library code.
