//! Command implementations behind the `vqkv` binary.
//!
//! Every command takes its parsed arguments and a writer, prints
//! line-delimited JSON (or a bare ratio for `ratio`) and returns a typed
//! outcome so tests can inspect results without parsing text.

pub mod commands;
