//! Library side of the command-line front end: the config schema, the
//! experiment runner, the embedded presets, and the invariants-matrix
//! verifier. The binary in `main.rs` is a thin argument parser over these.

pub mod config;
pub mod presets;
pub mod runner;
pub mod verify;
