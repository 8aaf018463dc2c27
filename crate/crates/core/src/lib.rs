//! Deterministic SIMT GPU simulator with permanent-fault injection for CNN
//! inference reliability campaigns.
//!
//! The crate is layered bottom-up:
//!
//! - [`isa`]: the mini-SASS instruction set and its assembly text format.
//! - [`simt`]: block scheduling, warp execution and the register-write hook.
//! - [`faults`]: register and functional-unit fault models as write hooks.
//! - [`cnn`]: model/dataset loading, layer compilation and the reference oracle.
//! - [`campaign`]: golden runs, fault runs, outcome classification and reports.
//! - [`cli`]: the `faultsim` command-line front-end.

pub mod campaign;
pub mod cli;
pub mod cnn;
pub mod faults;
pub mod isa;
pub mod simt;
