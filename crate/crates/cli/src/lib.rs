//! Scenario-driven serving pipeline: pruning, enclave lifecycle, scheduling,
//! revocation and audit verification, composed behind the `pkus` binary.

pub mod driver;
pub mod scenario;
