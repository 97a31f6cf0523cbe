//! Split-execution serving of protected low-rank adapters: per-provider
//! adapters behind a simulated-but-cryptographically-real enclave boundary, a
//! toy backbone outside it, and the pruning, lifecycle, aggregation, and
//! scheduling machinery that composes them.

pub mod adapter;
pub mod aegisproto;
pub mod alignagg;
pub mod audit;
pub mod backbone;
pub mod crypto;
pub mod edgeprune;
pub mod enclave;
pub mod linalg;
pub mod swiftsched;

pub use adapter::{LowRankAdapter, Projection, ProviderAdapterSet, SiteId};
pub use aegisproto::{EnclaveInstance, EnclaveState, PolicyEntry, PolicyPlan, Quote};
pub use backbone::{Backbone, BackboneConfig, ForwardTrace, ToyTask};
pub use linalg::{Matrix, Vector};
pub use swiftsched::{BatchPolicy, CostModel, ExecMode, ScheduleTrace};
