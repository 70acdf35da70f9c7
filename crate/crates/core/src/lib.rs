//! Off-policy evaluation in confounded partially observable environments.
//!
//! The crate is organized around tabular models with a hidden state `u` that
//! influences both the logged actions and the rewards. Behavior policies act
//! on hidden states; evaluation policies act on observable histories only.
//!
//! - [`model`]: validated model and policy containers, trajectory records,
//!   and the embedding of a decoupled model into a plain POMDP.
//! - [`oracle`]: exact population-level computations (policy values, reward
//!   distributions, conditional-probability matrices, identity checks).
//! - [`simulate`]: seeded, reproducible behavior-policy trajectory sampling.
//! - [`probtables`]: empirical conditional-probability matrices, linear
//!   solving with conditioning diagnostics, and index-set selection.
//! - [`estimators`]: proxy-based identification estimators and the
//!   importance-sampling baselines they are compared against.
//! - [`environments`]: packaged synthetic environments and seeded random
//!   model generators with certified invertibility.
//!
//! The crate is `no_std`-compatible (`--no-default-features --features libm`);
//! all containers allocate through `alloc`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(not(any(feature = "std", feature = "libm")))]
compile_error!("ope-core requires either the `std` or the `libm` feature");

pub mod environments;
pub mod error;
pub mod estimators;
pub(crate) mod math;
pub mod model;
pub mod oracle;
pub mod probtables;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{
    BehaviorPolicy, EvaluationPolicy, MemorylessPolicy, ModelKind, ModelRef, ObservableRecord,
    SpaceSpec, TabularDpomdp, TabularPomdp, Trajectory,
};
