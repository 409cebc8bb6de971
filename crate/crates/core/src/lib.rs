//! Numerical core for studying the expressivity of top-k linearly routed
//! mixture-of-experts layers.
//!
//! Everything in this crate is a pure function of its parameters and an
//! explicit seed. There is no IO, no clock and no global state, so the crate
//! builds without `std` (only `alloc` is required). File formats, the CLI and
//! parallel drivers live in the companion `granlab` crate.
//!
//! Module map:
//!
//! * [`moe`]: configuration, parameter storage, top-k routing, forward pass.
//! * [`constructions`]: the random routing / expert constructions and their
//!   verification reports.
//! * [`spectral`]: Jacobi SVD and symmetric eigendecomposition, Eckart–Young
//!   tails, conditioned covariance estimation.
//! * [`lemmas`]: Monte-Carlo verifiers producing [`lemmas::LemmaReport`]s.
//! * [`matching`]: greedy maximal fractional (hyper)matchings and the
//!   constant-activation error lower-bound certificate.
//! * [`trainer`]: manual-gradient teacher–student training.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod combin;
pub mod constructions;
pub mod error;
pub mod lemmas;
pub mod linalg;
pub mod matching;
pub mod moe;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use moe::{
    count_params, make_config, sample_inputs, ActiveSet, Activation, Gating, InputDistribution,
    MoeConfig, MoeLayer,
};
pub use rng::SeedStream;
