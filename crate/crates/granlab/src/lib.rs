//! IO, parallel drivers and the command-line front end for `granlab-core`.
//!
//! * [`checkpoint`]: binary layer checkpoints (JSON header + little-endian
//!   f64 payload).
//! * [`config`]: the JSON experiment document shared by all subcommands.
//! * [`output`]: report envelopes, CSV writers, directory summaries.
//! * [`parallel`]: `GRANLAB_THREADS`-controlled sharding with fixed-order
//!   reduction.
//! * [`cli`]: subcommand implementations.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod output;
pub mod parallel;

pub use granlab_core as core;
