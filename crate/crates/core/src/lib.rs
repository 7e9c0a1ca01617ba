//! Mixture-of-universal-experts mechanisms.
//!
//! A layer-local MoE partitions experts by layer. This crate adds a shared pool
//! of universal experts reachable from several layers through a connectivity
//! map, plus everything needed to train and analyze such a model at desk scale:
//!
//! * [`topology`]: staggered rotational connectivity and the ablation variants,
//!   exposure degrees, path counts and parameter budgets.
//! * [`routing`]: masked top-k selection, the dual-pathway router with
//!   fast-weight state, and the logit bias schedules.
//! * [`balance`]: load statistics, the Switch loss, the connectivity-normalized
//!   balance loss and the Max/Mean skew metric.
//! * [`model`]: a tiny trainable language model built from these pieces with
//!   analytic gradients.
//! * [`warmstart`]: converting a layer-local MoE into a universal-expert model,
//!   and expert-weight CKA.
//!
//! The crate is `no_std` and only needs `alloc`. File formats and the CLI live
//! in the `moue` harness crate.

#![cfg_attr(not(test), no_std)]
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod balance;
mod error;
pub mod model;
pub mod numerics;
pub mod routing;
pub mod topology;
pub mod warmstart;

pub use error::{Error, Result};
pub use numerics::{Matrix, Seed};
