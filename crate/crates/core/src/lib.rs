//! Cost-signal poisoning of discounted LQG learners.
//!
//! The crate covers the exact control machinery ([`lqg`]), perturbation
//! bounds on the optimal policy ([`bounds`]), a small splitting solver for
//! distance-minimization programs with PSD cones ([`conic`]), attack synthesis
//! and feasibility checking ([`attack`]), and the batch and online learners
//! the attacks are aimed at ([`batch`], [`adp`]), plus configuration and
//! scripted reproduction of the benchmark ([`experiment`], [`vehicle`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adp;
pub mod attack;
pub mod batch;
pub mod bounds;
pub mod conic;
pub mod error;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod lqg;
pub mod vehicle;

pub use error::{Error, Result};
