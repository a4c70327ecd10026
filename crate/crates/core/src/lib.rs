//! Empirical efficiency of selfish routing measured from location traces.
//!
//! The crate turns raw timestamped location samples into trips, groups
//! comparable trips, and measures empirical regret, the Empirical Price of
//! Anarchy and cross-day route consistency. A small nonatomic congestion-game
//! simulator with Frank-Wolfe solvers provides ground truth for validating
//! the whole pipeline.

// `!(x > 0.0)` is the NaN-rejecting guard used for every numeric parameter.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod consistency;
pub mod geo;
pub mod metrics;
pub mod parse;
pub mod pipeline;
pub mod simgame;
pub mod stats;
pub mod trace;
