//! Distributed estimation for varying coefficient mixed models from
//! per-partition sufficient statistics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distrib;
pub mod error;
pub mod estimator;
pub mod io;
pub mod linalg;
pub mod model;
pub mod simgen;
pub mod spline;
pub mod suffstats;

pub use error::{Result, VcmmError};
