//! Configuration handling and pipeline stages behind the `panelfx` binary.

// NaN-rejecting comparisons are written as negations on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod commands;
pub mod config;
