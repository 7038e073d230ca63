//! Configuration, artifact formats and the staged command-line pipeline
//! around `ob-core`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod io;
pub mod pipeline;
pub mod plot;
