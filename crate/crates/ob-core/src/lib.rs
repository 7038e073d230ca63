//! Boundary-layer spectral design, reduced quadratic dynamics and fast–slow
//! realization of low-dimensional polynomial fields.
//!
//! `no_std` + `alloc`; all IO lives in the companion `ob-realize` crate.
#![no_std]
#![allow(clippy::needless_range_loop, clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod math;

pub mod control;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod profile;
pub mod realize;
pub mod reduction;
pub mod spectral;

pub use error::{Error, Result};
