// Range checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attack;
pub mod error;
pub mod glyphs;
pub mod lattice;
pub mod vault;

pub use error::{Error, Result};
