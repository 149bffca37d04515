// `!(a < b)` is deliberate where NaN has to fall on the rejecting side.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod costmodel;
pub mod envsim;
pub mod error;
pub mod executor;
pub mod harness;
pub mod numerics;
pub mod scheduler;
pub mod signals;
pub mod surrogate;

pub use error::{Error, Result};
