// Negated float comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gen;
pub mod harness;
pub mod matcore;
pub mod net;
pub mod rie;
pub mod rng;
pub mod sampling;

pub use error::{Error, Result};
pub use rng::Rng;
