// Index loops read closer to the matrix formulas; negated comparisons
// reject NaN along with out-of-range values.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod cat;
pub mod cbsf;
pub mod context;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{CbsaError, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
