// `!(x > 0.0)` is used on purpose throughout so NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod channel;
pub mod cli;
pub mod error;
pub mod estimator;
pub mod jacobian;
pub mod montecarlo;
pub mod observation;
pub mod scenario;
