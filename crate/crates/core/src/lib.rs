//! Operator-granular hybrid parallel DNN inference across a robot and a server.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod cli;
pub mod cost;
pub mod error;
pub mod lop;
pub mod model;
pub mod netsim;
pub mod opset;
pub mod report;
pub mod runtime;
pub mod sched;
pub mod tensor;

pub use error::{Error, Result};
