// `!(x >= 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod mix;
pub mod model;
pub mod tensor;
pub mod train;

#[cfg(feature = "fast-alloc")]
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
