// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cloud;
pub mod codec;
pub mod geom;
pub mod io;
pub mod metrics;
pub mod pose;
pub mod synth;
