//! Compression and quantized inference for small CNN image classifiers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod eval;
pub mod graph_opt;
pub mod model;
pub mod quant;
pub mod runtime;
pub mod train;
