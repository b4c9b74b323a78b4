//! Basis transformers for multi-task tabular regression.
//!
//! Rows are unordered sets of `(column name, value)` pairs. Numbers enter and
//! leave the model as sign-magnitude bit vectors ([`smr`]), so regression is
//! trained as multi-label classification over bits.

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod metrics;
pub mod model;
pub mod run;
pub mod smr;
pub mod train;
