//! Compression-aware mask search for small classifiers, with a
//! probabilistic certificate of robustness under semantic transformations.
//!
//! The pieces, bottom up:
//! * [`autodiff`]: a reverse-mode tape over `f64` tensors;
//! * [`model`] and [`mask`]: MLPs whose weights are scaled by broadcast masks;
//! * [`transforms`] and [`data`]: transformation spaces and datasets;
//! * [`objectives`]: the stability, ratio, consistency and sparsity terms;
//! * [`certify`]: the Chernoff–Cramér flip-probability bound;
//! * [`pipeline`]: pre-training, mask search, fine-tuning and baselines;
//! * [`config`], [`checkpoint`], [`report`], [`cli`]: files and commands.

// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod certify;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod mask;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod transforms;

pub use error::{Error, Result};
