//! Distortion graph representation learning for blind image quality
//! assessment, at desk scale.
//!
//! The crate is `no_std` (with `alloc`) and carries every numeric piece of
//! the pipeline: a small reverse-mode autodiff engine with Adam, a synthetic
//! distortion generator with proxy quality scores, a convolutional feature
//! extractor, the graph builder (node builder, edge builder over the line
//! graph, node/edge pooling), the type-discrimination and fuzzy level heads,
//! the training loops and the evaluation metrics. File formats, the CLI and
//! anything touching the filesystem live in the `dgrlab` crate.

#![no_std]
#![forbid(unsafe_code)]
// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod dgr;
pub mod eval;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use optim::{Adam, AdamConfig};
pub use tensor::{Tensor, TensorError};
