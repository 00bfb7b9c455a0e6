//! Differentiable architecture search over a forgery-oriented operator space.
//!
//! The crate is `no_std` (with `alloc`) and contains every numeric piece of
//! the pipeline: a small reverse-mode autodiff tensor engine, the central
//! difference convolution operator family, the partial-channel supernet with
//! edge normalization, the generalization-aware operation estimator, the
//! bilevel and cross-dataset search loops, the cascaded pyramid detection
//! network, a synthetic forgery generator and the evaluation metrics.
//!
//! File formats, image decoding and the command line live in the `forgenas`
//! companion crate.
#![no_std]

extern crate alloc;

pub mod c2pn;
pub mod data;
mod error;
pub mod estimator;
pub mod genotype;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod rng;
pub mod search;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
pub use genotype::{CellGenotype, Genotype};
pub use tensor::{Tape, Tensor, Var};
