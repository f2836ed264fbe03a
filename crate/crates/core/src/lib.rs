//! Imputation engine for cost-efficient 2.5D spatial transcriptomics.
//!
//! One central tissue section is measured densely; every adjacent section is
//! measured on a sparse regular grid. The engine registers the central
//! section into each adjacent frame, trains a small encoder-decoder on the
//! central section, produces pseudo labels for the adjacent section, weights
//! them by an error-derived confidence map and adapts the network with
//! channel-wise affine layers before substituting the real measurements back
//! into the prediction.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, checkpoints and
//! the command line live in the companion `stdai` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod alignment;
pub mod backbone;
pub mod csg;
mod error;
pub mod filter;
pub mod metrics;
pub mod optim;
pub mod pdl;
pub mod phantom;
pub mod pipeline;
pub mod sample;
pub mod sampling;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
