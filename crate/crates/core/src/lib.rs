//! Semantic segmentation with learnable class-ID dictionaries.
//!
//! A convolutional encoder produces a four-level feature pyramid that is
//! fused into a single feature map. A static dictionary holds one learnable
//! embedding per class; a modulator conditions it on the deepest pyramid
//! level to obtain a per-image dynamic dictionary. The decoder alternates
//! cross-attention between dictionary rows and pixel features for `L`
//! stages and scores every pixel against the refined class embeddings.
//!
//! The crate is `no_std` and only needs `alloc`; file formats and the CLI
//! live in the `dyndict` crate.

#![cfg_attr(not(test), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

mod error;
pub mod decoder;
pub mod dictionary;
pub mod data;
pub mod diagnostics;
pub mod encoder;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod optim;
pub mod summary;
pub mod train;

pub use error::{Error, Result};
