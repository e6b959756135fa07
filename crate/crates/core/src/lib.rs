//! Core algorithms for text-guided zero-shot object counting.
//!
//! The crate is organized around a single pipeline: a diffusion-style
//! [`backbone`](crate::backbone) turns an image and a text prompt into a
//! four-level feature pyramid plus a stack of cross-attention maps, the
//! [`hscm`](crate::hscm) module progressively corrects text-image alignment
//! across the pyramid, and the [`counter`](crate::counter) head maps the
//! corrected features to a density map whose integral is the object count.
//! Training signals come from [`supervision`](crate::supervision): a fused
//! cross-attention map, a positive-negative-ambiguous partition of the image,
//! and a regional coherence loss on intermediate similarity maps.
//!
//! Everything here is IO-free and `no_std`-compatible (with `alloc`); file
//! formats, dataset loaders, rendering, and the CLI live in the companion
//! `t2icount` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod backbone;
pub mod config;
pub mod counter;
pub mod data;
pub mod error;
pub mod eval;
pub mod hscm;
pub mod model;
pub mod rng;
pub mod supervision;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
