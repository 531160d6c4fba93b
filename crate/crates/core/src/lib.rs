//! Core of the transfergrid benchmark.
//!
//! Everything in this crate is pure computation: the reverse-mode engine and
//! its layers, the three compact EEG decoding architectures, the training loop,
//! the linear-probing transfer protocol and the post-hoc analysis (score
//! rescaling, transfer graphs, UPGMA dendrograms, paired statistics). File
//! formats, checkpoints and the command line live in the `transfergrid` crate.
//!
//! The crate is `no_std` and only needs an allocator.
#![no_std]
#![forbid(unsafe_op_in_unsafe_fn)]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod analysis;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod models;
pub mod seed;
pub mod split;
pub mod synth;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
