//! Core numerics for weakly supervised sequence alignment with a
//! discriminative, differentiable dynamic time warping loss.
//!
//! The crate is organized around the alignment dynamic program:
//!
//! - [`softdp`] — entropy-smoothed alignment cost over monotone label-to-frame
//!   paths, its gradient (the expected alignment matrix), hard Viterbi decoding
//!   with backtrace, path constraints, and a brute-force enumeration oracle.
//! - [`loss`] — the discriminative hinge loss ranking a positive transcript
//!   against sampled negatives, plus the generative (cost-only) ablation.
//! - [`model`] — a pluggable frame classifier (reference: per-frame linear
//!   softmax), emission-distance conversion with class priors, manual
//!   backpropagation from alignment gradients into classifier parameters, and
//!   an Adam training step.
//! - [`tasks`] — alignment and segmentation inference, semi-supervised path
//!   constraints from sparse frame annotations, and evaluation metrics (frame
//!   accuracy, unit accuracy, IoD).
//!
//! Everything here is pure computation over owned values: no IO, no global
//! state, deterministic given explicit seeds. The crate builds without `std`
//! (the `alloc` crate is required); file formats and the command-line front
//! end live in the companion `d3tw` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

mod error;
pub mod loss;
pub mod mat;
pub mod model;
mod num;
pub mod softdp;
pub mod tasks;

pub use error::{Error, Result};
pub use mat::Mat;
