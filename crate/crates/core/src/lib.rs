//! Continual pre-training lab, core engine.
//!
//! Everything numerical lives here: a minimal dense-tensor engine with
//! reverse-mode differentiation ([`tensor`]), a tiny bidirectional
//! transformer encoder with soft-prompt prefixes ([`model`]), the
//! hypernetwork that composes per-sample prompts from a trainable
//! component bank ([`hnet`]), the pre-training objectives including the
//! agreement and disagreement regularizers ([`objectives`]), the
//! sequential multi-domain trainer ([`trainer`]), the anytime
//! fine-tuning evaluation harness ([`eval`]), and a deterministic
//! synthetic domain generator ([`synth`]).
//!
//! The crate is `no_std`-compatible (`alloc` required); file formats,
//! configuration, and the command-line interface live in the companion
//! `cpt-cli` crate. All transcendentals go through `libm` so results
//! are bit-identical across platforms and feature sets.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod eval;
pub mod hnet;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
