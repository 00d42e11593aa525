//! Core library for incremental learning of end-to-end CTC speech models.
//!
//! Everything numeric lives here: a small reverse-mode autodiff tensor
//! engine ([`tensor`]), a convolution + self-attention CTC encoder
//! ([`model`]), the training objectives ([`losses`]) including
//! response-based and attention-map-based distillation, greedy decoding
//! and error metrics ([`decode`]), a deterministic synthetic task
//! generator ([`synth`]), the optimizer ([`optim`]) and the binary
//! checkpoint/dataset codecs ([`codec`]).
//!
//! The crate is `no_std` (with `alloc`); file IO, configuration and the
//! command-line harness live in the companion `ilctc-cli` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod codec;
pub mod decode;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use tensor::Tensor;
