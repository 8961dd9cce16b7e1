//! Core numerics for capsule GANs.
//!
//! Everything in this crate is pure computation over `f32` buffers: a dense
//! tensor type, a reverse-mode autodiff tape, capsule layers with dynamic
//! routing, the four GAN architectures (DCGAN and three capsule variants),
//! adversarial losses, Adam, the Inception Score, and a small classifier used
//! as a stand-in scorer. File formats, the training driver and the CLI live
//! in the `capsgan` crate.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature; `std` only enables runtime CPU detection in the GEMM backend.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod capsule;
pub mod data;
mod error;
pub mod gradcheck;
pub mod gan;
mod kernels;
pub mod loss;
mod math;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod scorer;
mod tensor;

pub use autodiff::{Grads, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
