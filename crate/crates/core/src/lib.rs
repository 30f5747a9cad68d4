//! Core numerics for SGLD-based unsupervised deformable image registration.
//!
//! Everything in this crate is pure computation over owned buffers: a dense
//! tensor type with a reverse-mode autodiff tape, the deformation-predicting
//! UNet, differentiable warping and registration losses, the Adam optimizer
//! with adaptive Langevin noise injection, posterior statistics over weight
//! snapshots, and the evaluation metrics. File formats, the CLI and anything
//! that touches the OS live in the companion `sgldreg` crate.
//!
//! The crate is `no_std` (with `alloc`); float math goes through
//! `num-traits`/`libm` so the whole pipeline can be instantiated at `f32`
//! for training and at `f64` for gradient checks and oracle tests.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod posterior;
pub mod tape;
pub mod tensor;
pub mod unet;
pub mod warp;

pub use error::CoreError;
pub use tape::{Tape, Val};
pub use tensor::{Parameter, Tensor};
pub use warp::DeformationField;
