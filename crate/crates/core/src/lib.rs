//! Entropy-based test-time adaptation with mixture-of-experts LayerNorm.
//!
//! The crate bundles everything needed to study sample-wise expert routing
//! under mixed distribution shifts at desk scale:
//!
//! - [`autodiff`] — dense f64 tensors on a reverse-mode gradient tape,
//!   plus a finite-difference gradient checker.
//! - [`vit`] — a configurable toy Vision Transformer with pluggable
//!   normalization slots.
//! - [`moe_ln`] — the MoE-LayerNorm layer: frozen shared affine parameters,
//!   zero-initialized expert deltas, a per-layer router, and the
//!   load-balancing auxiliary loss.
//! - [`tta`] — the streaming adaptation loop (entropy minimization with
//!   sample selection and re-weighting, dynamic threshold, SGD momentum),
//!   with Tent and Noadapt controls.
//! - [`bench`] — synthetic source task, parameterized corruption operators,
//!   and mixed-stream composition protocols.
//! - [`theory`] — Monte Carlo verifiers for the expected-cosine limit of
//!   shifted Gaussian vectors and the top-1 load-balancing lower bound.
//! - [`analysis`] — expert-diversity and routing diagnostics, and the
//!   (experts, lambda) sweep driver.
//!
//! The crate is `no_std` (with `alloc`); IO, file formats, and the CLI live
//! in the companion `moetta` crate.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod analysis;
pub mod autodiff;
pub mod bench;
pub mod error;
pub mod math;
pub mod moe_ln;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod tta;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
