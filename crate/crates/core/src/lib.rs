//! Dual-domain density refinement for tiny-object density estimation.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`]: differentiable primitives with hand-written backward passes and a
//!   finite-difference gradient checker.
//! * [`kernels`]: fixed Gabor / Fourier / Haar filter banks.
//! * [`fpu`]: the frequency branch (grouped fixed-filter convolutions + pointwise fusion).
//! * [`spu`]: the spatial branch (dilated conv blocks + channel attention).
//! * [`model`]: dual-domain fusion, the density head and a toy stem.
//! * [`density`]: ground-truth density synthesis, the recall-weighted focal loss,
//!   metrics and density-peak query seeding.
//! * [`scenes`]: deterministic synthetic aerial scenes and the annotation schema.
//! * [`harness`]: configuration, training, evaluation and the experiments.

pub mod density;
pub mod error;
pub mod fpu;
pub mod harness;
pub mod io;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod scenes;
pub mod spu;

pub use error::{Error, Result};
