//! Concept-decoupling workbench for personalized conditional diffusion.
//!
//! A small conditional denoiser is pretrained on an analytic Gaussian-mixture
//! "grid world" of (subject, context) concepts, then personalized on a few
//! reference samples that always pair the new subject with one context. The
//! denoising-decouple and prior-decouple losses in [`losses`] counter the
//! resulting concept coupling, and [`analysis`] measures it against the
//! world's exact priors.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod losses;
pub mod optim;
pub mod projector;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod trainer;
pub mod verify;
pub mod world;

pub use error::{Error, Result};
