//! Few-shot segmentation with weak-feature mining.
//!
//! The pipeline segments a query image from a single annotated support
//! example. A shared encoder embeds both images; the support's own
//! self-prediction splits it into well-handled and poorly-handled regions;
//! hard and normal prototypes mined from those regions are matched against
//! query features along two similarity paths whose fused logits produce the
//! final mask. Training drives the whole thing with a five-term objective.
//!
//! Everything is generic over the scalar type through [`Real`]; the crate
//! root exports [`Scalar`] as the default precision used by the training
//! harness and CLI.

pub mod config;
pub mod container;
pub mod data;
pub mod domain;
mod error;
pub mod graph;
pub mod harness;
pub mod hpg;
pub mod losses;
pub mod msmf;
pub mod nets;
pub mod pipeline;
pub mod ssp;
mod tensor;

pub use error::{CowError, Result};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar bound for all numeric kernels: a real float with the conversions
/// and assignment operators the math code needs.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssignOps
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl<T> Real for T where
    T: num_traits::Float
        + num_traits::FromPrimitive
        + num_traits::ToPrimitive
        + num_traits::NumAssignOps
        + Sum
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Default precision for training and evaluation.
pub type Scalar = f64;

/// Single-precision alternative; every kernel is generic over [`Real`].
pub type Scalar32 = f32;
