//! Annotated synthetic microscopy data from a denoising diffusion model:
//! simulate instance masks, render them as sketches, and turn the sketches
//! into realistic images with a truncated reverse diffusion chain.

pub mod cli;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod rng;
pub mod sketch;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
