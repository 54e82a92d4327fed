//! Image-conditioned low-rank adapter generation for a toy text-to-image
//! diffusion model.
//!
//! The crate trains a small patch-transformer denoiser on procedurally
//! generated face sprites, then trains a pair of hypernetworks that map a
//! reference face image to combination coefficients over a trainable
//! low-rank-adapter basis. The resulting adapters merge into the frozen
//! denoiser to personalize generation, and because adapters live in a linear
//! coefficient space they can be averaged, interpolated, and subtracted.
//!
//! The narrative guide under `book/` walks through each subsystem; module
//! docs here stay close to the code.

pub mod archive;
pub mod denoiser;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod hypernet;
pub mod img;
pub mod lora;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
