//! Denoising of mixed impulse + Poisson-Gaussian noise in grayscale images.
//!
//! The pipeline has three stages:
//!
//! 1. [`vst::gat_forward`] turns Poisson-Gaussian noise into roughly
//!    unit-variance Gaussian noise.
//! 2. [`solver::aop_loop`] alternates an l0-constrained outlier update with
//!    a primal-dual TV (and optional plug-in denoiser) restoration.
//! 3. [`vst::igat_exact_unbiased`] maps the estimate back with the exact
//!    unbiased inverse.
//!
//! [`solver::mindx_denoise`] runs all three. [`experiments`]
//! drives seeded parameter sweeps and writes PSNR tables.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod denoisers;
pub mod error;
pub mod experiments;
pub mod filters;
pub mod image;
pub mod io;
pub mod noise;
pub mod operators;
pub mod solver;
pub mod vst;

pub use error::{Error, Result};
pub use image::{psnr, Image, PixelMask};
pub use noise::{ImpulseType, NoiseSpec};
pub use solver::{mindx_denoise, SolverParams};
