//! Adversarial patch laboratory.
//!
//! A small differentiable grid detector, location-invariant adversarial
//! patches trained with expectation over random placements and sign-gradient
//! steps, Gaussian noise and Gaussian blur countermeasures, and a blur-delta
//! attack classifier. The [`harness`] module ties these into reproducible
//! experiments.

pub mod attack;
pub mod defense;
pub mod detector;
pub mod error;
pub mod harness;
pub mod image;
pub mod pnm;
pub mod seed;

pub use error::{Error, Result};
pub use image::{Image8, ImageF};
