//! Adversarial RAW image-scaling attacks against camera ISP pipelines.
//!
//! The library crafts adversarial RAW sensor data which, after an ISP
//! pipeline (differentiable or approximated by a trained proxy) and a
//! downscaling step, yields an image with entirely different semantics.
//! It also ships the filtering defenses and the metrics needed to
//! evaluate such attacks.

pub mod attack;
pub mod cli;
pub mod defense;
pub mod error;
pub mod eval;
pub mod image;
pub mod isp;
pub mod proxy;
pub mod scaling;
pub mod synth;
pub mod target_isp;

pub use error::{Error, Result};
