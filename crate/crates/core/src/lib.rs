//! Object removal for Gaussian-splatting radiance fields.
//!
//! A scene is modelled by anchors whose features are decoded into renderable
//! Gaussians. Training combines a mask-weighted color/SSIM loss, a monocular
//! depth loss with per-step scale/shift alignment, and a cross-attention
//! regularizer that exchanges features between anchors inside and around the
//! removed object.

pub mod error;
pub mod geometry;
pub mod losses;
pub mod regularizer;
pub mod scene;
pub mod splatter;
pub mod ssim;
pub mod trainer;
pub mod workbench;

pub use error::{Error, Result};
