//! Grid-guided neural radiance fields.
//!
//! A factorized multi-resolution ground-plane feature grid (the *grid
//! branch*) is pretrained on its own and then trained jointly with a
//! positional-encoding MLP (the *NeRF branch*) that samples rays where the
//! grid says the surface is and reads the grid features as extra inputs.
//!
//! Everything runs on a small reverse-mode tape ([`autodiff`]) over dense
//! CPU arrays.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
