//! Differentiable layers and the toy map-construction model: satellite
//! encoder, pyramid merge, camera BEV head, fusers, decoder and training.

pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod params;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
