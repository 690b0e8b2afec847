//! Core building blocks for satellite-prior vectorized HD map construction.
//!
//! - [`geomath`]: WGS84 / Web-Mercator transforms and ego-centric satellite cropping.
//! - [`mapcore`]: class-labeled polylines, arc-length resampling, equivalent orderings.
//! - [`assignment`]: Hungarian assignment and the hierarchical matching cost / loss.
//! - [`metrics`]: Chamfer distance, per-class AP over distance thresholds, mAP.
//! - [`bevgeom`]: BEV grid, pinhole cameras and geometry-guided kernel sampling.
//! - [`synth`]: deterministic synthetic scenes with occlusion and misalignment knobs.

pub mod assignment;
pub mod bevgeom;
pub mod error;
pub mod geomath;
pub mod io;
pub mod mapcore;
pub mod metrics;
pub mod synth;

pub use error::{Error, Result};
