//! Object-composable voxel volume rendering.
//!
//! Per-object density/radiance/occupancy grids are rendered together by
//! merging their ray samples in depth order, which yields color, depth, and
//! modal and amodal instance masks from one pass. The crate also fits those
//! grids to posed images by gradient descent, extracts meshes, settles
//! objects into new scenes, and writes the renders out as datasets.

pub mod cli;
pub mod compositor;
pub mod dataset;
pub mod error;
pub mod fitting;
pub mod geometry;
mod mc_tables;
pub mod meshing;
pub mod metrics;
pub mod procedural;
pub mod scene;
pub mod synthesis;
pub mod volume;

pub use error::{Error, Result};
