//! Desk-scale reconstruction with 2D Gaussian surfels.

pub mod appearance;
pub mod dense_init;
pub mod densify;
pub mod error;
pub mod eval;
pub mod geo_refine;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod mc_tables;
pub mod mesh;
pub mod metrics;
pub mod mvs;
pub mod parallel;
pub mod render;
pub mod sfm;
pub mod spatial;
pub mod surfel;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
