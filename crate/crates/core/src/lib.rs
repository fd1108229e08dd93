//! CPU-first dynamic Gaussian splatting for sparse multi-view video, with
//! separate foreground/background canonical representations, split hex-plane
//! deformation fields, temporal opacity and reference-free densification.

pub mod checkpoint;
pub mod cli;
pub mod densify;
pub mod error;
pub mod eval;
pub mod gaussians;
pub mod hexplane;
pub mod losses;
pub mod math;
pub mod rasterizer;
pub mod scene_io;
pub mod segmentation;
pub mod synth;
pub mod trainer;

pub use error::Error;
