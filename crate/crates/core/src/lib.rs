pub mod detector;
pub mod draw;
pub mod error;
pub mod evalbench;
pub mod features;
pub mod heatmap;
pub mod image;
pub mod linalg;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod training;
pub mod warp;

pub use error::{CoreError, Result};
