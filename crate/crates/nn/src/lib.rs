//! Minimal deep-learning engine: tape-based reverse-mode autodiff over dense
//! NCHW tensors, a configurable U-Net, Adam with step-decayed learning rate,
//! and a versioned binary weight format.

pub mod adam;
pub mod error;
pub mod graph;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod unet;
pub mod weights;

pub use adam::{Adam, AdamConfig};
pub use error::{NnError, Result};
pub use graph::{BatchStats, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use unet::{Mode, RunningStats, UNet, UNetConfig};
pub use weights::{load_weights, read_weights, save_weights, write_weights};
