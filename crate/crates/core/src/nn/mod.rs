//! Minimal neural-network building blocks on top of candle tensors.

mod adam;
mod layers;
mod ops;
mod params;

pub use adam::{Adam, AdamConfig};
pub use layers::{batch_norm_reference, leaky_relu, max_pool2x2, sigmoid, BatchNorm, Conv2d, ConvTranspose2d};
pub use ops::conv2d_same;
pub use params::{load_tensors, save_tensors, ParamStore, Precision};
