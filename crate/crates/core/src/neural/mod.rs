//! The rendering network: layer primitives with exact gradients, the
//! gated-convolution U-Net, its loss and optimiser.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod loss;
mod real;
pub mod unet;

pub use adam::{AdamConfig, AdamState};
pub use loss::{Loss, LossConfig, LossTerms, PerceptualNet, TvMode};
pub use real::Real;
pub use unet::{ParamSet, Tape, UNet, UNetConfig};
