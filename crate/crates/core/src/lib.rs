//! Amortized learning of segmentation networks over a continuous
//! feature-rescaling factor.
//!
//! A small MLP hypernetwork maps a rescaling factor to the full weight set
//! of a variable-rescale UNet. One training run then characterizes the
//! whole accuracy/efficiency trade-off: sweep the factor, read off Dice
//! and FLOPs, pick the cheapest operating point that meets an accuracy
//! floor, and export a standalone inference network for it.

pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod eval;
pub mod experiments;
pub mod hypernet;
pub mod opt;
pub mod resize;
pub mod tensor;
pub mod train;
pub mod unet;
