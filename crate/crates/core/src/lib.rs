//! Sliced, grouped and step-skipping execution of a toy video diffusion U-Net.

pub mod error;
pub mod graph;
pub mod kernels;
pub mod ops;
pub mod tensor;
pub mod unet;
pub mod weights;
pub mod executor;
pub mod grouping;
pub mod memory;
pub mod slicer;
pub mod rehash;
pub mod harness;
