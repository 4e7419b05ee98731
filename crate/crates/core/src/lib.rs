//! Hybrid frozen-backbone / state-space segmentation toolkit.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] – dense tensors, the gradient tape and numeric kernels.
//! * [`ssm`] – continuous/discrete state-space models, sequential, parallel
//!   and selective scans.
//! * [`mamba`] – the Mamba block plus 2-D cross-scan and 3-D tri-plane orders.
//! * [`mfgc`] – 3-D DCT analysis with frequency-pooled channel gating.
//! * [`fusion`] – cross-branch attention, LoRA and the ViT-style block.
//! * [`adapters`] – tri-plane Mamba adapters for frozen token encoders.
//! * [`models`] – dual-branch and adapter segmentation models, freezing and
//!   checkpoints.
//! * [`data`] – synthetic phantoms, preprocessing and the volume file format.
//! * [`traineval`] – loss, metrics, optimizer, training loop and benchmarks.
//!
//! The frozen "generalist" encoder is a randomly initialised ViT-style stub:
//! no pretrained weights are involved, so everything here exercises the
//! structure and gradient flow of the architectures, not transfer learning.

pub mod adapters;
pub mod data;
pub mod error;
pub mod fusion;
pub mod mamba;
pub mod mfgc;
pub mod models;
pub mod ssm;
pub mod tensor;
pub mod traineval;

pub use error::{Error, Result};
pub use tensor::{Param, ParamId, ParamStore, Tape, Tensor, Var};
