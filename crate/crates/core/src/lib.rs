//! Masked volume pre-training machinery for hybrid CNN / state-space networks.
//!
//! The crate is `no_std` (with `alloc`) so the numeric core can be embedded
//! anywhere; file formats, configuration and the training CLI live in the
//! `mambamim` companion crate.
//!
//! Layout:
//! - [`tensor`] and [`autodiff`]: n-dimensional arrays, a reverse-mode tape
//!   and the AdamW optimizer.
//! - [`ssm`] and [`mamba`]: discretized state-space scans and the selective
//!   Mamba block.
//! - [`toki`]: state-space token interpolation for masked sequence positions.
//! - [`masking`]: mask pyramids, sparse operators and 3D scan orders.
//! - [`model`]: the hierarchical hybrid encoder/decoder and masked MSE.
//! - [`synth`]: synthetic ellipsoid volumes.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod mamba;
pub mod masking;
pub mod model;
pub mod params;
pub mod real;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod toki;
pub mod train;

pub use autodiff::{AdamW, CosineSchedule, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use real::{DType, Real};
pub use tensor::Tensor;
