//! Task-incremental continual learning for binary surface-defect segmentation.
//!
//! The engine trains one shared U-Net over a sequence of defect types. For
//! every task it carves a frozen subnetwork out of the shared weights via
//! signal-strength pruning, so earlier tasks are never overwritten, and it
//! fits a streaming linear-discriminant classifier over fixed image features
//! to pick the right subnetwork at inference time.
//!
//! The crate is `no_std` (with `alloc`): it contains all numerics — a small
//! reverse-mode tensor engine, the U-Net, mask bookkeeping, pruning, the
//! streaming LDA, losses and the continual training loop — but no IO. File
//! formats, dataset ingestion and the command-line front end live in the
//! companion `lcps` binary crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod adam;
pub mod autograd;
pub mod bitset;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod masks;
pub mod ops;
pub mod params;
pub mod prune;
pub mod rng;
pub mod slda;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
