//! Recurrent feature propagation over DAG-decomposed grid graphs, edge-supervised
//! skip connections and the supporting tensor/autodiff machinery for volumetric
//! multi-class segmentation.
//!
//! The crate is `no_std` (with `alloc`). The default `std` feature only enables
//! runtime CPU feature detection in the GEMM backend and `std` math intrinsics;
//! results are otherwise identical.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod edge;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod rfp;
pub mod scalar;
pub mod segnet;
pub mod tensor;

pub use autodiff::{Gradients, NodeId, Tape};
pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::Tensor;
