//! Core algorithms for rendering point clouds through a learned image pass.
//!
//! The crate is `no_std` with `alloc`. Everything here is pure computation:
//! point cloud data model and spatial utilities ([`geometry`]), the
//! multi-stream rasterizer ([`msr`]), the Gaussian splat reference renderer
//! ([`gsplat`]), the gated-convolution U-Net with hand-derived gradients and
//! Adam ([`neural`]), and image quality metrics ([`metrics`]).
//!
//! File formats, dataset orchestration, the CLI and the render service live
//! in the `nar` companion crate.
//!
//! With the `parallel` feature the rasterizer, splat renderer and kNN search
//! run on the current rayon pool. Results are identical to the sequential
//! path regardless of thread count.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod geometry;
pub mod gsplat;
pub mod math;
pub mod metrics;
pub mod msr;
pub mod neural;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::{Aabb, CameraPose, Intrinsics, PointCloud, Projection, Stream, StreamData};
pub use gsplat::{SplatSet, SplatStyle};
pub use msr::{FeatureImage, StreamSelection};
pub use tensor::Tensor;
