//! Building blocks for a panoptic segmentation network and its evaluation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`ops`]: a small NCHW tensor with the handful of kernels
//!   the network needs (convolution, activations, pooling, resizing).
//! * [`pixel_relation`]: global-context attention, from the full pairwise
//!   non-local operator down to the single-logit pixel-relation block, with
//!   analytic gradients and parameter accounting.
//! * [`convectional`]: a two-pathway feature pyramid whose levels are merged
//!   by a feature fusion module with channel attention.
//! * [`heads`]: semantic head, panoptic fusion of semantic and instance
//!   logits, decoding, and the weighted loss.
//! * [`metrics`]: PQ/SQ/RQ with segment matching, an exhaustive oracle, and
//!   mIoU.
//! * [`scene`], [`pipeline`], [`io`]: synthetic data, end-to-end assembly and
//!   on-disk formats used by the `sunetkit` binary.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iterators otherwise.

pub mod accounting;
pub mod convectional;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod init;
pub mod io;
pub mod metrics;
pub mod ops;
pub mod panoptic;
pub mod par;
pub mod pipeline;
pub mod pixel_relation;
pub mod scalar;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
