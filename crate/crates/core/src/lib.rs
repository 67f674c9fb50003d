//! Desk-scale differentiable operators for small-object detection studies:
//! a reverse-mode tensor core, a three-branch pooling-blend attention module,
//! a dynamic sampling upsampler, a toy single-scale detector with SGD
//! training, COCO-style mAP evaluation, synthetic scene generation, and the
//! finite-difference/oracle machinery that verifies all of it.

pub mod data;
pub mod detector;
pub mod dysample;
pub mod error;
pub mod mcea;
pub mod metrics;
pub mod ops;
pub mod par;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
