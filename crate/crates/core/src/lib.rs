//! Learned generators of network-internal feature flows.
//!
//! The crate covers the whole generator pipeline at desk scale:
//!
//! * [`imageops`] renders a synthetic dataset of centered shapes and applies
//!   rotations, scalings and translations to it.
//! * [`convnet`] is a small from-scratch convolutional network whose
//!   convolutional activations are tapped for flow computation, and which
//!   accepts a warp hook at a tapped layer during training.
//! * [`featflow`] estimates dense integer flow between two feature tensors by
//!   minimizing a truncated-L1 matching energy with ICM.
//! * [`genlearn`] stacks per-layer flows, runs PCA, and fits the quadratic
//!   coefficient model that synthesizes a generator flow for any amount.
//! * [`warp`] applies (possibly fractional) flow fields to feature tensors and
//!   routes gradients back through the negated field.
//! * [`tasks`] holds the two downstream uses: zero-shot categorization of the
//!   transformation amount and network-internal augmentation.

pub mod convnet;
pub mod error;
pub mod featflow;
pub mod flowviz;
pub mod genlearn;
pub mod imageops;
mod sampling;
pub mod seeding;
pub mod tasks;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor3};
