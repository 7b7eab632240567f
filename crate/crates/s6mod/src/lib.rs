//! Selective state space scan with a class-conditionally routed mixture
//! of discretization experts, embedded in an online continual learning
//! harness.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense f64 tensors with reverse-mode autodiff and a
//!   finite-difference gradient checker
//! - [`scan`]: zero-order-hold discretization, the selective recurrence,
//!   and four-direction spatial serialization
//! - [`routing`]: the discretization expert bank, sparse gating, class
//!   prototypes, and uncertainty-driven expert counts
//! - [`etf`]: the fixed equiangular tight frame classifier
//! - [`branch`] / [`losses`]: the plug-in branch and its loss terms
//! - [`model`]: desk-scale convolutional backbone plus base head
//! - [`harness`]: task streams, reservoir replay, training steps, and
//!   continual learning metrics
//! - [`data`]: synthetic streams, CIFAR binary ingestion, embedding export
//! - [`checkpoint`]: versioned binary snapshots of a full model

pub mod branch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod etf;
pub mod harness;
pub mod losses;
pub mod model;
pub mod params;
pub mod routing;
pub mod scan;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
