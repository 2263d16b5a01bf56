//! Pruning laboratory for early-exit networks.
//!
//! A small multi-exit convolutional network is trained jointly, pruned with
//! iterative global unstructured L1 magnitude pruning under two orderings
//! (whole network at once, or base network first and exit heads second), and
//! evaluated per exit and along time-shared accuracy/FLOPs trade-off curves.

pub mod datasets;
pub mod error;
pub mod exitnet;
pub mod flopsmeter;
pub mod pruner;
pub mod runner;
pub mod tensorcore;

pub use error::{Error, Result};
