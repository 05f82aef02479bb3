//! Collective/individual learning with learngenes.
//!
//! An expandable convolutional network (the *collective* model) is trained on
//! a stream of base-class tasks, flags open-world instances and integrates new
//! classes. Per-layer gradient statistics identify the layers whose large
//! gradient fraction decays and stabilises; the deepest `k` of them form the
//! *learngene*, which initialises a lightweight *individual* model that is
//! adapted to novel classes from few samples under a Fisher-weighted retain
//! penalty.

pub mod error;
pub mod nn;

pub use error::{Error, Result};
pub mod collective;
pub mod datasets;
pub mod fisher;
pub mod harness;
pub mod individual;
pub mod learngene;
pub mod netgraph;
pub mod seed;
