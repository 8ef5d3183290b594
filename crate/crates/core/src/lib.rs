//! Few-shot classification by feature adaptation on graphs.
//!
//! Two small graph networks refine a frozen (or lightly adapted) embedding
//! per episode: one message-passes over class prototypes to push overlapping
//! classes apart, the other over support and query instances to pull
//! outliers back toward their class. Their prototype-distance softmax heads
//! are averaged at prediction time and tied together during training by a
//! consistency loss. Everything runs on a from-scratch reverse-mode tape
//! over f64, so gradients are auditable against finite differences.

pub mod diffcore;
pub mod episodes;
pub mod error;
pub mod graph;
pub mod models;
pub mod trainer;

pub use error::{Error, Result};
