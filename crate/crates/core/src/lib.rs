//! Quality-gated set aggregation for face-embedding templates.
//!
//! A template (a set of `n` embeddings of one subject) is collapsed into a
//! single descriptor by two learned sigmoid gates: a per-member *visual*
//! gate and a *content* gate that compares each member against the
//! visual-quality-weighted mean of the set. The crate carries the forward and
//! hand-derived backward passes, a set-wise classification trainer, a
//! synthetic corpus generator and a 1:1 verification toolkit (ROC, TAR@FAR).
//!
//! The crate is `no_std` and needs only `alloc`. File formats, threading and
//! the command line live in the `multicolumn` companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod aggregator;
pub mod data;
mod error;
pub mod evaluation;
pub mod exec;
pub mod numerics;
pub mod training;

pub use aggregator::{
    aggregate, aggregate_backward, AggregationGradients, AggregationOutput, FaceSet, GateParams,
    Mode,
};
pub use error::{Error, Result};
pub use exec::{Executor, Sequential};
