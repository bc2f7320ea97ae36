//! Randomization inference for how network position at entry shapes the ties
//! new hires go on to form.
//!
//! The crate is `no_std` + `alloc` with the default features off; `std` and
//! `parallel` (rayon) are enabled by default.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod design;
pub mod error;
pub mod estimation;
pub mod inference;
pub mod linalg;
pub mod math;
pub mod network;
pub mod pipeline;
pub mod synthlab;
pub mod treatment;

pub use design::{
    assignment_probabilities, build_sample, restrict_sample, DesignPlan, DropReason, DropRecord, EstimationSample,
    OfficeData, OfficeSample, OutcomeMatrix, SampleMode, SampleOptions, StratifiedPermutation,
};
pub use error::{Error, ErrorCategory, Result};
pub use network::{build_network, NodeIdx, NodeRecord, Permutation, SnapshotId, TemporalNetwork};
pub use treatment::{treatment_matrix, NetStat, StatKind, StatOptions, TreatmentArray};
