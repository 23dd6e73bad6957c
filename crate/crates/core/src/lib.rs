//! Inverse-free Kronecker-factored second-order optimizers.
//!
//! The crate provides KFAC as an inversion-based reference, its inverse-free
//! counterpart IKFAC, and SINGD (INGD with structured Kronecker factors),
//! alongside AdamW and SGD baselines, an emulated low-precision layer, a
//! small MLP with per-layer curvature hooks, and the experiment harness
//! behind the `singd` CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod curvature;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod precision;
pub mod structured;

pub use error::{Error, Result};
pub use linalg::{Matrix, TruncationOrder};
pub use precision::{Format, PrecisionPolicy, QuantizePoint};
pub use structured::{FactorStructure, StructureKind, StructuredFactor};
