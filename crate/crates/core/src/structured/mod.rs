//! Structured Kronecker factors.
//!
//! Each [`StructureKind`] is a sparsity class closed under multiplication,
//! so inverse-free factor updates `K ← K (I - β m)` stay inside the class
//! when `m` is mapped onto it with [`project`]. Factors are stored compactly
//! and multiplied without expanding to dense form.

mod factor;
mod structure;
mod toeplitz;

pub use factor::{
    project, project_outer, sandwich_precondition, StructuredFactor, SYMMETRY_TOLERANCE,
};
pub use structure::{FactorStructure, StructureKind};
