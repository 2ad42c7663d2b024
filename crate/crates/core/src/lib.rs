//! Deformation-invariant cycle-consistent image translation.
//!
//! Two generators translate between unpaired image domains. Each generator has a
//! deformable path (offset convolutions active) whose output is judged by the
//! discriminators, and an undeformed path that stays spatially aligned with its
//! input. Alignment is encouraged with a soft normalized-mutual-information loss and
//! both paths are kept cycle-consistent.

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod data;
pub mod deform;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

/// Content hash of the library sources this binary was built from.
pub const CODE_HASH: &str = env!("DICYCLE_CODE_HASH");
