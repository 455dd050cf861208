//! Dense-tensor math and reverse-mode differentiation.
//!
//! Everything the model modules compute runs through [`Tape`]; parameters
//! live in a [`ParamStore`] that is flat-indexable for finite-difference
//! verification and serializable to a binary checkpoint.

mod grad_check;
mod param_store;
mod tape;
mod tensor;

pub use grad_check::{grad_check, GradCheckReport, GradMap};
pub use param_store::ParamStore;
pub use tape::{Tape, Var};
pub use tensor::{Precision, Tensor};
