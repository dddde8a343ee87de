//! Dense tensors, reverse-mode autodiff, seeded randomness, and the
//! finite-difference gradient oracle.

pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, relative_error, H_COMPOSITE, H_PRIMITIVE};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
