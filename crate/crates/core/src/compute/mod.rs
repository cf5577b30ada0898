//! Deterministic numerical core: tensors, the parameter store, single-instance
//! ops, the reverse-mode tape and the finite-difference gradient checker.

pub mod embedding;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use embedding::{embed_lookup, EmbeddingSizes};
pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::Activation;
pub use params::{ParamId, ParamStore};
pub use tape::{Grad, Gradients, Lookup, Tape, Var};
pub use tensor::Tensor;
