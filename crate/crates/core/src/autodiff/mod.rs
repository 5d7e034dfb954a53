//! Reverse-mode automatic differentiation substrate: tensors, a flat
//! operation tape, parameter storage, deterministic randomness, and a
//! finite-difference gradient checker.

pub mod check;
pub mod coxpartial;
pub mod graph;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use check::check_gradients;
pub use graph::{Graph, ParamId, ParamStore};
pub use rng::{RngState, RNG_ALGORITHM};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
