//! Sparsely gated mixture-of-experts toolkit for gene expression modeling:
//! a small reverse-mode autodiff engine, noisy top-k gating over dense and
//! attention experts, an adversarially trained autoencoder, and survival /
//! classification heads with their evaluation statistics.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod heads;
pub mod model;
pub mod moae;
pub mod moe;
pub mod optim;
pub mod pretrain;
pub mod special;

pub use autodiff::{check_gradients, Graph, ParamId, ParamStore, RngState, Tape, Tensor, Var};
pub use error::{CoreError, Result};
