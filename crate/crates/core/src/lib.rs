//! Memory-efficient ViT adapter blocks with countable memory operations.
//!
//! The crate is organised bottom-up:
//!
//! - [`graph`]: the recording [`Context`] with the tensor primitives, their
//!   reverse-mode gradients and the [`OpCounters`] they report into.
//! - [`csa`]: stripe plans and cross-shaped stripe attention, gather-based
//!   and (as a baseline) reshape-based.
//! - [`mea`]: the three-branch block under one shared layer norm.
//! - [`adapter`]: cascaded injectors/extractors around a toy four-block
//!   backbone, plus the toy segmentation head.
//! - [`instrument`]: parameter/operation accounting and entropy estimates.
//! - [`app`]: the `check`, `bench`, `train-toy` and `diag` commands.
//!
//! Kernels run data-parallel through rayon when the `parallel` feature is on
//! (default); [`Exec::Sequential`] selects the sequential path at runtime.

pub mod adapter;
pub mod app;
pub mod counters;
pub mod csa;
pub mod data;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod instrument;
pub mod io;
mod kernels;
pub mod mea;
pub mod norm;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use counters::OpCounters;
pub use error::{Error, Result};
pub use exec::Exec;
pub use graph::{Activation, Context, Var};
pub use scalar::Scalar;
pub use tensor::{FeatureMap, ParamStore, ParamTensor, Tensor};
