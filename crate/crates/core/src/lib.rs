//! Concept-aware intra-layer adapters for compositional zero-shot learning.
//!
//! A small dual-encoder transformer with frozen backbone weights and
//! per-concept (attribute / object / composition) bottleneck adapters,
//! trained on procedurally rendered attribute-object images and evaluated
//! with the generalized seen/unseen bias-sweep protocol.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod concept;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod tensor;
pub mod train;

pub use concept::ConceptKind;
pub use autodiff::{Activation, ParamId, ParamStore, SeqLayout, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
