//! Contrastive learning with an explicit split between an invariant
//! representation and an equivariant factor.
//!
//! The encoder output is cut at a separation ratio into `z_IR`, trained with
//! a self-distillation contrastive loss, and `z_EF`, trained with an
//! orthogonality loss across views. A projection-head regularizer ties the
//! squared parameter norms of the two heads together so the equivariant head
//! cannot collapse to the zero map.
//!
//! Everything numeric runs on the small reverse-mode engine in [`tensor`].

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod report;
pub mod rng;
pub mod study;
pub mod tensor;
pub mod train;
pub mod vision;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/augmentations.md")]
    mod augmentations {}
    #[doc = include_str!("../../../book/src/split.md")]
    mod split {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
