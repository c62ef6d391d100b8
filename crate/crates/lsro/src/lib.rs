//! A desk-scale laboratory for semi-supervised embedding learning.
//!
//! The crate trains small feedforward embedders on synthetic
//! re-identification-style datasets (identities observed by several cameras,
//! few samples per identity), augments the training pool with unlabeled
//! samples produced by a minimal adversarial generator, and compares three
//! ways of folding those outliers into a softmax classifier:
//!
//! * **uniform-label regularization** (`lsro`) — every outlier is assigned a
//!   uniform distribution over the `K` real classes;
//! * **all-in-one** — every outlier is assigned to a single new class `K+1`;
//! * **pseudo-label** — each outlier is dynamically labeled with the argmax
//!   of the current model's prediction after a warm-up period.
//!
//! Trained embeddings are scored with the retrieval protocol used in person
//! re-identification: cosine ranking of a gallery, CMC rank-k curves, and
//! mean average precision.
//!
//! Everything runs on a handwritten reverse-mode autodiff engine in `f64`
//! ([`autodiff`]), so experiments are bit-reproducible from a single seed.
//!
//! The `lsro` binary exposes the full experiment harness; see the book under
//! `book/` for a guided tour.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gan;
pub mod labels;
pub mod net;
pub mod rng;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book;
