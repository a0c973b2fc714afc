//! Neural educational recommendation engine at desk scale.
//!
//! The pipeline: generate a synthetic study-session log ([`synthgen`]),
//! train GloVe token embeddings and pool them into per-set content
//! vectors ([`textvec`]), assemble the three aligned sequence tensors
//! ([`features`]), train a bidirectional GRU + attention model on top of
//! a small reverse-mode core ([`neuralcore`], [`recsys`]), retrieve
//! recommendations through an NN-Descent k-NN graph ([`annindex`]) and
//! measure recall@k / R² plus ablations ([`evalkit`]).

pub mod annindex;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod neuralcore;
pub mod recsys;
pub mod synthgen;
pub mod textvec;

pub use error::{NereError, Result};
