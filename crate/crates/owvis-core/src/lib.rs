//! Open-world video instance segmentation toolkit.
//!
//! End-to-end machinery for training and evaluating an open-world video
//! instance segmentation model at configurable scale: a feature-enriched
//! transformer segmentation model with a spatio-temporal objectness module
//! for pseudo-labeling unknown objects, a two-task incremental learning
//! protocol with exemplar replay, open-world dataset split construction,
//! a deterministic synthetic video generator, and an open-world AP/AR
//! evaluator.

pub mod autodiff;
pub mod data_model;
pub mod config;
pub mod decoder_heads;
pub mod error;
pub mod eval;
pub mod feature_net;
pub mod matching_losses;
pub mod model;
pub mod nn;
pub mod openworld_protocol;
pub mod splits;
pub mod sto;
pub mod synthdata;
pub mod tensor;
pub mod viz;

pub use error::{Error, Result};
