//! Item-based collaborative filtering with attention over interaction
//! histories and multimodal (visual and textual) item features.
//!
//! The crate covers the whole pipeline: loading implicit feedback and item
//! features, the model family from a plain factored item similarity model
//! up to the multimodal attentive model, hand-written gradients with a
//! finite-difference checker, training with early stopping, and the
//! leave-one-out ranking protocol.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod linalg;
pub mod model;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
