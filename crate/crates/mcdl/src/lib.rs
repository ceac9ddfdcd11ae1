//! Coupled dictionary learning for multi-label annotation.
//!
//! Factorizes a labeled training collection into a pair of coupled
//! dictionaries: visual prototypes that reconstruct feature vectors and
//! semantic prototypes that score label relevance. Both share one
//! nonnegative sparse code per sample, so annotating a new vector reduces
//! to a single sparse coding step against the visual dictionary followed
//! by a matrix-vector product with the semantic one. Query cost depends
//! on the dictionary size, not on the number of training samples.

pub mod annotator;
pub mod baselines;
pub mod data;
pub mod dict_update;
pub mod error;
pub mod eval;
pub mod solver;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
