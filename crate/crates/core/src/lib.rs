//! Cyclic multi-archive MAP-Elites over named-tensor parameter sets.
//!
//! The engine maintains one archive per task. Each generation one task plays
//! the quality role while the others act as behavior characteristics; the
//! quality task rotates cyclically. New candidates are produced by merging
//! two parents' task vectors and rescaling the spectra of the child's weight
//! matrices, then inserted into every archive. A final model is aggregated
//! from the per-archive elites with softmax mixing.
//!
//! With the default `parallel` feature the per-task evaluations of a
//! candidate run on a rayon pool; results are identical to the sequential
//! fallback by construction.

pub mod archive;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod ops;
pub mod params;
pub mod snapshot;
pub mod stream;
pub mod suite;
pub mod svd;

pub use error::{Error, Result};
pub use params::{add_scaled, average_merge, compute_task_vector, ParameterSet, Tensor, TaskVector};
