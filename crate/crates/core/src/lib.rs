//! Incremental covariance-guided one-class SVM.
//!
//! A one-class SVM whose dual quadratic term mixes the kernel matrix with the
//! kernel-space covariance of a basis set, so that the learned description
//! leans on low-variance directions. The model is solved in batch on a small
//! warmup set and then updated exactly, one point at a time, by keeping the
//! KKT conditions satisfied on every point seen so far.
//!
//! * [`kernel`]: kernel functions and the covariance-modified Gram matrix
//! * [`solver`]: the incremental KKT-preserving engine
//! * [`batchref`]: a batch solver for the same dual (oracle and initialiser)
//! * [`model`]: the public classifier with persistence
//! * [`data`]: CSV ingestion, z-scoring and seeded synthetic generators
//! * [`eval`]: metrics and the incremental-vs-batch benchmark

pub mod batchref;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod model;
pub mod solver;

pub use error::{Error, Result};
pub use kernel::{CovarianceMode, GramCache, KernelFamily, KernelSpec};
pub use model::{Label, Model, ModelParams};
pub use solver::{MigrationEvent, MigrationKind, SolverParams, SolverState};
