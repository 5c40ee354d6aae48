//! Weight-only overfitting diagnostics from shuffled layer spectra.
//!
//! Each layer is shuffled entry-wise, its covariance spectrum is fitted to a
//! Marchenko-Pastur bulk, and eigenvalues well past the fitted right edge are
//! reported as correlation traps. Traps can then be ablated from a model and
//! scored with a data-free Jensen-Shannon probe test.

pub mod ablation;
pub mod error;
pub mod exec;
pub mod nn;
pub mod rmt;
pub mod seed;
pub mod self_averaging;
pub mod tensor_store;
pub mod traps;

pub use error::{Error, Result};
pub use exec::Execution;
pub use tensor_store::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, WeightMatrix};
