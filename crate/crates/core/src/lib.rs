//! Learned association of uncorrelated angles-only optical observations.
//!
//! The crate covers the whole experiment chain:
//!
//! - [`orbitsim`]: two-body propagation, random near-GEO populations and noisy
//!   ground-sensor streak observations.
//! - [`featurize`]: per-observation base parameters and the ratio-augmented
//!   pair feature vector, standardization and balanced pair sampling.
//! - [`neuralnet`]: a dense classifier with batch normalization, trained with
//!   Adam on cross-entropy, implemented without an autodiff framework.
//! - [`associate`]: pair scoring and uniform cost search for likely
//!   three-observation associations, plus recovery metrics.
//! - [`explain`]: input-gradient saliency maps on a 21x21 grid.
//! - [`pipeline`]: experiment configuration and the command implementations
//!   behind the `ucoassoc` CLI.

pub mod associate;
pub mod error;
pub mod explain;
pub mod featurize;
pub mod neuralnet;
pub mod orbitsim;
pub mod pipeline;

pub use error::{Error, Result};
