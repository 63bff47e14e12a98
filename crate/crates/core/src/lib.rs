//! Exemplar-free class-incremental adaptation of a frozen vision-language
//! encoder's bridge layer.
//!
//! Only the linear projection from raw visual features to the joint
//! image-text space is trained. Each new task's update is confined to a
//! low-rank subspace that past features barely touch, classification blends
//! textual and visual class prototypes, and per-task auxiliary heads narrow
//! the candidate set before the final cosine scoring.
//!
//! Module map:
//! - [`matrixkit`]: dense `f64` linear algebra and the Jacobi eigensolver
//! - [`subspace`]: cumulative scatter and the safe-subspace construction
//! - [`bridge`]: bridge weights, full and constrained training, fusion
//! - [`prototypes`]: textual / visual / hybrid prototype bank
//! - [`inference`]: cosine-softmax scoring, auxiliary heads, two-stage decision
//! - [`harness`]: task streams, file formats, checkpoints, protocol driver

pub mod bridge;
pub mod data;
pub mod error;
pub mod harness;
pub mod inference;
pub mod matrixkit;
pub mod prototypes;
pub mod subspace;

pub use data::LabeledFeatures;
pub use error::{Error, FormatError, Result};
pub use matrixkit::{Matrix, SymEig};
