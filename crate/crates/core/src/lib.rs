//! Joint learning of (conditional) deformable templates and a diffeomorphic
//! registration network on 2D image collections.
//!
//! Module map:
//! - [`autodiff`]: static-graph reverse-mode differentiation with `f64`
//!   finite-difference verification.
//! - [`diffeo`]: stationary-velocity integration by scaling and squaring,
//!   bilinear warping, composition, inversion and Jacobian determinants.
//! - [`nets`]: template decoder, per-pixel template, registration U-Net and
//!   latent encoder.
//! - [`objective`]: data likelihoods, deformation prior and the running
//!   mean displacement.
//! - [`data`]: IDX/PGM/PNG ingestion, attribute encoding, simulated
//!   transformations and synthetic ground-truth datasets.
//! - [`train`]: optimization loop, optimizers and checkpoints.
//! - [`analyze`]: centrality, regularity, reconstruction, Dice, label
//!   propagation and velocity PCA.

pub mod analyze;
pub mod autodiff;
pub mod data;
pub mod diffeo;
mod error;
pub mod gradsuite;
pub mod grid;
pub mod nets;
pub mod objective;
mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use grid::{ImageGrid, VectorField};
pub use params::ParamStore;
pub use tensor::{DType, Real, Tensor};
