//! Sparse ordinal regression on longitudinal event histories with
//! network-regularized, bootstrap-stabilized feature selection.
//!
//! The numeric core ([`model`], [`trainer`], [`stability`], [`evaluation`])
//! is generic over [`Real`] (`f32` or `f64`). Event handling and filter-bank
//! extraction work in `f64`.

pub mod error;
pub mod evaluation;
pub mod events;
pub mod filterbank;
pub mod lbfgs;
pub mod model;
pub mod network;
pub mod pipeline;
pub mod real;
pub mod sparse;
pub mod stability;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Layout, ModelFile, OrdinalModel, Variant};
pub use network::{FeatureNetwork, RegularizerKind, RegularizerMatrix};
pub use real::Real;
pub use trainer::{fit, select_features, Dataset, FitResult, TrainingConfig};

pub type Model = OrdinalModel<f64>;
pub type Model32 = OrdinalModel<f32>;
pub type Data = Dataset<f64>;
pub type Data32 = Dataset<f32>;
pub type Regularizer = RegularizerMatrix<f64>;
pub type Regularizer32 = RegularizerMatrix<f32>;
