//! Identification of Markov parameters of linear systems in innovations form from
//! multiple independent rollouts, by ordinary and weighted least squares.

pub mod bounds;
pub mod error;
pub mod estimators;
pub mod extraction;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod rollout;

pub use error::{Error, Result};
pub use estimators::{Method, WeightingOperator};
pub use extraction::ExtractionMethod;
pub use model::{MarkovKind, MarkovSequence, StateSpaceModel};
pub use rollout::{PredictorMode, RolloutDataset, SimConfig};
