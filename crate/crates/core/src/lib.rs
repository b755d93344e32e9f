//! Learning the Laplacian representation of gridworld MDPs with the
//! augmented Lagrangian Laplacian objective (ALLO).
//!
//! The crate is organised bottom-up:
//!
//! - [`gridworld`]: maps, transition matrices, Laplacians and transition samples.
//! - [`spectral`]: exact eigensystems and similarity metrics.
//! - [`objectives`]: GDO/GGDO/ALLO values and their descent/ascent directions.
//! - [`dynamics`]: full-gradient ascent-descent on tabular representations,
//!   equilibrium checks and Jacobian stability witnesses.
//! - [`mlp`] and [`trainer`]: the stochastic neural-network setting.

pub mod dynamics;
pub mod gridworld;
pub mod metrics;
pub mod mlp;
pub mod objectives;
pub mod spectral;
pub mod trainer;

pub use gridworld::{
    build_transition_model, parse_grid_map, sample_transitions, state_features, FeatureMode, GridWorld,
    TransitionDataset, TransitionModel,
};
pub use objectives::{DualVariables, GgdoCoefficients, TransitionBatch};
pub use spectral::{cosine_similarity, eigendecompose, eigenvalue_errors, similarity_report, EigenSystem};
