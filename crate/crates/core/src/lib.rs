//! Unbiased stochastic estimates of Hessians of functions written as
//! computational graphs, by propagating curvature backwards alongside the
//! gradient.
//!
//! The pieces, roughly in dependency order:
//!
//! - [`nodes`] and [`graph`]: node kinds, graph evaluation and reverse-mode
//!   gradients.
//! - [`exact`]: dense Hessians, Hessian-vector products and finite
//!   differences, used as oracles.
//! - [`cp`]: the S and T/U curvature sweeps, the simple `H w wᵀ` estimator,
//!   sample averaging and factor matrices.
//! - [`variance`]: closed-form covariances of factored estimators.
//! - [`mlp`]: batched networks with per-case curvature estimates and the
//!   diagonal-only baseline.
//! - [`format`] and [`experiment`]: the graph text format and the accuracy
//!   experiment used by the command-line tool.

pub mod cp;
pub mod error;
pub mod exact;
pub mod experiment;
pub mod format;
pub mod graph;
pub mod mlp;
pub mod noise;
pub mod nodes;
pub mod stats;
pub mod variance;

#[doc(hidden)]
pub mod testing;

pub use cp::{
    estimate, factor_matrix, simple_sample, sweep_s, sweep_tu, Curvature, CurvatureMask, Estimate, Estimator,
    EstimatorConfig, FactorMatrix, FactorVariant, NoiseDraw, SweepResult, Target,
};
pub use error::{Error, Result};
pub use exact::{
    exact_hessian, exact_hessian_with_cap, finite_difference_hessian, hessian_diagonal, hessian_vector_product,
    DenseHessian, HvpContext, DEFAULT_DENSE_CAP,
};
pub use graph::{evaluate, gradient, topological_order, GradState, Graph, GraphBuilder, NodeId, Tape};
pub use mlp::{BatchTape, DiagEstimate, Mlp, MlpNoise};
pub use noise::{draw_rng, NoiseDist};
pub use nodes::{factor_curvature, CurvatureFactor, LocalCurvature, NodeKind, NodeSpec, Nonlinearity};
pub use variance::{closed_form_covariance, empirical_moments, theorem41_gap, FactoredEstimator};
