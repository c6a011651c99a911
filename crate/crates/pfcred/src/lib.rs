//! Maximum-likelihood sufficient dimension reduction for regression.
//!
//! The library fits principal fitted components (PFC) models: the predictor
//! vector is modeled as `X | Y=y ~ N(mu + Gamma beta f_y, Delta)` where `f_y`
//! is a user-chosen basis in the response and `Gamma` spans a d-dimensional
//! subspace. The maximum-likelihood estimate of the reduction `Delta^{-1}
//! span(Gamma)` has a closed form built from two eigendecompositions, so a fit
//! costs little more than a pair of moment matrices.
//!
//! Crate layout:
//! - [`linalg`]: symmetric-matrix kernels (ordered eigendecompositions, matrix
//!   powers, generalized eigen subspaces, principal angles) and the chi-square
//!   tail used by every test.
//! - [`design`]: CSV loading, response bases, and the centered moment matrices
//!   all fits consume.
//! - [`pfc`]: the maximum-likelihood fits (full, isotropic-error, principal
//!   components) and profile log-likelihoods.
//! - [`inference`]: dimension selection by likelihood ratio or information
//!   criteria, and chi-square tests for dropping predictors.
//! - [`structured`]: fits with the error covariance constrained to a linear
//!   span of known symmetric matrices, plus the structure test.
//! - [`simlab`]: seeded data generators and replicated studies (angle,
//!   dimension, level) with deterministic parallelism.
//! - [`cli`]: the `pfcred` command-line front end.

pub mod cli;
pub mod design;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod pfc;
pub mod simlab;
pub mod structured;

pub use design::{build_basis, build_design, load_csv, BasisSpec, Dataset, DesignMatrices, Response};
pub use error::{FitWarning, PfcError};
pub use inference::{
    backward_elimination, select_d_ic, select_d_lrt, test_predictors, test_predictors_maxw,
    Criterion, DimSelection, EliminationTrace, PredictorTest, TestReport,
};
pub use linalg::{
    chi2_sf, eig_sym_desc, generalized_eigen_subspace, largest_principal_angle, principal_angles,
    sym_power, Subspace, SymEigen,
};
pub use pfc::{
    equivalent_subspaces, fit_isotonic_pfc, fit_pc, fit_pfc, loglik_profile, EquivalentSubspaces,
    ModelKind, PfcFit,
};
pub use simlab::{
    generate, recompute_summary, run_angle_study, run_dim_study, run_level_study, AngleArm,
    DimMethod, ExperimentResult, FitBasis, Generator, GeneratorKind, GridAxis, LevelKind,
    StudyKind, Truth,
};
pub use structured::{fit_structured, test_structure, DeltaStructure, FixedPointOpts, StructuredFit};

/// Numerical result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, PfcError>;
