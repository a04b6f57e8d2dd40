//! Restricted-likelihood estimation and testing of spatial dependence in
//! Gaussian spatial error models.
//!
//! The core object is the residual space of a design matrix: an orthonormal
//! basis H of the orthogonal complement of the covariate columns. Projecting
//! the spatial weight matrix into that space yields a one-step estimator of
//! the dependence parameter as a ratio of quadratic forms in the contrasts
//! e = H^T z, together with exact Gaussian tests, permutation calibration,
//! scatterplot/local decompositions, a weight-comparison diagnostic, and a
//! Monte Carlo simulation harness.

pub mod error;
pub mod esda;
pub mod estimators;
pub mod inference;
pub mod io;
pub mod quadform;
pub mod residual_space;
mod rngutil;
pub mod simkit;
pub mod weights;

pub use error::{Error, Result};
pub use esda::{compare_weights, local_contributions, scatter_coordinates, ScatterData, WeightComparison};
pub use estimators::{
    aple, default_interval, maple, moran_residual, reml_fit, resaple, restricted_profile_loglik,
    restricted_score, EstimateResult, Method,
};
pub use inference::{
    exact_test, local_tests, permutation_test, z_test, LocalTestResult, PermutationScheme,
    TestResult, TestSide,
};
pub use quadform::{imhof_tail, rayleigh_moments, test_spectrum, QuadFormSpectrum};
pub use residual_space::{
    build_residual_space, contrasts, restricted_information, DesignMatrix, ResidualSpace,
};
pub use simkit::{
    build_covariates, generate_sem, run_estimation_study, run_power_study, SimDesign, SimMetrics,
};
pub use weights::{
    build_knn, build_lattice, raw_weights, row_standardize, AdjacencyGraph, LatticeScheme,
    Normalization, WeightMatrix,
};
