//! SEM data generation and Monte Carlo study harness: covariate
//! construction, exact simulation of the spatial error process, and
//! estimation / size-power studies over configurable designs.
//!
//! Reproducibility contract: every replicate draws from a ChaCha8 stream
//! seeded by `derive_seed(master, [design_point, rho_index, replicate])`,
//! so the full output table is a pure function of (design, seed) and is
//! independent of worker count and scheduling.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    aple, default_interval, maple, moran_residual, reml_fit, resaple, Method,
};
use crate::inference::{
    exact_test, permutation_test_prebuilt, z_test, PermutationScheme, TestSide,
};
use crate::residual_space::{build_residual_space, contrasts, restricted_information, DesignMatrix};
use crate::rngutil::derive_seed;
use crate::weights::{
    build_knn, build_lattice, row_standardize, LatticeScheme, WeightMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    LatticeQueen,
    LatticeRook,
    CustomGraph,
}

impl std::fmt::Display for Topology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Topology::LatticeQueen => "lattice_queen",
            Topology::LatticeRook => "lattice_rook",
            Topology::CustomGraph => "custom_graph",
        };
        f.write_str(s)
    }
}

/// Calibration methods available to the power study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerMethod {
    Exact,
    Z,
    PermResaple,
    PermMoran,
    PermAple,
    PermMaple,
}

impl std::fmt::Display for PowerMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PowerMethod::Exact => "exact",
            PowerMethod::Z => "z",
            PowerMethod::PermResaple => "perm_resaple",
            PowerMethod::PermMoran => "perm_moran",
            PowerMethod::PermAple => "perm_aple",
            PowerMethod::PermMaple => "perm_maple",
        };
        f.write_str(s)
    }
}

fn default_sigma() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    0.05
}
fn default_permutations() -> usize {
    199
}
fn default_candidates() -> Vec<String> {
    vec!["queen".to_string()]
}
fn default_true() -> bool {
    true
}
fn default_test_methods() -> Vec<PowerMethod> {
    vec![PowerMethod::Exact, PowerMethod::PermResaple]
}

/// One simulation design: topology, dimensions, dependence grid, and test
/// parameters. Deserializable from a JSON config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimDesign {
    pub design_id: String,
    pub topology: Topology,
    #[serde(default)]
    pub rows: usize,
    #[serde(default)]
    pub cols: usize,
    pub p: usize,
    pub rho_grid: Vec<f64>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_permutations")]
    pub permutations: usize,
    /// Weight candidates by label: "rook", "queen", or "knn<k>".
    #[serde(default = "default_candidates")]
    pub candidates: Vec<String>,
    /// Whether estimation studies include the full REML maximizer.
    #[serde(default = "default_true")]
    pub include_reml: bool,
    #[serde(default = "default_test_methods")]
    pub test_methods: Vec<PowerMethod>,
}

impl SimDesign {
    pub fn n(&self) -> usize {
        self.rows * self.cols
    }
}

/// Long-format metric row matching the output CSV schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub design_id: String,
    pub topology: String,
    pub n: usize,
    pub p: usize,
    pub w_label: String,
    pub method: String,
    pub rho_true: f64,
    pub metric: String,
    pub value: f64,
    pub mc_se: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimMetrics {
    pub rows: Vec<MetricRow>,
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    for x in v.iter_mut() {
        *x = (*x - mean) / sd;
    }
}

/// Covariate matrix and coefficient vector for the simulation designs:
/// intercept, then (when coordinates are available) standardized x and y
/// coordinates perturbed by N(0, 0.1^2) noise, then standardized Gaussian
/// columns; beta_1 = 1 and beta_j = 0.6/sqrt(j-1) induces a decaying signal.
pub fn build_covariates(
    coords: Option<&[(f64, f64)]>,
    n: usize,
    p: usize,
    seed: u64,
) -> Result<(DesignMatrix, DVector<f64>)> {
    if p < 1 {
        return Err(Error::InvalidDimension("covariate builder requires p >= 1".into()));
    }
    if p >= n {
        return Err(Error::InvalidDimension(format!(
            "p = {p} must be smaller than n = {n}"
        )));
    }
    if let Some(c) = coords {
        if c.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: c.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = DMatrix::zeros(n, p);
    for i in 0..n {
        m[(i, 0)] = 1.0;
    }
    for j in 1..p {
        let mut col: Vec<f64> = match (j, coords) {
            (1, Some(c)) => c.iter().map(|&(x, _)| x).collect(),
            (2, Some(c)) => c.iter().map(|&(_, y)| y).collect(),
            _ => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        };
        standardize(&mut col);
        if j <= 2 && coords.is_some() {
            for x in col.iter_mut() {
                *x += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
            standardize(&mut col);
        }
        for i in 0..n {
            m[(i, j)] = col[i];
        }
    }
    let beta = DVector::from_fn(p, |j, _| {
        if j == 0 {
            1.0
        } else {
            0.6 / (j as f64).sqrt()
        }
    });
    Ok((DesignMatrix::new(m)?, beta))
}

/// Simulates z = X beta + u with (I - rho W) u = eps, eps ~ N(0, sigma^2 I),
/// solving the SEM system by LU decomposition.
pub fn generate_sem(
    x: &DesignMatrix,
    beta: &DVector<f64>,
    w: &WeightMatrix,
    rho: f64,
    sigma: f64,
    seed: u64,
) -> Result<DVector<f64>> {
    let n = w.n();
    if x.n() != n {
        return Err(Error::InvalidDimension(format!(
            "design has n = {}, weights have n = {n}",
            x.n()
        )));
    }
    if beta.len() != x.p() {
        return Err(Error::LengthMismatch {
            expected: x.p(),
            got: beta.len(),
        });
    }
    // negated comparison is deliberate: it also rejects NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = DVector::from_fn(n, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
    let a = DMatrix::identity(n, n) - w.matrix() * rho;
    // LU can return a finite garbage solution when I - rho W is numerically
    // singular, so accept the solve only if its residual is small
    let u = a
        .clone()
        .lu()
        .solve(&eps)
        .filter(|u| {
            u.iter().all(|v| v.is_finite()) && (&a * u - &eps).norm() <= 1e-8 * eps.norm()
        })
        .ok_or_else(|| Error::Singular(format!("I - rho W is singular at rho = {rho}")))?;
    Ok(x.matrix() * beta + u)
}

/// Builds the labeled weight candidates named in the design on its lattice.
pub fn candidate_weights(design: &SimDesign) -> Result<Vec<(String, WeightMatrix)>> {
    if design.topology == Topology::CustomGraph {
        return Err(Error::Data(
            "custom_graph designs require explicitly supplied weight matrices".into(),
        ));
    }
    if design.candidates.is_empty() {
        return Err(Error::Data("design lists no weight candidates".into()));
    }
    let coords = lattice_coords(design.rows, design.cols);
    design
        .candidates
        .iter()
        .map(|label| {
            let g = match label.as_str() {
                "rook" => build_lattice(design.rows, design.cols, LatticeScheme::Rook)?,
                "queen" => build_lattice(design.rows, design.cols, LatticeScheme::Queen)?,
                other => match other.strip_prefix("knn").and_then(|k| k.parse::<usize>().ok()) {
                    Some(k) => build_knn(&coords, k)?,
                    None => {
                        return Err(Error::Data(format!(
                            "unknown weight candidate label '{other}'"
                        )))
                    }
                },
            };
            Ok((label.clone(), row_standardize(&g)?))
        })
        .collect()
}

pub fn lattice_coords(rows: usize, cols: usize) -> Vec<(f64, f64)> {
    (0..rows * cols)
        .map(|i| ((i % cols) as f64, (i / cols) as f64))
        .collect()
}

fn validate_design(design: &SimDesign, candidates: &[(String, WeightMatrix)]) -> Result<()> {
    let n = candidates[0].1.n();
    if design.p >= n {
        return Err(Error::InvalidDimension(format!(
            "p = {} must be smaller than n = {n} for a non-trivial residual space",
            design.p
        )));
    }
    if design.replicates == 0 {
        return Err(Error::Data("replicates must be positive".into()));
    }
    for (label, w) in candidates {
        let (lo, hi) = default_interval(w);
        for &rho in &design.rho_grid {
            if rho <= lo || rho >= hi {
                return Err(Error::Domain(format!(
                    "rho = {rho} is outside the valid region ({lo}, {hi}) for candidate '{label}'"
                )));
            }
        }
    }
    Ok(())
}

fn design_x(design: &SimDesign, n: usize) -> Result<(DesignMatrix, DVector<f64>)> {
    let coords = lattice_coords(design.rows, design.cols);
    let coords_opt = if design.topology == Topology::CustomGraph {
        None
    } else {
        Some(coords.as_slice())
    };
    build_covariates(coords_opt, n, design.p, derive_seed(design.seed, &[u64::MAX]))
}

fn summarize(estimates: &[f64], rho: f64) -> [(String, f64, f64); 3] {
    let k = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / k;
    let bias = mean - rho;
    // population SD so that rmse^2 = bias^2 + sd^2 holds exactly
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / k;
    let sd = var.sqrt();
    let sq_err: Vec<f64> = estimates.iter().map(|e| (e - rho).powi(2)).collect();
    let mse = sq_err.iter().sum::<f64>() / k;
    let rmse = mse.sqrt();
    let var_sq = sq_err.iter().map(|s| (s - mse).powi(2)).sum::<f64>() / k;
    let rmse_se = if rmse > 0.0 {
        var_sq.sqrt() / (2.0 * rmse * k.sqrt())
    } else {
        0.0
    };
    [
        ("bias".into(), bias, sd / k.sqrt()),
        ("sd".into(), sd, sd / (2.0 * k).sqrt()),
        ("rmse".into(), rmse, rmse_se),
    ]
}

/// Bias / SD / RMSE of the one-step estimators (and optionally REML) over
/// the design grid. Degenerate per-replicate failures are counted in a
/// `failures` metric row rather than aborting the study.
pub fn run_estimation_study(design: &SimDesign) -> Result<SimMetrics> {
    let candidates = candidate_weights(design)?;
    run_estimation_study_with(design, &candidates)
}

pub fn run_estimation_study_with(
    design: &SimDesign,
    candidates: &[(String, WeightMatrix)],
) -> Result<SimMetrics> {
    validate_design(design, candidates)?;
    let n = candidates[0].1.n();
    let (x, beta) = design_x(design, n)?;
    let mut methods = vec![Method::Moran, Method::Aple, Method::Maple, Method::Resaple];
    if design.include_reml {
        methods.push(Method::Reml);
    }

    let mut rows = Vec::new();
    for (d_idx, (label, w)) in candidates.iter().enumerate() {
        let s = build_residual_space(&x, w)?;
        for (r_idx, &rho) in design.rho_grid.iter().enumerate() {
            let per_rep: Vec<Vec<Option<f64>>> = (0..design.replicates)
                .into_par_iter()
                .map(|rep| {
                    let seed =
                        derive_seed(design.seed, &[d_idx as u64, r_idx as u64, rep as u64]);
                    let z = match generate_sem(&x, &beta, w, rho, design.sigma, seed) {
                        Ok(z) => z,
                        Err(_) => return vec![None; methods.len()],
                    };
                    methods
                        .iter()
                        .map(|m| estimate_once(*m, &z, &x, w, &s).ok())
                        .collect()
                })
                .collect();

            for (m_idx, m) in methods.iter().enumerate() {
                let estimates: Vec<f64> = per_rep
                    .iter()
                    .filter_map(|rep| rep[m_idx])
                    .collect();
                let failures = design.replicates - estimates.len();
                if estimates.is_empty() {
                    return Err(Error::Degenerate(format!(
                        "estimator {m} failed on every replicate at rho = {rho}"
                    )));
                }
                for (metric, value, mc_se) in summarize(&estimates, rho) {
                    rows.push(MetricRow {
                        design_id: design.design_id.clone(),
                        topology: design.topology.to_string(),
                        n,
                        p: design.p,
                        w_label: label.clone(),
                        method: m.to_string(),
                        rho_true: rho,
                        metric,
                        value,
                        mc_se,
                    });
                }
                rows.push(MetricRow {
                    design_id: design.design_id.clone(),
                    topology: design.topology.to_string(),
                    n,
                    p: design.p,
                    w_label: label.clone(),
                    method: m.to_string(),
                    rho_true: rho,
                    metric: "failures".into(),
                    value: failures as f64,
                    mc_se: 0.0,
                });
            }
        }
    }
    Ok(SimMetrics { rows })
}

fn estimate_once(
    method: Method,
    z: &DVector<f64>,
    x: &DesignMatrix,
    w: &WeightMatrix,
    s: &crate::residual_space::ResidualSpace,
) -> Result<f64> {
    Ok(match method {
        Method::Moran => moran_residual(z, x, w)?.rho_hat,
        Method::Aple => aple(&x.residuals(z)?, w)?.rho_hat,
        Method::Maple => maple(z, x, w)?.rho_hat,
        Method::Resaple => resaple(s, &contrasts(s, z)?)?.rho_hat,
        Method::Reml => reml_fit(x, w, z, None)?.rho_hat,
    })
}

/// Rejection rates of the configured tests over the design grid, one-sided
/// against rho > 0, plus an `i_r0` information row per weight candidate for
/// information-versus-power analyses.
pub fn run_power_study(design: &SimDesign) -> Result<SimMetrics> {
    let candidates = candidate_weights(design)?;
    run_power_study_with(design, &candidates)
}

pub fn run_power_study_with(
    design: &SimDesign,
    candidates: &[(String, WeightMatrix)],
) -> Result<SimMetrics> {
    validate_design(design, candidates)?;
    if design.permutations < 19 {
        return Err(Error::Domain(format!(
            "need at least 19 permutations, got {}",
            design.permutations
        )));
    }
    let n = candidates[0].1.n();
    let (x, beta) = design_x(design, n)?;

    let mut rows = Vec::new();
    for (d_idx, (label, w)) in candidates.iter().enumerate() {
        let s = build_residual_space(&x, w)?;
        rows.push(MetricRow {
            design_id: design.design_id.clone(),
            topology: design.topology.to_string(),
            n,
            p: design.p,
            w_label: label.clone(),
            method: "info".into(),
            rho_true: 0.0,
            metric: "i_r0".into(),
            value: restricted_information(&s),
            mc_se: 0.0,
        });
        for (r_idx, &rho) in design.rho_grid.iter().enumerate() {
            let rejections: Vec<Vec<bool>> = (0..design.replicates)
                .into_par_iter()
                .map(|rep| -> Result<Vec<bool>> {
                    let seed =
                        derive_seed(design.seed, &[d_idx as u64, r_idx as u64, rep as u64]);
                    let z = generate_sem(&x, &beta, w, rho, design.sigma, seed)?;
                    let e = contrasts(&s, &z)?;
                    design
                        .test_methods
                        .iter()
                        .map(|tm| -> Result<bool> {
                            let p = match tm {
                                PowerMethod::Exact => {
                                    exact_test(&s, &e, TestSide::Greater)?.p_value
                                }
                                PowerMethod::Z => z_test(&s, &e, TestSide::Greater)?.p_value,
                                PowerMethod::PermResaple
                                | PowerMethod::PermMoran
                                | PowerMethod::PermAple
                                | PowerMethod::PermMaple => {
                                    let stat = match tm {
                                        PowerMethod::PermResaple => Method::Resaple,
                                        PowerMethod::PermMoran => Method::Moran,
                                        PowerMethod::PermAple => Method::Aple,
                                        _ => Method::Maple,
                                    };
                                    permutation_test_prebuilt(
                                        &s,
                                        &z,
                                        &x,
                                        w,
                                        stat,
                                        PermutationScheme::FreedmanLane,
                                        design.permutations,
                                        derive_seed(seed, &[1]),
                                        TestSide::Greater,
                                    )?
                                    .p_value
                                }
                            };
                            Ok(p <= design.alpha)
                        })
                        .collect()
                })
                .collect::<Result<_>>()?;

            for (t_idx, tm) in design.test_methods.iter().enumerate() {
                let k = design.replicates as f64;
                let rate =
                    rejections.iter().filter(|r| r[t_idx]).count() as f64 / k;
                rows.push(MetricRow {
                    design_id: design.design_id.clone(),
                    topology: design.topology.to_string(),
                    n,
                    p: design.p,
                    w_label: label.clone(),
                    method: tm.to_string(),
                    rho_true: rho,
                    metric: "rejection_rate".into(),
                    value: rate,
                    mc_se: (rate * (1.0 - rate) / k).sqrt(),
                });
            }
        }
    }
    Ok(SimMetrics { rows })
}
