//! Global and local tests of H0: rho = 0: the Gaussian exact test via the
//! quadratic-form spectrum, permutation calibration (coordinate and
//! Freedman-Lane schemes), the asymptotic z-test, and permutation-based
//! local contribution tests with Benjamini-Hochberg adjustment.

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{aple, maple, moran_residual, resaple, Method};
use crate::quadform::{imhof_tail, test_spectrum};
use crate::residual_space::{build_residual_space, contrasts, restricted_information, DesignMatrix, ResidualSpace};
use crate::rngutil::derive_seed;
use crate::weights::WeightMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSide {
    Greater,
    Less,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Exact,
    PermCoordinate,
    PermFreedmanLane,
    Z,
}

impl std::fmt::Display for TestMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TestMethod::Exact => "exact",
            TestMethod::PermCoordinate => "perm_coordinate",
            TestMethod::PermFreedmanLane => "perm_freedman_lane",
            TestMethod::Z => "z",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PermutationScheme {
    Coordinate,
    FreedmanLane,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    pub side: TestSide,
    pub permutations: Option<usize>,
    pub seed: Option<u64>,
    pub min_attainable_p: Option<f64>,
    /// Set when Imhof quadrature could not certify its error target.
    pub accuracy_warning: bool,
}

fn combine_sides(side: TestSide, p_greater: f64, p_less: f64) -> f64 {
    match side {
        TestSide::Greater => p_greater,
        TestSide::Less => p_less,
        TestSide::TwoSided => (2.0 * p_greater.min(p_less)).min(1.0),
    }
}

/// Gaussian exact test: the event {rho_hat >= t} is {e^T C_t e >= 0}, a
/// sign condition on a weighted chi-square sum whose tail Imhof inversion
/// evaluates at zero. The error scale sigma^2 cancels in the sign event, so
/// no variance estimate enters.
pub fn exact_test(s: &ResidualSpace, e: &DVector<f64>, side: TestSide) -> Result<TestResult> {
    let t_obs = resaple(s, e)?.rho_hat;
    let spectrum = test_spectrum(s, t_obs)?;
    let upper = imhof_tail(spectrum.eigenvalues(), 0.0)?;
    let negated: Vec<f64> = spectrum.eigenvalues().iter().map(|l| -l).collect();
    let lower = imhof_tail(&negated, 0.0)?;
    Ok(TestResult {
        statistic: t_obs,
        p_value: combine_sides(side, upper.p, lower.p),
        method: TestMethod::Exact,
        side,
        permutations: None,
        seed: None,
        min_attainable_p: None,
        accuracy_warning: upper.accuracy_warning || lower.accuracy_warning,
    })
}

/// Asymptotic z-test with statistic sqrt(I_r(0)) * rho_hat against the
/// standard normal. Known to be conservative on small irregular graphs.
pub fn z_test(s: &ResidualSpace, e: &DVector<f64>, side: TestSide) -> Result<TestResult> {
    use statrs::distribution::{ContinuousCDF, Normal};
    let rho_hat = resaple(s, e)?.rho_hat;
    let z = restricted_information(s).sqrt() * rho_hat;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p_greater = normal.sf(z);
    let p_less = normal.cdf(z);
    Ok(TestResult {
        statistic: z,
        p_value: combine_sides(side, p_greater, p_less),
        method: TestMethod::Z,
        side,
        permutations: None,
        seed: None,
        min_attainable_p: None,
        accuracy_warning: false,
    })
}

fn permuted_indices(master: u64, index: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, &[index as u64]));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn side_count(stats: &[f64], obs: f64, side: TestSide) -> usize {
    stats
        .iter()
        .filter(|&&t| match side {
            TestSide::Greater => t >= obs,
            TestSide::Less => t <= obs,
            TestSide::TwoSided => t.abs() >= obs.abs(),
        })
        .count()
}

/// Permutation test of rho = 0 for the RESAPLE statistic.
pub fn permutation_test(
    z: &DVector<f64>,
    x: &DesignMatrix,
    w: &WeightMatrix,
    scheme: PermutationScheme,
    permutations: usize,
    seed: u64,
    side: TestSide,
) -> Result<TestResult> {
    permutation_test_statistic(z, x, w, Method::Resaple, scheme, permutations, seed, side)
}

/// Permutation test for a chosen one-step statistic. The coordinate scheme
/// permutes the contrast vector e and is defined for RESAPLE only;
/// Freedman-Lane rebuilds a pseudo-response from permuted OLS residuals and
/// supports any of the residual-based statistics.
#[allow(clippy::too_many_arguments)]
pub fn permutation_test_statistic(
    z: &DVector<f64>,
    x: &DesignMatrix,
    w: &WeightMatrix,
    statistic: Method,
    scheme: PermutationScheme,
    permutations: usize,
    seed: u64,
    side: TestSide,
) -> Result<TestResult> {
    let s = build_residual_space(x, w)?;
    permutation_test_prebuilt(&s, z, x, w, statistic, scheme, permutations, seed, side)
}

/// Same as [`permutation_test_statistic`] but reuses an already-built
/// residual space, which matters inside Monte Carlo loops.
#[allow(clippy::too_many_arguments)]
pub fn permutation_test_prebuilt(
    s: &ResidualSpace,
    z: &DVector<f64>,
    x: &DesignMatrix,
    w: &WeightMatrix,
    statistic: Method,
    scheme: PermutationScheme,
    permutations: usize,
    seed: u64,
    side: TestSide,
) -> Result<TestResult> {
    if permutations < 19 {
        return Err(Error::Domain(format!(
            "need at least 19 permutations, got {permutations}"
        )));
    }
    if scheme == PermutationScheme::Coordinate && statistic != Method::Resaple {
        return Err(Error::Domain(
            "coordinate permutation is defined for the resaple statistic only".into(),
        ));
    }
    let e = contrasts(s, z)?;

    let eval = |zz: &DVector<f64>, ee: &DVector<f64>| -> Result<f64> {
        Ok(match statistic {
            Method::Resaple => resaple(s, ee)?.rho_hat,
            Method::Moran => moran_residual(zz, x, w)?.rho_hat,
            Method::Aple => aple(&x.residuals(zz)?, w)?.rho_hat,
            Method::Maple => maple(zz, x, w)?.rho_hat,
            Method::Reml => {
                return Err(Error::Domain(
                    "permutation calibration of reml is not supported".into(),
                ))
            }
        })
    };
    let obs = eval(z, &e)?;

    // Freedman-Lane ingredients: fitted values and OLS residuals
    let fitted = z - x.residuals(z)?;
    let resid = x.residuals(z)?;

    let method = match scheme {
        PermutationScheme::Coordinate => TestMethod::PermCoordinate,
        PermutationScheme::FreedmanLane => TestMethod::PermFreedmanLane,
    };

    let stats: Vec<f64> = (0..permutations)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            match scheme {
                PermutationScheme::Coordinate => {
                    let idx = permuted_indices(seed, i, e.len());
                    let e_perm = DVector::from_fn(e.len(), |k, _| e[idx[k]]);
                    Ok(resaple(s, &e_perm)?.rho_hat)
                }
                PermutationScheme::FreedmanLane => {
                    let idx = permuted_indices(seed, i, z.len());
                    let z_star =
                        &fitted + DVector::from_fn(z.len(), |k, _| resid[idx[k]]);
                    let e_star = contrasts(s, &z_star)?;
                    eval(&z_star, &e_star)
                }
            }
        })
        .collect::<Result<_>>()?;

    let count = side_count(&stats, obs, side);
    Ok(TestResult {
        statistic: obs,
        p_value: (1 + count) as f64 / (permutations + 1) as f64,
        method,
        side,
        permutations: Some(permutations),
        seed: Some(seed),
        min_attainable_p: Some(1.0 / (permutations + 1) as f64),
        accuracy_warning: false,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LocalUnit {
    pub id: usize,
    pub c_i: f64,
    pub s_i: f64,
    pub p_value: f64,
    pub p_adjusted: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LocalTestResult {
    pub units: Vec<LocalUnit>,
    pub rho_hat: f64,
    pub permutations: usize,
    pub seed: u64,
    pub fdr_q: f64,
}

/// Benjamini-Hochberg step-up adjusted p-values.
fn benjamini_hochberg(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap());
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        let candidate = (p[i] * m as f64 / (rank + 1) as f64).min(1.0);
        running = running.min(candidate);
        adjusted[i] = running;
    }
    adjusted
}

/// Local permutation tests on per-unit contributions C_i, using coordinate
/// permutation of e and two-sided p-values, with Benjamini-Hochberg
/// adjustment at level `fdr_q`.
pub fn local_tests(
    s: &ResidualSpace,
    e: &DVector<f64>,
    permutations: usize,
    seed: u64,
    fdr_q: f64,
) -> Result<LocalTestResult> {
    if permutations < 19 {
        return Err(Error::Domain(format!(
            "need at least 19 permutations, got {permutations}"
        )));
    }
    if !(0.0 < fdr_q && fdr_q < 1.0) {
        return Err(Error::Domain(format!("fdr_q must be in (0, 1), got {fdr_q}")));
    }
    let observed = crate::esda::local_contributions(s, e)?;
    let rho_hat = resaple(s, e)?.rho_hat;
    let n = s.n();

    // per-permutation contributions only need x~ and y~, so precompute the
    // two n x r maps once and apply them to each permuted e
    let xt_op = s.basis() * s.denominator_power(0.5)?;
    let yt_op = s.basis() * (s.denominator_power(-0.5)? * s.numerator_operator());

    let counts: Vec<usize> = (0..permutations)
        .into_par_iter()
        .map(|perm| {
            let idx = permuted_indices(seed, perm, e.len());
            let e_perm = DVector::from_fn(e.len(), |k, _| e[idx[k]]);
            let xt = &xt_op * &e_perm;
            let yt = &yt_op * &e_perm;
            (0..n)
                .map(|i| usize::from((xt[i] * yt[i]).abs() >= observed[i].0.abs()))
                .collect::<Vec<usize>>()
        })
        .reduce(
            || vec![0usize; n],
            |mut acc, v| {
                for (a, b) in acc.iter_mut().zip(v) {
                    *a += b;
                }
                acc
            },
        );

    let p_values: Vec<f64> = counts
        .iter()
        .map(|&c| (1 + c) as f64 / (permutations + 1) as f64)
        .collect();
    let adjusted = benjamini_hochberg(&p_values);

    let units = (0..n)
        .map(|i| LocalUnit {
            id: i,
            c_i: observed[i].0,
            s_i: observed[i].1,
            p_value: p_values[i],
            p_adjusted: adjusted[i],
            significant: adjusted[i] <= fdr_q,
        })
        .collect();
    Ok(LocalTestResult {
        units,
        rho_hat,
        permutations,
        seed,
        fdr_q,
    })
}
