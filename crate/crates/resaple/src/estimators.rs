//! Point estimators of the spatial dependence parameter rho: residual
//! Moran's index, APLE, MAPLE, RESAPLE, the restricted score, the restricted
//! profile log-likelihood, and its full REML maximizer.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::residual_space::{build_residual_space, contrasts, DesignMatrix, ResidualSpace};
use crate::weights::{Normalization, WeightMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Moran,
    Aple,
    Maple,
    Resaple,
    Reml,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Moran => "moran",
            Method::Aple => "aple",
            Method::Maple => "maple",
            Method::Resaple => "resaple",
            Method::Reml => "reml",
        };
        f.write_str(s)
    }
}

/// Estimator output. One-step methods carry the numerator and denominator of
/// their quadratic-form ratio; REML carries the profiled variance and
/// log-likelihood instead.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateResult {
    pub method: Method,
    pub rho_hat: f64,
    pub numerator: Option<f64>,
    pub denominator: Option<f64>,
    pub sigma2_hat: Option<f64>,
    pub loglik: Option<f64>,
    /// Set when a REML solution sits on the search-interval boundary.
    pub boundary: bool,
}

impl EstimateResult {
    fn one_step(method: Method, numerator: f64, denominator: f64) -> Self {
        Self {
            method,
            rho_hat: numerator / denominator,
            numerator: Some(numerator),
            denominator: Some(denominator),
            sigma2_hat: None,
            loglik: None,
            boundary: false,
        }
    }
}

fn quad(v: &DVector<f64>, a: &DMatrix<f64>) -> f64 {
    (v.transpose() * a * v)[(0, 0)]
}

/// Moran's index on OLS residuals: r^T W r / r^T r with r = M z.
///
/// With row-standardized W the usual n/S0 prefactor is 1, so no extra
/// normalization is applied.
pub fn moran_residual(
    z: &DVector<f64>,
    x: &DesignMatrix,
    w: &WeightMatrix,
) -> Result<EstimateResult> {
    if z.len() != w.n() {
        return Err(Error::LengthMismatch {
            expected: w.n(),
            got: z.len(),
        });
    }
    let resid = x.residuals(z)?;
    let den = resid.dot(&resid);
    if den <= 0.0 || !den.is_finite() {
        return Err(Error::Degenerate("OLS residuals vanish".into()));
    }
    let num = resid.dot(&(w.matrix() * &resid));
    Ok(EstimateResult::one_step(Method::Moran, num, den))
}

/// APLE on a raw (or pre-residualized) vector:
/// z^T K z / z^T (W^T W + nu_n I) z with nu_n = Tr(W^2)/n.
pub fn aple(z: &DVector<f64>, w: &WeightMatrix) -> Result<EstimateResult> {
    let n = w.n();
    if z.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: z.len(),
        });
    }
    let k = w.symmetric_part();
    let nu_n = (w.matrix() * w.matrix()).trace() / n as f64;
    let num = quad(z, &k);
    let wz = w.matrix() * z;
    let den = wz.dot(&wz) + nu_n * z.dot(z);
    if den.abs() <= f64::EPSILON * n as f64 || !den.is_finite() {
        return Err(Error::Degenerate("APLE denominator vanishes".into()));
    }
    Ok(EstimateResult::one_step(Method::Aple, num, den))
}

/// Covariate-adjusted APLE (MAPLE):
/// Z^T MKM Z / Z^T (MW^TWM - M(W^T+W)P(W^TW)M + nu_n M) Z.
pub fn maple(z: &DVector<f64>, x: &DesignMatrix, w: &WeightMatrix) -> Result<EstimateResult> {
    let n = w.n();
    if z.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: z.len(),
        });
    }
    let m = x.annihilator();
    let p = x.projector();
    let wm = w.matrix();
    let k = w.symmetric_part();
    let nu_n = (wm * wm).trace() / n as f64;

    let mz = &m * z;
    let num = mz.dot(&(&k * &mz));

    let wtw = wm.transpose() * wm;
    let middle = (wm.transpose() + wm) * &p * &wtw;
    let den_op = &m * &wtw * &m - &m * middle * &m + &m * nu_n;
    let den = quad(z, &den_op);
    if den.abs() <= f64::EPSILON * n as f64 || !den.is_finite() {
        return Err(Error::Degenerate("MAPLE denominator vanishes".into()));
    }
    Ok(EstimateResult::one_step(Method::Maple, num, den))
}

/// RESAPLE on precomputed residual-space operators:
/// e^T (K_r - mu_r I) e / e^T B_r e.
pub fn resaple(s: &ResidualSpace, e: &DVector<f64>) -> Result<EstimateResult> {
    if e.len() != s.r() {
        return Err(Error::LengthMismatch {
            expected: s.r(),
            got: e.len(),
        });
    }
    let ee = e.dot(e);
    if ee <= 0.0 || !ee.is_finite() {
        return Err(Error::Degenerate("contrast vector e is zero".into()));
    }
    // e^T (K_r - mu_r I) e without materializing the shifted operator
    let num = quad(e, s.symmetric_part()) - s.mu_r() * ee;
    let den = quad(e, s.denominator_operator());
    if den <= 0.0 || !den.is_finite() {
        return Err(Error::Degenerate("RESAPLE denominator is not positive".into()));
    }
    Ok(EstimateResult::one_step(Method::Resaple, num, den))
}

/// Restricted profile score at rho = 0:
/// S_r(0) = r (e^T K_r e)/(e^T e) - Tr(K_r).
pub fn restricted_score(s: &ResidualSpace, e: &DVector<f64>) -> Result<f64> {
    if e.len() != s.r() {
        return Err(Error::LengthMismatch {
            expected: s.r(),
            got: e.len(),
        });
    }
    let ee = e.dot(e);
    if ee <= 0.0 || !ee.is_finite() {
        return Err(Error::Degenerate("contrast vector e is zero".into()));
    }
    let r = s.r() as f64;
    Ok(r * quad(e, s.symmetric_part()) / ee - s.symmetric_part().trace())
}

/// Approximate restricted curvature at rho = 0:
/// I_r^A(0) = -(r / e^T e) e^T B_r e.
pub fn approximate_curvature(s: &ResidualSpace, e: &DVector<f64>) -> Result<f64> {
    if e.len() != s.r() {
        return Err(Error::LengthMismatch {
            expected: s.r(),
            got: e.len(),
        });
    }
    let ee = e.dot(e);
    if ee <= 0.0 {
        return Err(Error::Degenerate("contrast vector e is zero".into()));
    }
    Ok(-(s.r() as f64 / ee) * quad(e, s.denominator_operator()))
}

/// Restricted profile log-likelihood evaluated through the contrast basis:
/// -1/2 log|Sigma_r(rho)| - (r/2) log((1/r) e^T Sigma_r(rho)^{-1} e), up to
/// an additive constant.
pub fn restricted_profile_loglik(
    x: &DesignMatrix,
    w: &WeightMatrix,
    z: &DVector<f64>,
    rho: f64,
) -> Result<f64> {
    let s = build_residual_space(x, w)?;
    let e = contrasts(&s, z)?;
    profile_loglik_eform(&s, w, &e, rho)
}

/// Contrast-basis (e-form) evaluation given a prebuilt space.
pub fn profile_loglik_eform(
    s: &ResidualSpace,
    w: &WeightMatrix,
    e: &DVector<f64>,
    rho: f64,
) -> Result<f64> {
    let n = s.n();
    let r_mat = DMatrix::identity(n, n) - w.matrix() * rho;
    let lu = r_mat.transpose().lu();
    if lu.determinant().abs() < 1e-300 {
        return Err(Error::Singular(format!("I - rho W singular at rho = {rho}")));
    }
    // G = R^{-T} H, Sigma_r = G^T G
    let g = lu
        .solve(s.basis())
        .ok_or_else(|| Error::Singular(format!("I - rho W singular at rho = {rho}")))?;
    let sigma_r = g.transpose() * &g;
    let chol = sigma_r
        .cholesky()
        .ok_or_else(|| Error::Singular("Sigma_r not positive definite".into()))?;
    let logdet: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let sol = chol.solve(e);
    let q = e.dot(&sol);
    if q <= 0.0 || !q.is_finite() {
        return Err(Error::Degenerate("quadratic form e^T Sigma^{-1} e not positive".into()));
    }
    let rr = s.r() as f64;
    Ok(-0.5 * logdet - 0.5 * rr * (q / rr).ln())
}

/// Direct Z-form of the restricted profile log-likelihood:
/// log|R| - 1/2 log|X^T R^T R X| - (r/2) log((1/r) Z^T P Z). Differs from the
/// e-form by an additive constant independent of rho.
pub fn profile_loglik_zform(
    x: &DesignMatrix,
    w: &WeightMatrix,
    z: &DVector<f64>,
    rho: f64,
) -> Result<f64> {
    let (val, _sigma2) = zform_with_sigma2(x, w, z, rho)?;
    Ok(val)
}

fn zform_with_sigma2(
    x: &DesignMatrix,
    w: &WeightMatrix,
    z: &DVector<f64>,
    rho: f64,
) -> Result<(f64, f64)> {
    let n = w.n();
    if z.len() != n || x.n() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: z.len(),
        });
    }
    let p = x.p();
    let r = (n - p) as f64;
    let r_mat = DMatrix::identity(n, n) - w.matrix() * rho;
    let det = r_mat.clone().lu().determinant();
    if det.abs() < 1e-300 {
        return Err(Error::Singular(format!("I - rho W singular at rho = {rho}")));
    }
    let log_det_r = det.abs().ln();

    let rz = &r_mat * z;
    let mut qform = rz.dot(&rz);
    let mut log_det_xgx = 0.0;
    if p > 0 {
        let rx = &r_mat * x.matrix();
        let xgx = rx.transpose() * &rx;
        let chol = xgx
            .cholesky()
            .ok_or_else(|| Error::Singular("X^T R^T R X not positive definite".into()))?;
        log_det_xgx = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let xgz = rx.transpose() * &rz;
        let sol = chol.solve(&xgz);
        qform -= xgz.dot(&sol);
    }
    if qform <= 0.0 || !qform.is_finite() {
        return Err(Error::Degenerate("restricted quadratic form not positive".into()));
    }
    let sigma2 = qform / r;
    Ok((log_det_r - 0.5 * log_det_xgx - 0.5 * r * sigma2.ln(), sigma2))
}

/// Default REML search interval for a weight matrix: (-0.999, 0.999) for
/// row-standardized weights, otherwise derived from the extreme real
/// eigenvalues of W.
pub fn default_interval(w: &WeightMatrix) -> (f64, f64) {
    match w.normalization() {
        Normalization::Row => (-0.999, 0.999),
        Normalization::Raw => {
            if let Some((lo, hi)) = w.real_eigenvalue_range() {
                let upper = if hi > 0.0 { 0.999 / hi } else { 0.999 };
                let lower = if lo < 0.0 { 0.999 / lo } else { -0.999 };
                (lower, upper)
            } else {
                (-0.999, 0.999)
            }
        }
    }
}

const REML_GRID: usize = 201;
const REML_TOL: f64 = 1e-7;

/// Maximizes the restricted profile log-likelihood over rho by a coarse grid
/// search followed by golden-section refinement to absolute tolerance 1e-7.
pub fn reml_fit(
    x: &DesignMatrix,
    w: &WeightMatrix,
    z: &DVector<f64>,
    interval: Option<(f64, f64)>,
) -> Result<EstimateResult> {
    let (lo, hi) = interval.unwrap_or_else(|| default_interval(w));
    // negated comparison is deliberate: it also rejects NaN bounds
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(lo < hi) {
        return Err(Error::Domain(format!("invalid interval ({lo}, {hi})")));
    }
    let eval = |rho: f64| profile_loglik_zform(x, w, z, rho);

    let mut best_i = 0;
    let mut best_v = f64::NEG_INFINITY;
    let mut grid = Vec::with_capacity(REML_GRID);
    for i in 0..REML_GRID {
        let rho = lo + (hi - lo) * i as f64 / (REML_GRID - 1) as f64;
        let v = eval(rho)?;
        if !v.is_finite() {
            return Err(Error::Optimization(format!(
                "non-finite restricted likelihood at rho = {rho}"
            )));
        }
        if v > best_v {
            best_v = v;
            best_i = i;
        }
        grid.push(rho);
    }

    let mut a = grid[best_i.saturating_sub(1)];
    let mut b = grid[(best_i + 1).min(REML_GRID - 1)];
    // golden-section maximization on [a, b]
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = eval(c)?;
    let mut fd = eval(d)?;
    while (b - a) > REML_TOL {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = eval(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = eval(d)?;
        }
    }
    let rho_hat = 0.5 * (a + b);
    let (loglik, sigma2) = zform_with_sigma2(x, w, z, rho_hat)?;
    let boundary = (rho_hat - lo).abs() < 10.0 * REML_TOL || (hi - rho_hat).abs() < 10.0 * REML_TOL;

    Ok(EstimateResult {
        method: Method::Reml,
        rho_hat,
        numerator: None,
        denominator: None,
        sigma2_hat: Some(sigma2),
        loglik: Some(loglik),
        boundary,
    })
}
