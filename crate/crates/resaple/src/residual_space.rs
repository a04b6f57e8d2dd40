//! Restricted residual space for a fixed (X, W) pair: contrast basis H,
//! residualized weight operators, trace constants, the (possibly stabilized)
//! denominator operator, and the restricted null information.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::weights::WeightMatrix;

/// Relative singular-value tolerance for the rank check on X.
pub const RANK_TOL: f64 = 1e-10;

/// Eigenvalue floor that triggers denominator stabilization.
const STABILIZE_FLOOR: f64 = 1e-12;

/// Full-column-rank design matrix. `p = 0` (no columns) is allowed and means
/// no fixed effects at all.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    x: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        let (n, p) = (x.nrows(), x.ncols());
        if p >= n && p > 0 {
            return Err(Error::InvalidDimension(format!(
                "design matrix needs p < n, got n = {n}, p = {p}"
            )));
        }
        if p > 0 {
            let sv = x.clone().singular_values();
            let smax = sv.max();
            let rank = sv.iter().filter(|&&s| s > RANK_TOL * smax).count();
            if rank < p {
                return Err(Error::RankDeficient { rank, p });
            }
        }
        Ok(Self { x })
    }

    /// Design with no columns (H = I_n, r = n).
    pub fn empty(n: usize) -> Self {
        Self {
            x: DMatrix::zeros(n, 0),
        }
    }

    /// Intercept-only design (a single all-ones column).
    pub fn intercept_only(n: usize) -> Result<Self> {
        Self::new(DMatrix::from_element(n, 1, 1.0))
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Orthogonal projector onto Im(X). Zero matrix when p = 0.
    pub fn projector(&self) -> DMatrix<f64> {
        let n = self.n();
        if self.p() == 0 {
            return DMatrix::zeros(n, n);
        }
        let xtx = self.x.transpose() * &self.x;
        let chol = xtx
            .cholesky()
            .expect("X^T X positive definite for full-rank X");
        let sol = chol.solve(&self.x.transpose());
        &self.x * sol
    }

    /// Annihilator M = I - P.
    pub fn annihilator(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n(), self.n()) - self.projector()
    }

    /// OLS residuals M z.
    pub fn residuals(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.n() {
            return Err(Error::LengthMismatch {
                expected: self.n(),
                got: z.len(),
            });
        }
        if self.p() == 0 {
            return Ok(z.clone());
        }
        let xtx = self.x.transpose() * &self.x;
        let chol = xtx.cholesky().expect("full rank");
        let coef = chol.solve(&(self.x.transpose() * z));
        Ok(z - &self.x * coef)
    }
}

/// How the orthonormal contrast basis H is obtained. QR is the canonical
/// choice; the eigendecomposition of M exists to exercise basis invariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastBasis {
    Qr,
    EigenM,
}

/// Precomputed residual-space operators for a fixed (X, W) pair.
///
/// Immutable after construction and safe to share across threads.
#[derive(Debug, Clone)]
pub struct ResidualSpace {
    n: usize,
    p: usize,
    r: usize,
    h: DMatrix<f64>,
    w_r: DMatrix<f64>,
    k_r: DMatrix<f64>,
    mu_r: f64,
    nu_r: f64,
    b_r: DMatrix<f64>,
    stabilized: bool,
    i_r0: f64,
    // eigendecomposition of W_r^T W_r plus the isotropic shift actually used,
    // so B_r^{±1/2} can be formed without refactorizing
    gram_eigvecs: DMatrix<f64>,
    gram_eigvals: DVector<f64>,
    shift: f64,
}

impl ResidualSpace {
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn p(&self) -> usize {
        self.p
    }
    pub fn r(&self) -> usize {
        self.r
    }
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.h
    }
    pub fn residualized_weights(&self) -> &DMatrix<f64> {
        &self.w_r
    }
    pub fn symmetric_part(&self) -> &DMatrix<f64> {
        &self.k_r
    }
    pub fn mu_r(&self) -> f64 {
        self.mu_r
    }
    pub fn nu_r(&self) -> f64 {
        self.nu_r
    }
    /// Denominator operator B_r (stabilized form if `stabilized()`).
    pub fn denominator_operator(&self) -> &DMatrix<f64> {
        &self.b_r
    }
    pub fn stabilized(&self) -> bool {
        self.stabilized
    }
    /// Numerator operator A_r = K_r - mu_r I.
    pub fn numerator_operator(&self) -> DMatrix<f64> {
        &self.k_r - DMatrix::identity(self.r, self.r) * self.mu_r
    }

    /// Matrix power B_r^alpha through the shared eigendecomposition of
    /// W_r^T W_r, with eigenvalues floored at 1e-12 times the largest.
    pub fn denominator_power(&self, alpha: f64) -> Result<DMatrix<f64>> {
        let evs: Vec<f64> = self
            .gram_eigvals
            .iter()
            .map(|&g| g + self.shift)
            .collect();
        let max = evs.iter().cloned().fold(f64::MIN, f64::max);
        if max <= 0.0 {
            return Err(Error::Degenerate(
                "denominator operator is not positive definite".into(),
            ));
        }
        let floor = 1e-12 * max;
        let mut d = DMatrix::zeros(self.r, self.r);
        for (i, &ev) in evs.iter().enumerate() {
            let e = ev.max(floor);
            if e <= 0.0 {
                return Err(Error::Degenerate(
                    "denominator operator is not positive definite".into(),
                ));
            }
            d[(i, i)] = e.powf(alpha);
        }
        Ok(&self.gram_eigvecs * d * self.gram_eigvecs.transpose())
    }
}

fn orthonormal_complement(x: &DesignMatrix, basis: ContrastBasis) -> DMatrix<f64> {
    let (n, p) = (x.n(), x.p());
    if p == 0 {
        return DMatrix::identity(n, n);
    }
    match basis {
        ContrastBasis::Qr => {
            // full QR of X via [X | I]: the trailing n - p columns of Q span
            // the orthogonal complement of Im(X)
            let mut aug = DMatrix::zeros(n, p + n);
            aug.view_mut((0, 0), (n, p)).copy_from(x.matrix());
            aug.view_mut((0, p), (n, n))
                .copy_from(&DMatrix::identity(n, n));
            let q = aug.qr().q();
            q.columns(p, n - p).into_owned()
        }
        ContrastBasis::EigenM => {
            let m = x.annihilator();
            let eig = nalgebra::SymmetricEigen::new(m);
            let mut cols: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
            cols.sort_by(|&a, &b| {
                eig.eigenvalues[b]
                    .partial_cmp(&eig.eigenvalues[a])
                    .unwrap()
            });
            let mut h = DMatrix::zeros(n, cols.len());
            for (k, &i) in cols.iter().enumerate() {
                h.set_column(k, &eig.eigenvectors.column(i));
            }
            h
        }
    }
}

/// Builds the residual space with the canonical QR contrast basis.
pub fn build_residual_space(x: &DesignMatrix, w: &WeightMatrix) -> Result<ResidualSpace> {
    build_residual_space_with(x, w, ContrastBasis::Qr)
}

/// Builds the residual space with an explicit basis choice.
pub fn build_residual_space_with(
    x: &DesignMatrix,
    w: &WeightMatrix,
    basis: ContrastBasis,
) -> Result<ResidualSpace> {
    let n = x.n();
    if w.n() != n {
        return Err(Error::InvalidDimension(format!(
            "design has n = {n} but weights have n = {}",
            w.n()
        )));
    }
    let p = x.p();
    if n - p < 1 {
        return Err(Error::InvalidDimension(format!(
            "residual dimension n - p = {} must be at least 1",
            n - p
        )));
    }
    let r = n - p;
    let h = orthonormal_complement(x, basis);

    // basis sanity: H^T H = I, H^T X = 0
    let hth = h.transpose() * &h;
    let id = DMatrix::identity(r, r);
    if (hth - &id).abs().max() > 1e-10 {
        return Err(Error::Consistency("H^T H deviates from identity".into()));
    }
    if p > 0 {
        let htx = h.transpose() * x.matrix();
        let scale = x.matrix().abs().max().max(1.0);
        if htx.abs().max() > 1e-10 * scale {
            return Err(Error::Consistency("H^T X deviates from zero".into()));
        }
    }

    let w_r = h.transpose() * w.matrix() * &h;
    let k_r = (&w_r + w_r.transpose()) * 0.5;
    let mu_r = k_r.trace() / r as f64;
    let tr_w2 = (&w_r * &w_r).trace();
    let nu_r = tr_w2 / r as f64;

    let gram = w_r.transpose() * &w_r;
    let tr_wtw = gram.trace();
    let eig = nalgebra::SymmetricEigen::new(gram.clone());
    let min_eig = eig.eigenvalues.min();

    let (shift, stabilized) = if nu_r <= 0.0 || min_eig + nu_r <= STABILIZE_FLOOR {
        (tr_wtw / r as f64, true)
    } else {
        (nu_r, false)
    };
    let b_r = &gram + DMatrix::identity(r, r) * shift;

    // restricted null information, cross-checked in two algebraic forms plus
    // the basis-free projector form 2 Tr(MKMK)
    let i_r0 = 2.0 * (&k_r * &k_r).trace();
    let alt = tr_wtw + tr_w2;
    let scale = i_r0.abs().max(1.0);
    if (i_r0 - alt).abs() > 1e-10 * scale {
        return Err(Error::Consistency(format!(
            "2Tr(K_r^2) = {i_r0} disagrees with Tr(W_r^T W_r) + Tr(W_r^2) = {alt}"
        )));
    }
    let m = x.annihilator();
    let k = w.symmetric_part();
    let mk = &m * &k;
    let basis_free = 2.0 * (&mk * &mk).trace();
    if (i_r0 - basis_free).abs() > 1e-8 * scale {
        return Err(Error::Consistency(format!(
            "basis form {i_r0} disagrees with 2Tr(MKMK) = {basis_free}"
        )));
    }

    Ok(ResidualSpace {
        n,
        p,
        r,
        h,
        w_r,
        k_r,
        mu_r,
        nu_r,
        b_r,
        stabilized,
        i_r0,
        gram_eigvecs: eig.eigenvectors,
        gram_eigvals: eig.eigenvalues,
        shift,
    })
}

/// Residual contrasts e = H^T z.
pub fn contrasts(s: &ResidualSpace, z: &DVector<f64>) -> Result<DVector<f64>> {
    if z.len() != s.n {
        return Err(Error::LengthMismatch {
            expected: s.n,
            got: z.len(),
        });
    }
    Ok(s.h.transpose() * z)
}

/// Restricted null Fisher information I_r(0) = 2 Tr(K_r^2).
pub fn restricted_information(s: &ResidualSpace) -> f64 {
    s.i_r0
}
