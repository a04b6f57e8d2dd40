//! Exact null-distribution machinery for quadratic forms in Gaussian
//! vectors: the threshold spectrum of the generalized Rayleigh quotient,
//! tail probabilities of weighted chi-square sums by Imhof's
//! characteristic-function inversion, and moment formulas for ordinary
//! Rayleigh quotients.

use crate::error::{Error, Result};
use crate::residual_space::ResidualSpace;

/// Eigenvalues of C_t = A_r - t B_r, the matrix whose quadratic-form sign
/// decides the event {rho_hat >= t}.
#[derive(Debug, Clone)]
pub struct QuadFormSpectrum {
    eigenvalues: Vec<f64>,
    t: f64,
}

impl QuadFormSpectrum {
    /// Eigenvalues sorted in descending order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn threshold(&self) -> f64 {
        self.t
    }
}

/// Spectrum of A_r - t B_r for the stored (stabilized if needed) B_r.
pub fn test_spectrum(s: &ResidualSpace, t: f64) -> Result<QuadFormSpectrum> {
    let a = s.numerator_operator();
    let b = s.denominator_operator();
    let c = &a - b * t;
    let asym = (&c - c.transpose()).abs().max();
    if asym > 1e-10 {
        return Err(Error::Consistency(format!(
            "threshold matrix asymmetry {asym} exceeds 1e-10"
        )));
    }
    let sym = (&c + c.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut evs: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    evs.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(QuadFormSpectrum {
        eigenvalues: evs,
        t,
    })
}

/// Tail probability with a flag set when the quadrature error estimate could
/// not be certified below the 1e-6 contract.
#[derive(Debug, Clone, Copy)]
pub struct TailProb {
    pub p: f64,
    pub accuracy_warning: bool,
}

/// Relative magnitude below which eigenvalues are dropped from the mixture.
const WEIGHT_FLOOR: f64 = 1e-12;

/// Truncation-bound target for the upper integration limit.
const TRUNC_TARGET: f64 = 1e-8;

/// 15-point Gauss-Legendre rule on [-1, 1].
#[allow(clippy::excessive_precision)]
const GL15_X: [f64; 15] = [
    -0.987_992_518_020_485_4,
    -0.937_273_392_400_705_9,
    -0.848_206_583_410_427_2,
    -0.724_417_731_360_170_1,
    -0.570_972_172_608_538_8,
    -0.394_151_347_077_563_4,
    -0.201_194_093_997_434_52,
    0.0,
    0.201_194_093_997_434_52,
    0.394_151_347_077_563_4,
    0.570_972_172_608_538_8,
    0.724_417_731_360_170_1,
    0.848_206_583_410_427_2,
    0.937_273_392_400_705_9,
    0.987_992_518_020_485_4,
];
#[allow(clippy::excessive_precision)]
const GL15_W: [f64; 15] = [
    0.030_753_241_996_117_268,
    0.070_366_047_488_108_12,
    0.107_159_220_467_171_93,
    0.139_570_677_926_154_3,
    0.166_269_205_816_993_93,
    0.186_161_000_015_562_21,
    0.198_431_485_327_111_58,
    0.202_578_241_925_561_27,
    0.198_431_485_327_111_58,
    0.186_161_000_015_562_21,
    0.166_269_205_816_993_93,
    0.139_570_677_926_154_3,
    0.107_159_220_467_171_93,
    0.070_366_047_488_108_12,
    0.030_753_241_996_117_268,
];

fn gl15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for i in 0..15 {
        acc += GL15_W[i] * f(mid + half * GL15_X[i]);
    }
    acc * half
}

/// Integrates on [a, b] with one panel versus two, bisecting until agreement.
fn adaptive_panel<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    tol: f64,
    depth: usize,
    err_acc: &mut f64,
) -> f64 {
    let whole = gl15(f, a, b);
    let mid = 0.5 * (a + b);
    let split = gl15(f, a, mid) + gl15(f, mid, b);
    let err = (whole - split).abs();
    if err <= tol || depth >= 24 {
        *err_acc += err;
        return split;
    }
    adaptive_panel(f, a, mid, tol * 0.5, depth + 1, err_acc)
        + adaptive_panel(f, mid, b, tol * 0.5, depth + 1, err_acc)
}

/// P(sum_j lambda_j chi^2_{1,j} >= x) by Imhof's inversion formula, with an
/// absolute error target of 1e-6. Equal-weight mixtures are evaluated
/// through the chi-square distribution directly.
pub fn imhof_tail(weights: &[f64], x: f64) -> Result<TailProb> {
    let max_abs = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if max_abs == 0.0 {
        return Err(Error::Degenerate("all quadratic-form weights are zero".into()));
    }
    let lam: Vec<f64> = weights
        .iter()
        .copied()
        .filter(|w| w.abs() >= WEIGHT_FLOOR * max_abs)
        .collect();
    let m = lam.len();

    // equal weights: c * chi^2_m is exact through the gamma tail
    let all_equal = lam.iter().all(|&l| (l - lam[0]).abs() <= 1e-14 * max_abs);
    if all_equal {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let c = lam[0];
        let chi = ChiSquared::new(m as f64).expect("positive dof");
        let p = if c > 0.0 {
            if x <= 0.0 {
                1.0
            } else {
                chi.sf(x / c)
            }
        } else if x > 0.0 {
            0.0
        } else {
            chi.cdf(x / c)
        };
        return Ok(TailProb {
            p,
            accuracy_warning: false,
        });
    }

    // Imhof (1961): P(Q >= x) = 1/2 + (1/pi) \int_0^inf sin(theta(u)) / (u rho(u)) du
    let theta = |u: f64| -> f64 {
        0.5 * lam.iter().map(|&l| (l * u).atan()).sum::<f64>() - 0.5 * x * u
    };
    let log_rho = |u: f64| -> f64 {
        0.25 * lam.iter().map(|&l| (l * l * u * u).ln_1p()).sum::<f64>()
    };
    let sum_lam: f64 = lam.iter().sum();
    let integrand = |u: f64| -> f64 {
        if u <= 0.0 {
            return 0.5 * (sum_lam - x);
        }
        theta(u).sin() / (u * (log_rho(u)).exp())
    };

    // upper limit from the truncation-error bound
    // tail <= 1 / (pi * k * U^k * prod |lambda|^{1/2}), k = m/2
    let k = m as f64 / 2.0;
    let log_prod_sqrt: f64 = 0.5 * lam.iter().map(|l| l.abs().ln()).sum::<f64>();
    let log_u = (-(TRUNC_TARGET.ln() + std::f64::consts::PI.ln() + k.ln() + log_prod_sqrt)) / k;
    let mut upper = log_u.exp();
    let mut warning = false;
    const UPPER_CAP: f64 = 5e6;
    if upper > UPPER_CAP {
        // certify against the looser 1e-6 contract at the cap
        let bound_at_cap =
            (-(std::f64::consts::PI.ln() + k.ln() + k * UPPER_CAP.ln() + log_prod_sqrt)).exp();
        warning = bound_at_cap > 1e-6;
        upper = UPPER_CAP;
    }

    // advance in sub-half-period panels so the oscillation is resolved
    let sum_abs: f64 = lam.iter().map(|l| l.abs()).sum();
    let mut total = 0.0;
    let mut err_acc = 0.0;
    let mut a = 0.0;
    while a < upper {
        let damp: f64 = 0.5 * lam.iter().map(|&l| l.abs() / (1.0 + l * l * a * a)).sum::<f64>();
        let slope = damp.min(0.5 * sum_abs) + 0.5 * x.abs();
        let step = (std::f64::consts::PI / (slope + 1e-12)).min(upper - a).max(1e-8);
        let b = (a + step).min(upper);
        total += adaptive_panel(&integrand, a, b, 1e-10, 0, &mut err_acc);
        a = b;
    }
    if err_acc > 1e-6 {
        warning = true;
    }
    let p = (0.5 + total / std::f64::consts::PI).clamp(0.0, 1.0);
    Ok(TailProb {
        p,
        accuracy_warning: warning,
    })
}

/// Mean and variance of the ordinary Rayleigh quotient g^T S g / g^T g for
/// g ~ N(0, I_r), as functions of the spectrum of S. Requires r >= 3.
pub fn rayleigh_moments(eigenvalues: &[f64]) -> Result<(f64, f64)> {
    let r = eigenvalues.len();
    if r < 3 {
        return Err(Error::Domain(format!(
            "Rayleigh moment formulas require r >= 3, got r = {r}"
        )));
    }
    let rf = r as f64;
    let mean = eigenvalues.iter().sum::<f64>() / rf;
    let ss: f64 = eigenvalues.iter().map(|l| (l - mean).powi(2)).sum();
    let var = 2.0 / (rf * (rf + 2.0)) * ss;
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residual_space::{build_residual_space, DesignMatrix};
    use crate::weights::{build_lattice, row_standardize, LatticeScheme};
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn chi2_two_tail() {
        let p = imhof_tail(&[1.0, 1.0], 2.0).unwrap();
        assert_abs_diff_eq!(p.p, (-1.0f64).exp(), epsilon = 1e-9);
        assert!(!p.accuracy_warning);
    }

    #[test]
    fn chi1_tail() {
        let p = imhof_tail(&[1.0], 1.0).unwrap();
        assert_abs_diff_eq!(p.p, 0.317_310_507_862_914, epsilon = 1e-8);
    }

    #[test]
    fn mixed_sign_matches_monte_carlo() {
        let weights = [2.0, 1.0, -1.0];
        let x = 0.5;
        let p = imhof_tail(&weights, x).unwrap().p;

        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let draws = 1_000_000usize;
        let mut hits = 0usize;
        for _ in 0..draws {
            let q: f64 = weights
                .iter()
                .map(|&w| {
                    let g: f64 = rng.sample(StandardNormal);
                    w * g * g
                })
                .sum();
            if q >= x {
                hits += 1;
            }
        }
        let mc = hits as f64 / draws as f64;
        assert!(
            (p - mc).abs() < 0.002,
            "imhof {p} vs monte carlo {mc}"
        );
    }

    #[test]
    fn negated_weights_complement() {
        // P(Q >= x) + P(-Q >= -x) = 1 + P(Q = x) = 1 for continuous Q
        let weights = [1.5, -0.7, 0.3, 2.2];
        let neg: Vec<f64> = weights.iter().map(|w| -w).collect();
        for x in [-1.0, 0.0, 0.8, 3.0] {
            let a = imhof_tail(&weights, x).unwrap().p;
            let b = imhof_tail(&neg, -x).unwrap().p;
            assert_abs_diff_eq!(a + b, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn tail_monotone_in_threshold() {
        let weights = [1.0, 0.5, -0.25, 2.0, -1.5];
        let mut last = 1.0;
        for i in 0..40 {
            let x = -4.0 + 8.0 * i as f64 / 39.0;
            let p = imhof_tail(&weights, x).unwrap().p;
            assert!(p <= last + 1e-7, "tail increased at x = {x}");
            last = p;
        }
    }

    #[test]
    fn all_zero_weights_error() {
        assert!(imhof_tail(&[0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn spectrum_trace_zero_at_origin() {
        let g = build_lattice(2, 3, LatticeScheme::Queen).unwrap();
        let w = row_standardize(&g).unwrap();
        let s = build_residual_space(&DesignMatrix::intercept_only(6).unwrap(), &w).unwrap();
        let spec = test_spectrum(&s, 0.0).unwrap();
        let sum: f64 = spec.eigenvalues().iter().sum();
        assert_abs_diff_eq!(sum, 0.0, epsilon = 1e-10);
        // sorted descending
        for pair in spec.eigenvalues().windows(2) {
            assert!(pair[0] >= pair[1]);
        }
    }

    #[test]
    fn spectrum_all_negative_for_large_threshold() {
        let g = build_lattice(2, 3, LatticeScheme::Queen).unwrap();
        let w = row_standardize(&g).unwrap();
        let s = build_residual_space(&DesignMatrix::intercept_only(6).unwrap(), &w).unwrap();
        let spec = test_spectrum(&s, 1e6).unwrap();
        assert!(spec.eigenvalues().iter().all(|&l| l < 0.0));
    }

    #[test]
    fn spectrum_matches_dense_eigen_oracle() {
        let g = build_lattice(2, 3, LatticeScheme::Queen).unwrap();
        let w = row_standardize(&g).unwrap();
        let s = build_residual_space(&DesignMatrix::intercept_only(6).unwrap(), &w).unwrap();
        let t = 0.37;
        let spec = test_spectrum(&s, t).unwrap();

        let c = s.numerator_operator() - s.denominator_operator() * t;
        let sym = (&c + c.transpose()) * 0.5;
        let mut oracle: Vec<f64> = nalgebra::SymmetricEigen::new(sym)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        oracle.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (got, want) in spec.eigenvalues().iter().zip(&oracle) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-9);
        }
    }

    #[test]
    fn rayleigh_constant_spectrum() {
        let (m, v) = rayleigh_moments(&[3.0; 7]).unwrap();
        assert_abs_diff_eq!(m, 3.0);
        assert_abs_diff_eq!(v, 0.0);
    }

    #[test]
    fn rayleigh_formula_values() {
        let mut eigs = vec![0.0; 10];
        eigs[0] = 1.0;
        let (m, v) = rayleigh_moments(&eigs).unwrap();
        assert_abs_diff_eq!(m, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.015, epsilon = 1e-15);

        let (m, v) = rayleigh_moments(&[1.0, -1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(m, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 4.0 / 15.0, epsilon = 1e-15);
    }

    #[test]
    fn rayleigh_small_r_rejected() {
        assert!(rayleigh_moments(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn rayleigh_matches_monte_carlo() {
        let eigs = [1.0, -1.0, 0.0];
        let (mean, var) = rayleigh_moments(&eigs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        let draws = 1_000_000usize;
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for _ in 0..draws {
            let g: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let num: f64 = eigs.iter().zip(&g).map(|(l, x)| l * x * x).sum();
            let den: f64 = g.iter().map(|x| x * x).sum();
            let t = num / den;
            s1 += t;
            s2 += t * t;
        }
        let mc_mean = s1 / draws as f64;
        let mc_var = s2 / draws as f64 - mc_mean * mc_mean;
        let se_mean = (var / draws as f64).sqrt();
        assert!((mc_mean - mean).abs() < 4.0 * se_mean);
        assert!((mc_var - var).abs() / var < 0.03);
    }
}
