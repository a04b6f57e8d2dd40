//! Exploratory products: scatterplot coordinates whose slope through the
//! origin is the estimator itself, the per-unit contribution decomposition,
//! and the information-based weight-matrix comparison table.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::residual_space::{build_residual_space, restricted_information, DesignMatrix, ResidualSpace};
use crate::weights::{null_information_unrestricted, WeightMatrix};

#[derive(Debug, Clone)]
pub struct ScatterPoint {
    pub id: usize,
    pub x_tilde: f64,
    pub y_tilde: f64,
    pub c_i: f64,
    pub s_i: f64,
    pub leverage: f64,
}

#[derive(Debug, Clone)]
pub struct ScatterData {
    pub points: Vec<ScatterPoint>,
    pub rho_hat: f64,
}

/// Whitened scatter coordinates mapped back to unit space:
/// x_tilde = H B_r^{1/2} e and y_tilde = H B_r^{-1/2} A_r e, so the
/// through-origin OLS slope of y_tilde on x_tilde is the estimator.
pub fn scatter_coordinates(s: &ResidualSpace, e: &DVector<f64>) -> Result<ScatterData> {
    if e.len() != s.r() {
        return Err(Error::LengthMismatch {
            expected: s.r(),
            got: e.len(),
        });
    }
    let ee = e.dot(e);
    // negated comparison is deliberate: it also rejects NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(ee > 0.0) || !ee.is_finite() {
        return Err(Error::Degenerate("contrast vector is zero or non-finite".into()));
    }
    let b_half = s.denominator_power(0.5)?;
    let b_neg_half = s.denominator_power(-0.5)?;
    let a = s.numerator_operator();

    let h = s.basis();
    let x_tilde = h * (&b_half * e);
    let y_tilde = h * (&b_neg_half * (&a * e));

    let den: f64 = x_tilde.dot(&x_tilde);
    let num: f64 = x_tilde.dot(&y_tilde);
    let rho_hat = num / den;

    let points = (0..s.n())
        .map(|i| {
            let c_i = x_tilde[i] * y_tilde[i];
            ScatterPoint {
                id: i,
                x_tilde: x_tilde[i],
                y_tilde: y_tilde[i],
                c_i,
                s_i: c_i / den,
                leverage: x_tilde[i] * x_tilde[i],
            }
        })
        .collect();
    Ok(ScatterData { points, rho_hat })
}

/// Per-unit contributions (C_i, S_i) with sum of S_i equal to rho_hat.
pub fn local_contributions(s: &ResidualSpace, e: &DVector<f64>) -> Result<Vec<(f64, f64)>> {
    let scatter = scatter_coordinates(s, e)?;
    Ok(scatter.points.iter().map(|p| (p.c_i, p.s_i)).collect())
}

#[derive(Debug, Clone)]
pub struct WeightComparisonRow {
    pub label: String,
    pub avg_degree: f64,
    pub i_n0: f64,
    pub i_r0: f64,
    pub info_ratio: f64,
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct WeightComparison {
    pub rows: Vec<WeightComparisonRow>,
}

/// Ranks candidate weight matrices by restricted null information I_r(0)
/// for a fixed design; rows are sorted by descending I_r(0) and the argmax
/// is flagged. The full table is reported so the ranking can be read in
/// context rather than trusting the argmax blindly.
pub fn compare_weights(
    x: &DesignMatrix,
    candidates: &[(String, WeightMatrix)],
) -> Result<WeightComparison> {
    if candidates.is_empty() {
        return Err(Error::InvalidDimension(
            "weight comparison requires at least one candidate".into(),
        ));
    }
    let n = x.n();
    let mut rows = Vec::with_capacity(candidates.len());
    for (label, w) in candidates {
        if w.n() != n {
            return Err(Error::InvalidDimension(format!(
                "candidate '{label}' has n = {}, design has n = {n}",
                w.n()
            )));
        }
        let s = build_residual_space(x, w)?;
        let i_r0 = restricted_information(&s);
        let i_n0 = null_information_unrestricted(w);
        rows.push(WeightComparisonRow {
            label: label.clone(),
            avg_degree: w.average_degree(),
            i_n0,
            i_r0,
            info_ratio: i_r0 / i_n0,
            selected: false,
        });
    }
    rows.sort_by(|a, b| {
        b.i_r0
            .partial_cmp(&a.i_r0)
            .unwrap()
            .then_with(|| a.label.cmp(&b.label))
    });
    rows[0].selected = true;
    Ok(WeightComparison { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::resaple;
    use crate::weights::{build_knn, build_lattice, row_standardize, AdjacencyGraph, LatticeScheme};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn queen_space(rows: usize, cols: usize, p: usize) -> (ResidualSpace, WeightMatrix, DesignMatrix) {
        let g = build_lattice(rows, cols, LatticeScheme::Queen).unwrap();
        let w = row_standardize(&g).unwrap();
        let n = rows * cols;
        let x = if p == 0 {
            DesignMatrix::empty(n)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut m = DMatrix::from_element(n, p, 1.0);
            for j in 1..p {
                for i in 0..n {
                    m[(i, j)] = rng.sample::<f64, _>(StandardNormal);
                }
            }
            DesignMatrix::new(m).unwrap()
        };
        let s = build_residual_space(&x, &w).unwrap();
        (s, w, x)
    }

    fn random_e(r: usize, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(r, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn slope_equals_estimator() {
        let (s, _, _) = queen_space(3, 4, 3);
        let e = random_e(s.r(), 21);
        let scatter = scatter_coordinates(&s, &e).unwrap();
        let rho = resaple(&s, &e).unwrap().rho_hat;
        assert_abs_diff_eq!(scatter.rho_hat, rho, epsilon = 1e-10);

        let num: f64 = scatter.points.iter().map(|p| p.x_tilde * p.y_tilde).sum();
        let den: f64 = scatter.points.iter().map(|p| p.x_tilde * p.x_tilde).sum();
        assert_abs_diff_eq!(num / den, rho, epsilon = 1e-12);
    }

    #[test]
    fn whitening_identities() {
        let (s, _, _) = queen_space(3, 4, 2);
        let e = random_e(s.r(), 5);
        let scatter = scatter_coordinates(&s, &e).unwrap();
        let b = s.denominator_operator();
        let a = s.numerator_operator();
        let ebe = (e.transpose() * b * &e)[(0, 0)];
        let eae = (e.transpose() * &a * &e)[(0, 0)];
        let sum_x2: f64 = scatter.points.iter().map(|p| p.leverage).sum();
        let sum_xy: f64 = scatter.points.iter().map(|p| p.c_i).sum();
        assert_abs_diff_eq!(sum_x2, ebe, epsilon = 1e-10);
        assert_abs_diff_eq!(sum_xy, eae, epsilon = 1e-10);
    }

    #[test]
    fn scatter_dense_oracle_n6() {
        let (s, _, _) = queen_space(2, 3, 1);
        let e = random_e(s.r(), 33);
        let scatter = scatter_coordinates(&s, &e).unwrap();

        // independent dense route: eigendecompose B_r directly
        let eig = nalgebra::SymmetricEigen::new(s.denominator_operator().clone());
        let mut half = DMatrix::zeros(s.r(), s.r());
        let mut neg_half = DMatrix::zeros(s.r(), s.r());
        for j in 0..s.r() {
            let l = eig.eigenvalues[j].max(0.0);
            let v = eig.eigenvectors.column(j);
            half += v * v.transpose() * l.sqrt();
            neg_half += v * v.transpose() * (1.0 / l.sqrt());
        }
        let a = s.numerator_operator();
        let xo = s.basis() * (&half * &e);
        let yo = s.basis() * (&neg_half * (&a * &e));
        let eae = (e.transpose() * &a * &e)[(0, 0)];
        let sum_xy: f64 = scatter.points.iter().map(|p| p.c_i).sum();
        assert_abs_diff_eq!(sum_xy, eae, epsilon = 1e-10);
        for (p, (xi, yi)) in scatter.points.iter().zip(xo.iter().zip(yo.iter())) {
            assert_abs_diff_eq!(p.x_tilde, *xi, epsilon = 1e-9);
            assert_abs_diff_eq!(p.y_tilde, *yi, epsilon = 1e-9);
        }
    }

    #[test]
    fn scale_homogeneity_and_zero_rejection() {
        let (s, _, _) = queen_space(3, 3, 2);
        let e = random_e(s.r(), 8);
        let base = scatter_coordinates(&s, &e).unwrap();
        let scaled = scatter_coordinates(&s, &(&e * 3.5)).unwrap();
        assert_abs_diff_eq!(scaled.rho_hat, base.rho_hat, epsilon = 1e-12);
        for (a, b) in scaled.points.iter().zip(&base.points) {
            assert_abs_diff_eq!(a.x_tilde, 3.5 * b.x_tilde, epsilon = 1e-10);
            assert_abs_diff_eq!(a.y_tilde, 3.5 * b.y_tilde, epsilon = 1e-10);
        }
        assert!(scatter_coordinates(&s, &DVector::zeros(s.r())).is_err());
    }

    #[test]
    fn contributions_sum_to_estimate() {
        let (s, _, _) = queen_space(3, 4, 3);
        let e = random_e(s.r(), 77);
        let contrib = local_contributions(&s, &e).unwrap();
        let total: f64 = contrib.iter().map(|(_, si)| si).sum();
        let rho = resaple(&s, &e).unwrap().rho_hat;
        assert_abs_diff_eq!(total, rho, epsilon = 1e-10);
    }

    #[test]
    fn quadrant_signs() {
        let (s, _, _) = queen_space(3, 4, 1);
        let e = random_e(s.r(), 12);
        let scatter = scatter_coordinates(&s, &e).unwrap();
        for p in &scatter.points {
            if p.x_tilde * p.y_tilde > 0.0 {
                assert!(p.c_i > 0.0);
            } else if p.x_tilde * p.y_tilde < 0.0 {
                assert!(p.c_i < 0.0);
            }
        }
    }

    #[test]
    fn single_candidate_selected() {
        let g = build_lattice(3, 3, LatticeScheme::Rook).unwrap();
        let w = row_standardize(&g).unwrap();
        let x = DesignMatrix::intercept_only(9).unwrap();
        let cmp = compare_weights(&x, &[("rook".into(), w)]).unwrap();
        assert_eq!(cmp.rows.len(), 1);
        assert!(cmp.rows[0].selected);
        assert!(cmp.rows[0].info_ratio > 0.0 && cmp.rows[0].info_ratio <= 1.0);
    }

    #[test]
    fn info_ratio_one_without_covariates() {
        let g = build_lattice(3, 3, LatticeScheme::Queen).unwrap();
        let w = row_standardize(&g).unwrap();
        let x = DesignMatrix::empty(9);
        let cmp = compare_weights(&x, &[("queen".into(), w)]).unwrap();
        assert_abs_diff_eq!(cmp.rows[0].info_ratio, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn lattice_candidates_ordered_and_bounded() {
        let n_side = 10;
        let n = n_side * n_side;
        let coords: Vec<(f64, f64)> = (0..n)
            .map(|i| ((i % n_side) as f64, (i / n_side) as f64))
            .collect();
        let mut candidates: Vec<(String, WeightMatrix)> = Vec::new();
        for (label, scheme) in [("rook", LatticeScheme::Rook), ("queen", LatticeScheme::Queen)] {
            let g = build_lattice(n_side, n_side, scheme).unwrap();
            candidates.push((label.into(), row_standardize(&g).unwrap()));
        }
        for k in [4usize, 6, 8] {
            let g = build_knn(&coords, k).unwrap();
            candidates.push((format!("knn{k}"), row_standardize(&g).unwrap()));
        }
        let x = DesignMatrix::intercept_only(n).unwrap();
        let cmp = compare_weights(&x, &candidates).unwrap();

        for pair in cmp.rows.windows(2) {
            assert!(pair[0].i_r0 >= pair[1].i_r0);
        }
        for row in &cmp.rows {
            assert!(row.info_ratio > 0.0 && row.info_ratio <= 1.0 + 1e-12, "{}", row.label);
        }
        // lower degree carries more information per unit: rook beats queen,
        // and information falls along knn4 > knn6 > knn8
        let ir = |label: &str| cmp.rows.iter().find(|r| r.label == label).unwrap().i_r0;
        assert!(ir("rook") > ir("queen"));
        assert!(ir("knn4") > ir("knn6"));
        assert!(ir("knn6") > ir("knn8"));

        // cross-check each i_r0 against the dense 2 Tr(MKMK) oracle
        for (label, w) in &candidates {
            let m = x.annihilator();
            let k = w.symmetric_part();
            let mk = &m * &k;
            let oracle = 2.0 * (&mk * &mk).trace();
            let row = cmp.rows.iter().find(|r| &r.label == label).unwrap();
            assert_abs_diff_eq!(row.i_r0, oracle, epsilon = 1e-8);
        }
    }

    #[test]
    fn adding_columns_never_raises_information() {
        let g = build_lattice(4, 4, LatticeScheme::Queen).unwrap();
        let w = row_standardize(&g).unwrap();
        let n = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let full = DMatrix::from_fn(n, 5, |i, j| {
            if j == 0 {
                1.0
            } else {
                let _ = i;
                rng.sample::<f64, _>(StandardNormal)
            }
        });
        let mut last = f64::INFINITY;
        for p in 1..=5 {
            let x = DesignMatrix::new(full.columns(0, p).into_owned()).unwrap();
            let s = build_residual_space(&x, &w).unwrap();
            let i_r0 = restricted_information(&s);
            assert!(i_r0 <= last + 1e-10, "information rose when appending column {p}");
            last = i_r0;
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let g = AdjacencyGraph::from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0)], None).unwrap();
        let w = row_standardize(&g).unwrap();
        let x = DesignMatrix::intercept_only(5).unwrap();
        assert!(compare_weights(&x, &[("cycle".into(), w)]).is_err());
    }
}
