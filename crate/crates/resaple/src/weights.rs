//! Spatial weight matrices: adjacency construction (lattice contiguity,
//! symmetrized k-nearest-neighbour), row standardization, and the
//! degree-based trace identities underlying the null Fisher information.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Contiguity scheme for lattice graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatticeScheme {
    Rook,
    Queen,
}

/// Normalization applied to a weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Each row sums to one.
    Row,
    Raw,
}

/// Raw neighbour structure with optional unit coordinates.
///
/// Edges are stored as ordered pairs so directed adjacency is representable,
/// although every built-in constructor produces a symmetric graph.
#[derive(Debug, Clone)]
pub struct AdjacencyGraph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
    coords: Option<Vec<(f64, f64)>>,
}

impl AdjacencyGraph {
    /// Creates a graph from ordered edge pairs. Rejects self loops,
    /// out-of-range indices, and isolated units.
    pub fn from_edges(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        coords: Option<Vec<(f64, f64)>>,
    ) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i == j {
                return Err(Error::Data(format!("self loop at unit {i}")));
            }
            if i >= n || j >= n {
                return Err(Error::Data(format!(
                    "edge ({i}, {j}) out of range for n = {n}"
                )));
            }
            set.insert((i, j));
        }
        if let Some(c) = &coords {
            if c.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    got: c.len(),
                });
            }
        }
        let g = Self {
            n,
            edges: set,
            coords,
        };
        for (i, d) in g.out_degrees().iter().enumerate() {
            if *d == 0 {
                return Err(Error::IsolatedUnit { unit: i });
            }
        }
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Ordered (i, j) pairs with a_ij = 1.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    /// Undirected edge count, counting {i, j} once when both directions exist.
    pub fn undirected_edge_count(&self) -> usize {
        self.edges
            .iter()
            .filter(|(i, j)| i < j || !self.edges.contains(&(*j, *i)))
            .count()
    }

    pub fn coords(&self) -> Option<&[(f64, f64)]> {
        self.coords.as_deref()
    }

    pub fn out_degrees(&self) -> Vec<usize> {
        let mut d = vec![0usize; self.n];
        for &(i, _) in &self.edges {
            d[i] += 1;
        }
        d
    }

    pub fn is_symmetric(&self) -> bool {
        self.edges.iter().all(|&(i, j)| self.edges.contains(&(j, i)))
    }

    /// Dense binary adjacency matrix.
    pub fn dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for &(i, j) in &self.edges {
            a[(i, j)] = 1.0;
        }
        a
    }
}

/// Dense spatial weight matrix with zero diagonal.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    w: DMatrix<f64>,
    normalization: Normalization,
}

impl WeightMatrix {
    /// Wraps a dense matrix, checking squareness, zero diagonal, and (for
    /// row-standardized matrices) unit row sums.
    pub fn new(w: DMatrix<f64>, normalization: Normalization) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(Error::InvalidDimension(format!(
                "weight matrix must be square, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        for i in 0..w.nrows() {
            if w[(i, i)] != 0.0 {
                return Err(Error::Data(format!("nonzero diagonal at unit {i}")));
            }
        }
        if normalization == Normalization::Row {
            for i in 0..w.nrows() {
                let s: f64 = w.row(i).iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(Error::Data(format!(
                        "row {i} sums to {s}, expected 1 for row-standardized weights"
                    )));
                }
            }
        }
        Ok(Self { w, normalization })
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    /// Symmetric part K = (W + W^T) / 2.
    pub fn symmetric_part(&self) -> DMatrix<f64> {
        (&self.w + self.w.transpose()) * 0.5
    }

    /// Mean number of neighbours (nonzero entries) per row.
    pub fn average_degree(&self) -> f64 {
        let nz: usize = self
            .w
            .iter()
            .filter(|v| v.abs() > 0.0)
            .count();
        nz as f64 / self.n() as f64
    }

    /// Extreme real eigenvalues of W, used to derive a valid rho interval for
    /// raw (non-row-standardized) weights.
    pub fn real_eigenvalue_range(&self) -> Option<(f64, f64)> {
        let eig = self.w.clone().complex_eigenvalues();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut any = false;
        for ev in eig.iter() {
            if ev.im.abs() < 1e-9 * (1.0 + ev.re.abs()) {
                any = true;
                lo = lo.min(ev.re);
                hi = hi.max(ev.re);
            }
        }
        if any {
            Some((lo, hi))
        } else {
            None
        }
    }
}

/// Builds a rook or queen contiguity graph on a `rows` x `cols` lattice.
/// Coordinates are the 1-based integer lattice positions.
pub fn build_lattice(rows: usize, cols: usize, scheme: LatticeScheme) -> Result<AdjacencyGraph> {
    if rows == 0 || cols == 0 || rows * cols < 2 {
        return Err(Error::InvalidDimension(format!(
            "lattice must have at least 2 cells, got {rows}x{cols}"
        )));
    }
    let n = rows * cols;
    let idx = |r: usize, c: usize| r * cols + c;
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let deltas: &[(isize, isize)] = match scheme {
                LatticeScheme::Rook => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
                LatticeScheme::Queen => &[
                    (-1, -1),
                    (-1, 0),
                    (-1, 1),
                    (0, -1),
                    (0, 1),
                    (1, -1),
                    (1, 0),
                    (1, 1),
                ],
            };
            for &(dr, dc) in deltas {
                let nr = r as isize + dr;
                let nc = c as isize + dc;
                if nr >= 0 && nr < rows as isize && nc >= 0 && nc < cols as isize {
                    edges.push((idx(r, c), idx(nr as usize, nc as usize)));
                }
            }
        }
    }
    let coords = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| ((c + 1) as f64, (r + 1) as f64)))
        .collect();
    AdjacencyGraph::from_edges(n, edges, Some(coords))
}

/// Builds a symmetrized k-nearest-neighbour graph by taking the union of
/// directed neighbour relations. Distance ties are broken by lowest index.
pub fn build_knn(coords: &[(f64, f64)], k: usize) -> Result<AdjacencyGraph> {
    let n = coords.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidK { k, n });
    }
    let mut edges = Vec::new();
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let d2 = |j: usize| {
            let dx = coords[i].0 - coords[j].0;
            let dy = coords[i].1 - coords[j].1;
            dx * dx + dy * dy
        };
        // ties broken by lower index for determinism
        order.sort_by(|&a, &b| d2(a).partial_cmp(&d2(b)).unwrap().then(a.cmp(&b)));
        for &j in order.iter().take(k) {
            edges.push((i, j));
            edges.push((j, i));
        }
    }
    AdjacencyGraph::from_edges(n, edges, Some(coords.to_vec()))
}

/// Row-standardizes a graph: w_ij = a_ij / d_i.
pub fn row_standardize(g: &AdjacencyGraph) -> Result<WeightMatrix> {
    let d = g.out_degrees();
    if let Some(unit) = d.iter().position(|&x| x == 0) {
        return Err(Error::IsolatedUnit { unit });
    }
    let mut w = DMatrix::zeros(g.n(), g.n());
    for (i, j) in g.edges() {
        w[(i, j)] = 1.0 / d[i] as f64;
    }
    WeightMatrix::new(w, Normalization::Row)
}

/// Raw binary weight matrix for a graph (w_ij = a_ij).
pub fn raw_weights(g: &AdjacencyGraph) -> Result<WeightMatrix> {
    WeightMatrix::new(g.dense(), Normalization::Raw)
}

/// Degree-based trace identities for row-standardized adjacency weights:
/// Tr(W^T W) = sum_i 1/d_i and Tr(W^2) = sum_{i,j} a_ij a_ji / (d_i d_j).
pub fn degree_identities(g: &AdjacencyGraph) -> Result<(f64, f64)> {
    let d = g.out_degrees();
    if let Some(unit) = d.iter().position(|&x| x == 0) {
        return Err(Error::IsolatedUnit { unit });
    }
    let tr_wtw: f64 = d.iter().map(|&di| 1.0 / di as f64).sum();
    let tr_w2: f64 = g
        .edges()
        .filter(|&(i, j)| {
            // a_ij a_ji = 1 only when the reverse edge exists
            let _ = (i, j);
            true
        })
        .filter(|&(i, j)| g.edges.contains(&(j, i)))
        .map(|(i, j)| 1.0 / (d[i] as f64 * d[j] as f64))
        .sum();
    Ok((tr_wtw, tr_w2))
}

/// Unrestricted null information 2 Tr(K^2) = Tr(W^T W) + Tr(W^2), computed
/// from the dense matrix.
pub fn null_information_unrestricted(w: &WeightMatrix) -> f64 {
    let m = w.matrix();
    let tr_wtw: f64 = m.iter().map(|v| v * v).sum();
    let w2 = m * m;
    tr_wtw + w2.trace()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cycle(n: usize) -> AdjacencyGraph {
        let edges: Vec<_> = (0..n)
            .flat_map(|i| vec![(i, (i + 1) % n), ((i + 1) % n, i)])
            .collect();
        AdjacencyGraph::from_edges(n, edges, None).unwrap()
    }

    fn star4() -> AdjacencyGraph {
        let edges = vec![(0, 1), (1, 0), (0, 2), (2, 0), (0, 3), (3, 0)];
        AdjacencyGraph::from_edges(4, edges, None).unwrap()
    }

    #[test]
    fn lattice_2x2_rook_is_4_cycle() {
        let g = build_lattice(2, 2, LatticeScheme::Rook).unwrap();
        assert_eq!(g.undirected_edge_count(), 4);
        assert!(g.out_degrees().iter().all(|&d| d == 2));
    }

    #[test]
    fn lattice_2x2_queen_is_k4() {
        let g = build_lattice(2, 2, LatticeScheme::Queen).unwrap();
        assert_eq!(g.undirected_edge_count(), 6);
        assert!(g.out_degrees().iter().all(|&d| d == 3));
    }

    #[test]
    fn lattice_3x3_queen_degrees() {
        let g = build_lattice(3, 3, LatticeScheme::Queen).unwrap();
        let d = g.out_degrees();
        // corners 0,2,6,8; edges 1,3,5,7; center 4
        assert_eq!(d[0], 3);
        assert_eq!(d[1], 5);
        assert_eq!(d[4], 8);
    }

    #[test]
    fn lattice_too_small() {
        assert!(build_lattice(1, 1, LatticeScheme::Rook).is_err());
    }

    #[test]
    fn knn_collinear_path() {
        // 4 equispaced collinear points, k = 1: endpoints link inward, the
        // interior ties resolve to the lower index, union gives the path.
        let pts = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)];
        let g = build_knn(&pts, 1).unwrap();
        let expect: BTreeSet<(usize, usize)> =
            [(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)].into();
        let got: BTreeSet<_> = g.edges().collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn knn_triangle_complete() {
        let h = 3f64.sqrt() / 2.0;
        let pts = [(0.0, 0.0), (1.0, 0.0), (0.5, h)];
        let g = build_knn(&pts, 2).unwrap();
        assert_eq!(g.undirected_edge_count(), 3);
    }

    #[test]
    fn knn_unit_square_tie_rule() {
        // corners of the unit square, k = 1: each corner ties between its two
        // side neighbours and picks the lower index (0 -> 1, 1 -> 0, 2 -> 0,
        // 3 -> 1), so the union is the path 2-0-1-3
        let pts = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
        let g = build_knn(&pts, 1).unwrap();
        let got: BTreeSet<_> = g.edges().collect();
        let expect: BTreeSet<(usize, usize)> =
            [(0, 1), (1, 0), (0, 2), (2, 0), (1, 3), (3, 1)].into();
        assert_eq!(got, expect);
    }

    #[test]
    fn knn_invalid_k() {
        let pts = [(0.0, 0.0), (1.0, 0.0)];
        assert!(matches!(
            build_knn(&pts, 2),
            Err(Error::InvalidK { k: 2, n: 2 })
        ));
    }

    #[test]
    fn row_standardize_cycle_and_star() {
        let w = row_standardize(&cycle(3)).unwrap();
        for i in 0..3 {
            let row: Vec<f64> = w.matrix().row(i).iter().copied().collect();
            assert_eq!(row.iter().filter(|&&v| v == 0.5).count(), 2);
        }

        let w = row_standardize(&star4()).unwrap();
        assert_abs_diff_eq!(w.matrix()[(0, 1)], 1.0 / 3.0);
        assert_abs_diff_eq!(w.matrix()[(1, 0)], 1.0);
        assert_abs_diff_eq!(w.matrix()[(1, 2)], 0.0);
    }

    #[test]
    fn degree_identities_regular_graphs() {
        // d-regular: tr_wtw + tr_w2 = 2n/d
        let (a, b) = degree_identities(&cycle(8)).unwrap();
        assert_abs_diff_eq!(a + b, 8.0, epsilon = 1e-12);

        let g = build_lattice(2, 2, LatticeScheme::Queen).unwrap(); // K4
        let (a, b) = degree_identities(&g).unwrap();
        assert_abs_diff_eq!(a + b, 8.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn degree_identities_star() {
        let (tr_wtw, tr_w2) = degree_identities(&star4()).unwrap();
        assert_abs_diff_eq!(tr_wtw, 1.0 / 3.0 + 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tr_w2, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn null_information_matches_identities() {
        for g in [cycle(8), star4(), build_lattice(3, 4, LatticeScheme::Queen).unwrap()] {
            let w = row_standardize(&g).unwrap();
            let (a, b) = degree_identities(&g).unwrap();
            assert_abs_diff_eq!(
                null_information_unrestricted(&w),
                a + b,
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn null_information_zero_matrix() {
        let w = WeightMatrix::new(DMatrix::zeros(4, 4), Normalization::Raw).unwrap();
        assert_eq!(null_information_unrestricted(&w), 0.0);
    }

    #[test]
    fn relabeling_invariance() {
        use rand::prelude::*;
        let g = build_lattice(3, 3, LatticeScheme::Queen).unwrap();
        let w = row_standardize(&g).unwrap();
        let base = null_information_unrestricted(&w);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut perm: Vec<usize> = (0..9).collect();
        perm.shuffle(&mut rng);
        let edges: Vec<_> = g.edges().map(|(i, j)| (perm[i], perm[j])).collect();
        let g2 = AdjacencyGraph::from_edges(9, edges, None).unwrap();
        let w2 = row_standardize(&g2).unwrap();
        assert_abs_diff_eq!(null_information_unrestricted(&w2), base, epsilon = 1e-10);
        let (a1, b1) = degree_identities(&g).unwrap();
        let (a2, b2) = degree_identities(&g2).unwrap();
        assert_abs_diff_eq!(a1, a2, epsilon = 1e-12);
        assert_abs_diff_eq!(b1, b2, epsilon = 1e-12);
    }

    #[test]
    fn isolated_unit_rejected() {
        let edges = vec![(0, 1), (1, 0)];
        assert!(matches!(
            AdjacencyGraph::from_edges(3, edges, None),
            Err(Error::IsolatedUnit { unit: 2 })
        ));
    }
}
