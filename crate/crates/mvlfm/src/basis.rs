//! Univariate functional bases: B-splines, natural cubic splines, grid-orthogonal
//! polynomials, constants and gridded interpolants, with evaluation, derivatives,
//! least-squares projection and exact Gram matrices.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::MvLongDataset;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("point {0} outside domain [{1}, {2}]")]
    OutsideDomain(f64, f64, f64),
    #[error("rank-deficient design matrix")]
    RankDeficient,
    #[error("invalid basis specification: {0}")]
    Invalid(String),
}

const DOMAIN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BasisKind {
    Constant,
    /// Full knot vector including the `order`-fold boundary knots.
    BSpline { order: usize, knots: Vec<f64> },
    /// Cubic B-spline basis with natural boundary constraints applied through
    /// the column map `constraint` (n_inner x n_basis).
    NaturalCubic {
        knots: Vec<f64>,
        constraint: DMatrix<f64>,
    },
    /// Polynomials stored as monomial coefficients, columns = basis functions,
    /// orthonormalised over an equally spaced grid of `grid_size` points.
    OrthoPoly {
        grid_size: usize,
        coefs: DMatrix<f64>,
    },
    /// Piecewise-linear interpolant of tabulated basis functions (grid x B).
    GridInterp { grid: Vec<f64>, values: DMatrix<f64> },
    /// A constant column prepended to an inner basis.
    ConstantPlus(Box<UnivariateBasis>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateBasis {
    pub kind: BasisKind,
    pub domain: (f64, f64),
}

/// Symmetric PSD matrix of pairwise inner products of basis functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix {
    pub entries: DMatrix<f64>,
}

// ---------------------------------------------------------------------------
// Constructors
// ---------------------------------------------------------------------------

pub fn constant_basis(domain: (f64, f64)) -> UnivariateBasis {
    UnivariateBasis {
        kind: BasisKind::Constant,
        domain,
    }
}

/// B-spline basis with equally spaced interior knots.
pub fn bspline_basis(order: usize, n_basis: usize, domain: (f64, f64)) -> UnivariateBasis {
    assert!(order >= 1 && n_basis >= order, "n_basis must be >= order");
    let n_interior = n_basis - order;
    let (lo, hi) = domain;
    let mut knots = vec![lo; order];
    for i in 1..=n_interior {
        knots.push(lo + (hi - lo) * i as f64 / (n_interior + 1) as f64);
    }
    knots.extend(std::iter::repeat(hi).take(order));
    UnivariateBasis {
        kind: BasisKind::BSpline { order, knots },
        domain,
    }
}

/// Natural cubic spline basis: cubic B-splines constrained to zero second
/// derivative at both boundaries. `n_basis` columns, interior knots equally
/// spaced.
pub fn natural_cubic_basis(n_basis: usize, domain: (f64, f64)) -> UnivariateBasis {
    assert!(n_basis >= 2, "natural cubic basis needs n_basis >= 2");
    let inner = bspline_basis(4, n_basis + 2, domain);
    let knots = match &inner.kind {
        BasisKind::BSpline { knots, .. } => knots.clone(),
        _ => unreachable!(),
    };
    let n_inner = n_basis + 2;
    // Second-derivative rows at the two boundaries.
    let mut c = DMatrix::zeros(2, n_inner);
    for (r, &x) in [domain.0, domain.1].iter().enumerate() {
        let row = bspline_row(&knots, 4, x, 2, domain);
        for j in 0..n_inner {
            c[(r, j)] = row[j];
        }
    }
    // Null space of c via the eigendecomposition of c^T c (rank 2).
    let ctc = c.transpose() * &c;
    let eig = ctc.symmetric_eigen();
    let mut idx: Vec<usize> = (0..n_inner).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let mut constraint = DMatrix::zeros(n_inner, n_basis);
    for (col, &i) in idx.iter().take(n_basis).enumerate() {
        constraint.set_column(col, &eig.eigenvectors.column(i));
    }
    UnivariateBasis {
        kind: BasisKind::NaturalCubic { knots, constraint },
        domain,
    }
}

/// Polynomials 1, T, T^2, ... orthonormalised over an equally spaced grid of
/// `grid_size` points, with the first column then rescaled to the constant 1.
pub fn ortho_poly_basis(degree: usize, grid_size: usize, domain: (f64, f64)) -> UnivariateBasis {
    assert!(grid_size >= degree + 1, "grid_size must be >= degree + 1");
    let d1 = degree + 1;
    let grid: Vec<f64> = (0..grid_size)
        .map(|i| domain.0 + (domain.1 - domain.0) * i as f64 / (grid_size - 1) as f64)
        .collect();
    // Vandermonde columns with coefficient tracking through Gram-Schmidt.
    let mut cols = DMatrix::zeros(grid_size, d1);
    for (i, &t) in grid.iter().enumerate() {
        let mut p = 1.0;
        for j in 0..d1 {
            cols[(i, j)] = p;
            p *= t;
        }
    }
    let mut coefs = DMatrix::<f64>::identity(d1, d1);
    for j in 0..d1 {
        for i in 0..j {
            let r = cols.column(i).dot(&cols.column(j));
            let ci = cols.column(i).clone_owned();
            let ki = coefs.column(i).clone_owned();
            let mut cj = cols.column_mut(j);
            cj -= ci * r;
            let mut kj = coefs.column_mut(j);
            kj -= ki * r;
        }
        let norm = cols.column(j).norm();
        assert!(norm > 1e-12, "degenerate polynomial grid");
        cols.column_mut(j).scale_mut(1.0 / norm);
        coefs.column_mut(j).scale_mut(1.0 / norm);
    }
    // Convention: the constant column is 1, not 1/sqrt(grid_size).
    coefs.column_mut(0).scale_mut((grid_size as f64).sqrt());
    UnivariateBasis {
        kind: BasisKind::OrthoPoly { grid_size, coefs },
        domain,
    }
}

/// Tabulated basis functions evaluated by linear interpolation.
pub fn grid_interp_basis(grid: Vec<f64>, values: DMatrix<f64>) -> UnivariateBasis {
    assert_eq!(grid.len(), values.nrows());
    let domain = (grid[0], *grid.last().unwrap());
    UnivariateBasis {
        kind: BasisKind::GridInterp { grid, values },
        domain,
    }
}

pub fn constant_plus(inner: UnivariateBasis) -> UnivariateBasis {
    let domain = inner.domain;
    UnivariateBasis {
        kind: BasisKind::ConstantPlus(Box::new(inner)),
        domain,
    }
}

// ---------------------------------------------------------------------------
// B-spline evaluation (Cox-de Boor with derivatives)
// ---------------------------------------------------------------------------

/// All B-spline basis functions of `order` on `knots`, evaluated at `x`, with
/// derivative order `deriv`. Returns `knots.len() - order` values.
fn bspline_row(knots: &[f64], order: usize, x: f64, deriv: usize, domain: (f64, f64)) -> Vec<f64> {
    let n = knots.len() - order;
    if deriv > 0 {
        let lower = bspline_row(knots, order - 1, x, deriv - 1, domain);
        let k = order as f64 - 1.0;
        let mut out = vec![0.0; n];
        for i in 0..n {
            let d1 = knots[i + order - 1] - knots[i];
            let d2 = knots[i + order] - knots[i + 1];
            let a = if d1 > 0.0 { lower[i] / d1 } else { 0.0 };
            let b = if d2 > 0.0 { lower[i + 1] / d2 } else { 0.0 };
            out[i] = k * (a - b);
        }
        return out;
    }
    // Order-1 indicators, with the right endpoint attached to the last span.
    let m = knots.len() - 1;
    let mut vals = vec![0.0; m];
    let at_end = (x - domain.1).abs() <= DOMAIN_TOL;
    for i in 0..m {
        let last_span = knots[i] < knots[i + 1]
            && !(i + 1..m).any(|j| knots[j] < knots[j + 1]);
        if (knots[i] <= x && x < knots[i + 1]) || (at_end && last_span) {
            vals[i] = 1.0;
        }
    }
    for k in 2..=order {
        for i in 0..knots.len() - k {
            let d1 = knots[i + k - 1] - knots[i];
            let d2 = knots[i + k] - knots[i + 1];
            let a = if d1 > 0.0 {
                (x - knots[i]) / d1 * vals[i]
            } else {
                0.0
            };
            let b = if d2 > 0.0 {
                (knots[i + k] - x) / d2 * vals[i + 1]
            } else {
                0.0
            };
            vals[i] = a + b;
        }
    }
    vals.truncate(n);
    vals
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

impl UnivariateBasis {
    pub fn n_basis(&self) -> usize {
        match &self.kind {
            BasisKind::Constant => 1,
            BasisKind::BSpline { order, knots } => knots.len() - order,
            BasisKind::NaturalCubic { constraint, .. } => constraint.ncols(),
            BasisKind::OrthoPoly { coefs, .. } => coefs.ncols(),
            BasisKind::GridInterp { values, .. } => values.ncols(),
            BasisKind::ConstantPlus(inner) => 1 + inner.n_basis(),
        }
    }

    /// Design matrix |points| x n_basis. Points are clamped to the domain
    /// within a 1e-12 tolerance; farther outside is an error.
    pub fn eval(&self, points: &[f64]) -> Result<DMatrix<f64>, BasisError> {
        self.eval_deriv(points, 0)
    }

    pub fn eval_deriv(&self, points: &[f64], deriv: usize) -> Result<DMatrix<f64>, BasisError> {
        let (lo, hi) = self.domain;
        let b = self.n_basis();
        let mut out = DMatrix::zeros(points.len(), b);
        for (r, &p) in points.iter().enumerate() {
            if p < lo - DOMAIN_TOL || p > hi + DOMAIN_TOL {
                return Err(BasisError::OutsideDomain(p, lo, hi));
            }
            let x = p.clamp(lo, hi);
            match &self.kind {
                BasisKind::Constant => {
                    out[(r, 0)] = if deriv == 0 { 1.0 } else { 0.0 };
                }
                BasisKind::BSpline { order, knots } => {
                    if deriv >= *order {
                        continue;
                    }
                    let row = bspline_row(knots, *order, x, deriv, self.domain);
                    for (j, v) in row.into_iter().enumerate() {
                        out[(r, j)] = v;
                    }
                }
                BasisKind::NaturalCubic { knots, constraint } => {
                    if deriv >= 4 {
                        continue;
                    }
                    let row = DVector::from_vec(bspline_row(knots, 4, x, deriv, self.domain));
                    let mapped = constraint.transpose() * row;
                    for j in 0..b {
                        out[(r, j)] = mapped[j];
                    }
                }
                BasisKind::OrthoPoly { coefs, .. } => {
                    for j in 0..b {
                        out[(r, j)] = poly_eval_deriv(&coefs.column(j).as_slice().to_vec(), x, deriv);
                    }
                }
                BasisKind::GridInterp { grid, values } => {
                    if deriv > 1 {
                        continue;
                    }
                    let (i0, w) = locate(grid, x);
                    for j in 0..b {
                        let v0 = values[(i0, j)];
                        let v1 = values[(i0 + 1, j)];
                        out[(r, j)] = if deriv == 0 {
                            v0 + w * (v1 - v0)
                        } else {
                            (v1 - v0) / (grid[i0 + 1] - grid[i0])
                        };
                    }
                }
                BasisKind::ConstantPlus(inner) => {
                    out[(r, 0)] = if deriv == 0 { 1.0 } else { 0.0 };
                    let row = inner.eval_deriv(&[x], deriv)?;
                    for j in 0..inner.n_basis() {
                        out[(r, j + 1)] = row[(0, j)];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Breakpoints partitioning the domain into spans on which every basis
    /// function is polynomial (or linear, for interpolants).
    fn breakpoints(&self) -> Vec<f64> {
        match &self.kind {
            BasisKind::Constant | BasisKind::OrthoPoly { .. } => {
                vec![self.domain.0, self.domain.1]
            }
            BasisKind::BSpline { knots, .. } | BasisKind::NaturalCubic { knots, .. } => {
                let mut b: Vec<f64> = knots.clone();
                b.dedup_by(|a, c| (*a - *c).abs() < 1e-14);
                b
            }
            BasisKind::GridInterp { grid, .. } => grid.clone(),
            BasisKind::ConstantPlus(inner) => inner.breakpoints(),
        }
    }

    fn quad_nodes_per_span(&self) -> usize {
        match &self.kind {
            BasisKind::Constant => 1,
            BasisKind::BSpline { order, .. } => *order,
            BasisKind::NaturalCubic { .. } => 4,
            BasisKind::OrthoPoly { coefs, .. } => coefs.nrows(),
            BasisKind::GridInterp { .. } => 2,
            BasisKind::ConstantPlus(inner) => inner.quad_nodes_per_span().max(2),
        }
    }

    /// Exact Gram matrix of pairwise L2 inner products over the domain, via
    /// Gauss-Legendre quadrature per span.
    pub fn gram(&self) -> GramMatrix {
        let b = self.n_basis();
        let spans = self.breakpoints();
        let n_nodes = self.quad_nodes_per_span();
        let (nodes, weights) = gauss_legendre(n_nodes);
        let mut g = DMatrix::zeros(b, b);
        for w in spans.windows(2) {
            let (a, c) = (w[0], w[1]);
            if c - a <= 0.0 {
                continue;
            }
            let half = 0.5 * (c - a);
            let mid = 0.5 * (a + c);
            for (x, wt) in nodes.iter().zip(&weights) {
                let p = mid + half * x;
                let row = self.eval(&[p]).expect("quadrature node inside domain");
                let row = row.row(0).transpose();
                g.ger(half * wt, &row, &row, 1.0);
            }
        }
        // Symmetrise against rounding.
        let g = (&g + g.transpose()) * 0.5;
        GramMatrix { entries: g }
    }
}

fn poly_eval_deriv(coefs: &[f64], x: f64, deriv: usize) -> f64 {
    let mut c: Vec<f64> = coefs.to_vec();
    for _ in 0..deriv {
        if c.len() <= 1 {
            return 0.0;
        }
        c = c
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, &v)| v * i as f64)
            .collect();
    }
    c.iter().rev().fold(0.0, |acc, &v| acc * x + v)
}

fn locate(grid: &[f64], x: f64) -> (usize, f64) {
    let n = grid.len();
    if x <= grid[0] {
        return (0, 0.0);
    }
    if x >= grid[n - 1] {
        return (n - 2, 1.0);
    }
    let i = grid.partition_point(|&g| g <= x) - 1;
    let i = i.min(n - 2);
    ((i), (x - grid[i]) / (grid[i + 1] - grid[i]))
}

/// Gauss-Legendre nodes and weights on [-1, 1] via the Golub-Welsch
/// eigendecomposition of the Jacobi matrix.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    if n == 1 {
        return (vec![0.0], vec![2.0]);
    }
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = i as f64 / ((4 * i * i - 1) as f64).sqrt();
        j[(i - 1, i)] = b;
        j[(i, i - 1)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1).collect(),
    )
}

// ---------------------------------------------------------------------------
// Projection
// ---------------------------------------------------------------------------

/// OLS projection of every curve's grid values onto the basis evaluated on the
/// dataset grid; one N_Total x B coefficient matrix per dimension. The design
/// factorisation is shared across curves and dimensions.
pub fn fit_coefficients(
    ds: &MvLongDataset,
    basis: &UnivariateBasis,
) -> Result<Vec<DMatrix<f64>>, BasisError> {
    let design = basis.eval(&ds.grid)?;
    let solver = DesignSolver::new(design)?;
    let n = ds.n_total();
    let p = ds.n_dims();
    let b = basis.n_basis();
    let mut out = vec![DMatrix::zeros(n, b); p];
    for (i, curve) in ds.curves.iter().enumerate() {
        for pi in 0..p {
            let y = curve.row(pi).transpose();
            let c = solver.solve(&y);
            for j in 0..b {
                out[pi][(i, j)] = c[j];
            }
        }
    }
    Ok(out)
}

/// Reusable least-squares solver for a fixed design matrix, precomputing the
/// pseudoinverse once so per-curve solves are a single matrix-vector product.
pub struct DesignSolver {
    pinv: DMatrix<f64>,
}

impl DesignSolver {
    pub fn new(design: DMatrix<f64>) -> Result<Self, BasisError> {
        let svd = design.svd(true, true);
        let smax = svd.singular_values.max();
        if svd.singular_values.iter().any(|&s| s < 1e-10 * smax.max(1e-300)) {
            return Err(BasisError::RankDeficient);
        }
        let pinv = svd
            .pseudo_inverse(1e-12 * smax)
            .map_err(|_| BasisError::RankDeficient)?;
        Ok(DesignSolver { pinv })
    }

    pub fn solve(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.pinv * y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn constant_basis_is_one() {
        let b = constant_basis((0.0, 1.0));
        let m = b.eval(&[0.3, 0.9]).unwrap();
        assert_eq!(m, DMatrix::from_element(2, 1, 1.0));
        assert_abs_diff_eq!(b.gram().entries[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn bernstein_midpoint() {
        // Cubic B-spline with no interior knots on [0,1] is the Bernstein basis.
        let b = bspline_basis(4, 4, (0.0, 1.0));
        let m = b.eval(&[0.5]).unwrap();
        let expect = [0.125, 0.375, 0.375, 0.125];
        for (j, e) in expect.iter().enumerate() {
            assert_abs_diff_eq!(m[(0, j)], *e, epsilon = 1e-12);
        }
    }

    #[test]
    fn bspline_partition_of_unity() {
        let b = bspline_basis(4, 12, (0.0, 100.0));
        let mut rng = crate::rng::seeded_rng(5, &[b"pou"]);
        use rand::Rng;
        let pts: Vec<f64> = (0..50).map(|_| rng.gen::<f64>() * 100.0).collect();
        let m = b.eval(&pts).unwrap();
        for r in 0..m.nrows() {
            assert_abs_diff_eq!(m.row(r).sum(), 1.0, epsilon = 1e-12);
        }
        // Endpoints too.
        let e = b.eval(&[0.0, 100.0]).unwrap();
        assert_abs_diff_eq!(e.row(0).sum(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.row(1).sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn eval_rejects_outside_domain() {
        let b = bspline_basis(4, 6, (0.0, 1.0));
        assert!(b.eval(&[1.0 + 1e-13]).is_ok());
        assert!(b.eval(&[1.1]).is_err());
    }

    #[test]
    fn ortho_poly_closed_forms() {
        // Appendix-style construction on [0, 1], grid of 101.
        let b = ortho_poly_basis(2, 101, (0.0, 1.0));
        let m = b.eval(&[0.5, 1.0]).unwrap();
        // xi_2(0.5) = 0, xi_2(1) = 0.5/sqrt(8.585)
        assert_abs_diff_eq!(m[(0, 1)], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(m[(1, 1)], 0.5 / 8.585f64.sqrt(), epsilon = 1e-3);
        // xi_3(0.5) = -(8.585/101)/sqrt(0.5836083)
        assert_abs_diff_eq!(
            m[(0, 2)],
            -(8.585 / 101.0) / 0.5836083f64.sqrt(),
            epsilon = 1e-3
        );
        // Constant column is 1 exactly.
        assert_abs_diff_eq!(m[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn ortho_poly_grid_orthogonality() {
        let b = ortho_poly_basis(4, 101, (0.0, 1.0));
        let grid: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
        let m = b.eval(&grid).unwrap();
        let xtx = m.transpose() * &m;
        for i in 0..5 {
            for j in 0..5 {
                if i != j && i > 0 && j > 0 {
                    assert_abs_diff_eq!(xtx[(i, j)], 0.0, epsilon = 1e-10);
                }
            }
        }
        // The constant column is still orthogonal to the centred columns.
        for j in 1..5 {
            assert_abs_diff_eq!(xtx[(0, j)], 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn gram_bernstein_corner() {
        let b = bspline_basis(4, 4, (0.0, 1.0));
        let g = b.gram();
        // integral of (1-t)^6 = 1/7.
        assert_abs_diff_eq!(g.entries[(0, 0)], 1.0 / 7.0, epsilon = 1e-12);
        // Symmetric PSD.
        let eig = g.entries.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&v| v > -1e-12));
    }

    #[test]
    fn gram_matches_trapezoid_reference() {
        for basis in [
            bspline_basis(4, 9, (0.0, 100.0)),
            natural_cubic_basis(4, (0.0, 1.0)),
            ortho_poly_basis(2, 101, (0.0, 1.0)),
        ] {
            let g = basis.gram().entries;
            let n = 10_001;
            let (lo, hi) = basis.domain;
            let grid: Vec<f64> = (0..n)
                .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                .collect();
            let m = basis.eval(&grid).unwrap();
            let h = (hi - lo) / (n - 1) as f64;
            let mut reference = DMatrix::zeros(g.nrows(), g.ncols());
            for r in 0..n {
                let w = if r == 0 || r == n - 1 { 0.5 * h } else { h };
                let row = m.row(r).transpose();
                reference.ger(w, &row, &row, 1.0);
            }
            let reference = (&reference + reference.transpose()) * 0.5;
            let scale = g.amax();
            assert!((&g - &reference).amax() / scale < 1e-6);
        }
    }

    #[test]
    fn natural_cubic_boundary_second_derivatives_vanish() {
        let b = natural_cubic_basis(4, (0.0, 1.0));
        let d2 = b.eval_deriv(&[0.0, 1.0], 2).unwrap();
        for v in d2.iter() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn natural_cubic_rank_and_count() {
        let b = natural_cubic_basis(4, (0.0, 1.0));
        assert_eq!(b.n_basis(), 4);
        let grid: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
        let m = b.eval(&grid).unwrap();
        assert!(DesignSolver::new(m).is_ok());
        // A constant plus four natural cubics gives 5 longitudinal columns.
        let cp = constant_plus(natural_cubic_basis(4, (0.0, 1.0)));
        assert_eq!(cp.n_basis(), 5);
    }

    #[test]
    fn bspline_derivative_matches_finite_difference() {
        let b = bspline_basis(4, 8, (0.0, 1.0));
        let h = 1e-6;
        for &x in &[0.21, 0.5, 0.87] {
            let d = b.eval_deriv(&[x], 1).unwrap();
            let f1 = b.eval(&[x + h]).unwrap();
            let f0 = b.eval(&[x - h]).unwrap();
            for j in 0..b.n_basis() {
                let fd = (f1[(0, j)] - f0[(0, j)]) / (2.0 * h);
                assert_abs_diff_eq!(d[(0, j)], fd, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn ortho_poly_derivative_is_analytic() {
        let b = ortho_poly_basis(2, 101, (0.0, 1.0));
        // xi_2'(T) = 1/sqrt(8.585) everywhere.
        let d = b.eval_deriv(&[0.1, 0.9], 1).unwrap();
        assert_abs_diff_eq!(d[(0, 1)], 1.0 / 8.585f64.sqrt(), epsilon = 1e-3);
        assert_abs_diff_eq!(d[(1, 1)], d[(0, 1)], epsilon = 1e-12);
    }
}

