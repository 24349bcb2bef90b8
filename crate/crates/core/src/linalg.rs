//! Small dense linear-algebra helpers shared by the solvers and estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn max_eigenvalue_psd(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    // a deterministic, non-degenerate start
    for i in 0..n {
        v[i] += 1e-3 * (i as f64 + 1.0);
    }
    v.normalize_mut();
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = w / norm;
        if (next - lambda).abs() <= 1e-12 * next.max(1e-300) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda
}

/// Symmetrizes in place: `(M + M') / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Result of projecting a symmetric matrix onto the PSD cone by eigenvalue clipping.
#[derive(Debug, Clone)]
pub struct PsdRepair {
    pub matrix: DMatrix<f64>,
    pub min_eigenvalue: f64,
    pub clipped: bool,
}

/// Clips negative eigenvalues of a symmetric matrix to zero.
///
/// Eigenvalues in `[-tol, 0)` are treated as round-off and clipped silently;
/// `clipped` reports whether anything below `-tol` had to be removed.
pub fn psd_clip(m: &DMatrix<f64>, tol: f64) -> PsdRepair {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    if sym.nrows() == 0 {
        return PsdRepair { matrix: sym, min_eigenvalue: 0.0, clipped: false };
    }
    let eig = SymmetricEigen::new(sym.clone());
    let min_eigenvalue = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eigenvalue >= 0.0 {
        return PsdRepair { matrix: sym, min_eigenvalue, clipped: false };
    }
    let clipped_vals = eig.eigenvalues.map(|l| l.max(0.0));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped_vals) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    PsdRepair { matrix: out, min_eigenvalue, clipped: min_eigenvalue < -tol }
}

/// Symmetric square root `S` with `S S = M` of a PSD matrix; negative
/// eigenvalues are clipped to zero first.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

/// Indices of a maximal linearly independent subset of the columns of `x`,
/// found by greedy modified Gram-Schmidt in column order.
pub fn independent_columns(x: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm0 = col.norm();
        if norm0 == 0.0 {
            continue;
        }
        let mut r = col;
        for q in &basis {
            let proj = q.dot(&r);
            r.axpy(-proj, q, 1.0);
        }
        let norm = r.norm();
        if norm > rel_tol * norm0 {
            basis.push(r / norm);
            keep.push(j);
        }
    }
    keep
}

/// Least-squares solution of `x * beta ≈ y`.
///
/// Collinear columns are dropped (their coefficients are zero) and reported in
/// the second return value.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, Vec<usize>) {
    let p = x.ncols();
    let keep = independent_columns(x, 1e-10);
    let dropped: Vec<usize> = (0..p).filter(|j| !keep.contains(j)).collect();
    let mut beta = DVector::zeros(p);
    if keep.is_empty() {
        return (beta, dropped);
    }
    let xs = x.select_columns(keep.iter());
    let qr = xs.clone().qr();
    let qty = qr.q().transpose() * y;
    let r = qr.r();
    let sol = r
        .solve_upper_triangular(&qty)
        .unwrap_or_else(|| DVector::zeros(keep.len()));
    for (k, &j) in keep.iter().enumerate() {
        beta[j] = sol[k];
    }
    (beta, dropped)
}

/// Minimum-norm least-squares solution via SVD; also returns the numerical rank.
pub fn min_norm_solve(x: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, usize) {
    if x.ncols() == 0 {
        return (DVector::zeros(0), 0);
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = smax * 1e-12 * (x.nrows().max(x.ncols()) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let sol = svd.solve(y, eps).unwrap_or_else(|_| DVector::zeros(x.ncols()));
    (sol, rank)
}

/// Orthonormal basis for the null space of a single nonzero row vector `e`,
/// returned as the columns of an `n x (n-1)` matrix (Householder construction).
pub fn hyperplane_basis(e: &[f64]) -> DMatrix<f64> {
    let n = e.len();
    let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut u: Vec<f64> = e.iter().map(|v| v / norm).collect();
    // reflect u onto ±e_1, choosing the sign that avoids cancellation
    let sign = if u[0] >= 0.0 { 1.0 } else { -1.0 };
    u[0] += sign;
    let unorm2: f64 = u.iter().map(|v| v * v).sum();
    let mut basis = DMatrix::zeros(n, n.saturating_sub(1));
    for k in 1..n {
        // column k of H = I - 2 u u' / (u'u)
        for i in 0..n {
            let delta = if i == k { 1.0 } else { 0.0 };
            basis[(i, k - 1)] = delta - 2.0 * u[i] * u[k] / unorm2;
        }
    }
    basis
}

/// Serializes a matrix as a row-major array of rows.
pub mod serde_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != m) {
            return Err(D::Error::custom("matrix rows have unequal lengths"));
        }
        Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }
}
