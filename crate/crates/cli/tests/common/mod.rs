//! Reference computations that share no code with the library solvers.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use synthpi_core::nalgebra::{DMatrix, DVector};

/// Exhaustive search over the 2-simplex on a lattice of step `1/steps`.
pub struct GridResult {
    pub min: f64,
    pub argmin: [f64; 3],
    /// Largest objective change from the minimizer to a lattice neighbour.
    pub cell_variation: f64,
}

pub fn simplex_grid_search(b: &DMatrix<f64>, a: &[f64], steps: usize) -> GridResult {
    assert_eq!(b.ncols(), 3);
    let mut g = [[0.0; 3]; 3];
    let mut h = [0.0; 3];
    for t in 0..a.len() {
        for i in 0..3 {
            h[i] += b[(t, i)] * a[t];
            for j in 0..3 {
                g[i][j] += b[(t, i)] * b[(t, j)];
            }
        }
    }
    let aa: f64 = a.iter().map(|v| v * v).sum();
    let f = |i: usize, j: usize| -> f64 {
        let n = steps as f64;
        let w = [i as f64 / n, j as f64 / n, (steps - i - j) as f64 / n];
        let mut q = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                q += w[r] * g[r][c] * w[c];
            }
        }
        aa - 2.0 * (w[0] * h[0] + w[1] * h[1] + w[2] * h[2]) + q
    };
    let (mut best, mut bi, mut bj) = (f64::INFINITY, 0, 0);
    for i in 0..=steps {
        for j in 0..=steps - i {
            let v = f(i, j);
            if v < best {
                best = v;
                bi = i;
                bj = j;
            }
        }
    }
    let mut variation: f64 = 0.0;
    let moves: [(i64, i64); 6] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, -1), (-1, 1)];
    for (di, dj) in moves {
        let (i, j) = (bi as i64 + di, bj as i64 + dj);
        if i >= 0 && j >= 0 && i + j <= steps as i64 {
            variation = variation.max((f(i as usize, j as usize) - best).abs());
        }
    }
    let n = steps as f64;
    GridResult {
        min: best,
        argmin: [bi as f64 / n, bj as f64 / n, (steps - bi - bj) as f64 / n],
        cell_variation: variation,
    }
}

pub struct SampledExtremes {
    pub min: f64,
    pub max: f64,
    pub accepted: usize,
}

fn subsets_up_to(n: usize, k: usize) -> Vec<Vec<usize>> {
    (1..=k).flat_map(|s| subsets(n, s)).collect()
}

/// Extremes of `c'x` over `{x : x'Qx - 2 xi'x <= 0, x >= lower}` in three
/// dimensions, optionally restricted to `x1 + x2 + x3 = 0`.
///
/// A linear function attains its extremes on the boundary, so candidate
/// points are drawn on each boundary piece (the ellipsoid surface, and the
/// faces, edges and vertices cut by the active lower bounds) and rejected
/// when they violate any other constraint.
pub fn rejection_extremes(
    q: &DMatrix<f64>,
    xi: &[f64],
    lower: &[f64],
    sum_zero: bool,
    c: &[f64],
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> SampledExtremes {
    // x = P y with y free in R^m
    let p = if sum_zero {
        DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, -1.0])
    } else {
        DMatrix::identity(3, 3)
    };
    let m = p.ncols();
    let qy = p.transpose() * q * &p;
    let xiy = p.transpose() * DVector::from_column_slice(xi);
    let qinv = qy.clone().try_inverse().expect("positive definite Q");
    let centre = &qinv * &xiy;
    let r2 = xiy.dot(&centre);
    let chol = qy.clone().cholesky().expect("positive definite Q");
    let lt_inv = chol.l().transpose().try_inverse().expect("invertible factor");
    let lo: Vec<f64> = (0..m).map(|i| centre[i] - (r2 * qinv[(i, i)]).sqrt()).collect();
    let hi: Vec<f64> = (0..m).map(|i| centre[i] + (r2 * qinv[(i, i)]).sqrt()).collect();
    let scale = 1.0 + r2;
    let mut out = SampledExtremes { min: f64::INFINITY, max: f64::NEG_INFINITY, accepted: 0 };
    let consider = |y: &DVector<f64>, on_surface: bool, out: &mut SampledExtremes| {
        let x = &p * y;
        if (0..3).any(|i| x[i] < lower[i] - 1e-12 * scale) {
            return;
        }
        if !on_surface && y.dot(&(&qy * y)) - 2.0 * xiy.dot(y) > 0.0 {
            return;
        }
        let v = c[0] * x[0] + c[1] * x[1] + c[2] * x[2];
        out.min = out.min.min(v);
        out.max = out.max.max(v);
        out.accepted += 1;
    };
    let pieces = subsets_up_to(3, m);
    let per_piece = samples / (2 * pieces.len().max(1));
    let surface = samples - per_piece * pieces.len();
    for _ in 0..surface {
        let mut s = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        s /= s.norm();
        let y = &centre + (&lt_inv * s) * r2.sqrt();
        consider(&y, true, &mut out);
    }
    for active in pieces {
        if active.len() > m {
            continue;
        }
        // solve the active rows for the first invertible set of coordinates
        let solve_for = subsets(m, active.len()).into_iter().find(|cols| {
            let sub = DMatrix::from_fn(active.len(), cols.len(), |a, b| p[(active[a], cols[b])]);
            sub.determinant().abs() > 1e-12
        });
        let Some(cols) = solve_for else { continue };
        let sub = DMatrix::from_fn(active.len(), cols.len(), |a, b| p[(active[a], cols[b])]);
        let sub_inv = sub.try_inverse().expect("checked determinant");
        let rest: Vec<usize> = (0..m).filter(|j| !cols.contains(j)).collect();
        let draws = if rest.is_empty() { 1 } else { per_piece };
        for _ in 0..draws {
            let mut y = DVector::zeros(m);
            for &j in &rest {
                y[j] = lo[j] + (hi[j] - lo[j]) * rng.random::<f64>();
            }
            let rhs = DVector::from_fn(active.len(), |a, _| {
                lower[active[a]] - rest.iter().map(|&j| p[(active[a], j)] * y[j]).sum::<f64>()
            });
            let solved = &sub_inv * rhs;
            for (k, &j) in cols.iter().enumerate() {
                y[j] = solved[k];
            }
            consider(&y, false, &mut out);
        }
    }
    out
}

fn pinball(x: &DMatrix<f64>, y: &[f64], theta: &DVector<f64>, tau: f64) -> f64 {
    (0..y.len())
        .map(|i| {
            let r = y[i] - (x.row(i) * theta)[0];
            r * if r >= 0.0 { tau } else { tau - 1.0 }
        })
        .sum()
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Minimum pinball loss by enumerating every basic solution of the
/// quantile-regression linear program: fits that interpolate `p` observations.
pub fn pinball_vertex_minimum(x: &DMatrix<f64>, y: &[f64], tau: f64) -> f64 {
    let (n, p) = x.shape();
    let mut best = f64::INFINITY;
    for rows in subsets(n, p) {
        let xs = DMatrix::from_fn(p, p, |i, j| x[(rows[i], j)]);
        let ys = DVector::from_iterator(p, rows.iter().map(|&r| y[r]));
        let lu = xs.lu();
        if lu.determinant().abs() < 1e-12 {
            continue;
        }
        if let Some(theta) = lu.solve(&ys) {
            best = best.min(pinball(x, y, &theta, tau));
        }
    }
    best
}
