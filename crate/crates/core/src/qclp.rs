//! Linear objective over a polyhedron intersected with one convex quadratic
//! constraint:
//!
//! ```text
//! sup / inf  c'x   s.t.   x in P,   x'Qx - 2 xi'x <= 0
//! ```
//!
//! `P` is a box with at most one equality row. For a multiplier `mu > 0` on
//! the quadratic constraint the optimum minimizes `x'Qx - 2 xi'x - s c'x`
//! over `P` with `s = 1/mu`. The primary solver traces that parametric QP in
//! `s` exactly: on each face of `P` the minimizer is affine in `s`, the
//! constraint value is quadratic in `s`, and face changes happen at
//! computable breakpoints. A bisection-on-`s` solver with a projected
//! gradient inner loop serves as fallback and reference.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::constraint_sets::{DeltaStarSpec, Polyhedron};
use crate::error::{Error, Result};
use crate::linalg;
use crate::panel_io::PredictorVector;
use crate::sc_fit::FittedSC;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Sup,
    Inf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    UnboundedFlagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConicProblem {
    pub objective: Vec<f64>,
    #[serde(with = "linalg::serde_rows")]
    pub q: DMatrix<f64>,
    pub xi: Vec<f64>,
    pub region: Polyhedron,
    pub sense: Sense,
    /// Optional cap `|x_j| <= radius` on every coordinate.
    #[serde(default)]
    pub radius_cap: Option<f64>,
}

impl ConicProblem {
    /// Problem over the relaxed simulation set with objective `D^{-1} p`.
    pub fn over_delta_star(
        p: &[f64],
        q: &DMatrix<f64>,
        xi: &[f64],
        delta_star: &DeltaStarSpec,
        sense: Sense,
    ) -> Self {
        let objective = p.iter().zip(&delta_star.scaling).map(|(a, d)| a / d).collect();
        Self { objective, q: q.clone(), xi: xi.to_vec(), region: delta_star.region(), sense, radius_cap: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConicSolution {
    pub value: f64,
    pub argpoint: Vec<f64>,
    pub kkt_residual: f64,
    pub status: SolveStatus,
    /// Multiplier of the quadratic constraint.
    pub multiplier: f64,
}

impl ConicSolution {
    fn unbounded(d: usize, sense: Sense) -> Self {
        let value = match sense {
            Sense::Sup => f64::INFINITY,
            Sense::Inf => f64::NEG_INFINITY,
        };
        Self { value, argpoint: vec![f64::NAN; d], kkt_residual: f64::NAN, status: SolveStatus::UnboundedFlagged, multiplier: 0.0 }
    }
}

/// Solves one problem, preferring the parametric active-set method and
/// falling back to bisection when a face Hessian is singular.
pub fn solve(problem: &ConicProblem, tol: f64) -> Result<ConicSolution> {
    let solver = QclpSolver::new(&problem.q, &problem.region, problem.radius_cap)?;
    check_dims(problem, solver.dim())?;
    Ok(solver.solve(&problem.objective, &problem.xi, problem.sense, tol))
}

/// Reference solver: bisection on `s = 1/mu` with a projected-gradient
/// inner QP.
pub fn solve_bisection(problem: &ConicProblem, tol: f64) -> Result<ConicSolution> {
    let solver = QclpSolver::new(&problem.q, &problem.region, problem.radius_cap)?;
    check_dims(problem, solver.dim())?;
    Ok(solver.solve_bisection(&problem.objective, &problem.xi, problem.sense, tol))
}

fn check_dims(problem: &ConicProblem, d: usize) -> Result<()> {
    if problem.objective.len() != d || problem.xi.len() != d {
        return Err(Error::Dimension(format!(
            "objective ({}) and xi ({}) must match the region dimension {}",
            problem.objective.len(),
            problem.xi.len(),
            d
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
    Fixed,
}

/// Minimizer of `x'Qx - 2 xi'x` over the region together with its face; the
/// shared starting point of the sup and inf problems for one `xi`.
#[derive(Debug, Clone)]
pub struct Center {
    x: Vec<f64>,
    state: Vec<Bound>,
    /// `false` when the active-set method could not be used.
    exact: bool,
}

impl Center {
    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn point(&self) -> &[f64] {
        &self.x
    }
}

/// A quadratic form and region prepared once for many `(c, xi)` solves.
#[derive(Debug, Clone)]
pub struct QclpSolver {
    d: usize,
    /// Row-major, PSD-clipped.
    q: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    eq: Option<(Vec<f64>, f64)>,
    compact: bool,
    q_scale: f64,
    lipschitz: f64,
}

impl QclpSolver {
    pub fn new(q: &DMatrix<f64>, region: &Polyhedron, radius_cap: Option<f64>) -> Result<Self> {
        region.validate()?;
        let d = region.dim();
        if q.nrows() != d || q.ncols() != d {
            return Err(Error::Dimension(format!("Q is {}x{}, region has dimension {}", q.nrows(), q.ncols(), d)));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("Q has non-finite entries".into()));
        }
        let mut qs = q.clone();
        linalg::symmetrize(&mut qs);
        let (q_clipped, lambda_max) = if d > 0 {
            let eig = SymmetricEigen::new(qs.clone());
            let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            if min < -1e-10 * max.max(1.0) {
                return Err(Error::Input(format!("Q is not positive semidefinite (eigenvalue {:e})", min)));
            }
            if min < 0.0 {
                (linalg::psd_clip(&qs, f64::INFINITY).matrix, max)
            } else {
                (qs, max)
            }
        } else {
            (qs, 0.0)
        };
        let mut poly = region.clone();
        if let Some(r) = radius_cap {
            if !(r > 0.0) {
                return Err(Error::Input(format!("radius cap must be positive, got {}", r)));
            }
            for j in 0..d {
                poly.lower[j] = poly.lower[j].max(-r);
                poly.upper[j] = poly.upper[j].min(r);
            }
            poly.validate()?;
        }
        let bounded = poly.bounded_coordinates();
        let unbounded: Vec<usize> = (0..d).filter(|&j| !bounded[j]).collect();
        let compact = if unbounded.is_empty() {
            true
        } else {
            let sub = q_clipped.select_rows(unbounded.iter()).select_columns(unbounded.iter());
            let min = SymmetricEigen::new(sub).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            min > 1e-12 * lambda_max.max(1e-300)
        };
        let q_row: Vec<f64> = (0..d * d).map(|k| q_clipped[(k / d, k % d)]).collect();
        Ok(Self {
            d,
            q: q_row,
            lower: poly.lower,
            upper: poly.upper,
            eq: poly.equality.map(|e| (e.coeffs, e.rhs)),
            compact,
            q_scale: lambda_max.max(1e-300),
            lipschitz: 2.0 * lambda_max,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Whether the region intersected with any quadratic sublevel set is
    /// bounded (checked once, conservatively).
    pub fn is_compact(&self) -> bool {
        self.compact
    }

    fn qx(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.d {
            let row = &self.q[i * self.d..(i + 1) * self.d];
            out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    fn quad(&self, x: &[f64], xi: &[f64]) -> f64 {
        let mut qx = vec![0.0; self.d];
        self.qx(x, &mut qx);
        x.iter().zip(&qx).map(|(a, b)| a * b).sum::<f64>() - 2.0 * dot(xi, x)
    }

    /// Sup and inf of `c'x` for one `xi`, sharing the center computation.
    pub fn bounds(&self, c: &[f64], xi: &[f64], tol: f64) -> (ConicSolution, ConicSolution) {
        let center = self.center(xi);
        (self.solve_from(&center, c, xi, Sense::Inf, tol), self.solve_from(&center, c, xi, Sense::Sup, tol))
    }

    pub fn solve(&self, c: &[f64], xi: &[f64], sense: Sense, tol: f64) -> ConicSolution {
        let center = self.center(xi);
        self.solve_from(&center, c, xi, sense, tol)
    }

    /// Minimizer of `x'Qx - 2 xi'x` over the region, from the origin.
    pub fn center(&self, xi: &[f64]) -> Center {
        let mut x = vec![0.0; self.d];
        let mut state = vec![Bound::Free; self.d];
        for j in 0..self.d {
            state[j] = if self.lower[j] == self.upper[j] {
                x[j] = self.lower[j];
                Bound::Fixed
            } else if self.lower[j] == 0.0 {
                Bound::Lower
            } else if self.upper[j] == 0.0 {
                Bound::Upper
            } else {
                Bound::Free
            };
        }
        if !self.compact || self.lower.iter().zip(&self.upper).any(|(l, u)| *l > 0.0 || *u < 0.0) {
            return Center { x, state, exact: false };
        }
        let lin: Vec<f64> = xi.iter().map(|v| -2.0 * v).collect();
        let exact = self.qp_active_set(&lin, &mut x, &mut state);
        Center { x, state, exact }
    }

    pub fn solve_from(&self, center: &Center, c: &[f64], xi: &[f64], sense: Sense, tol: f64) -> ConicSolution {
        if !self.compact {
            return ConicSolution::unbounded(self.d, sense);
        }
        let sign = if sense == Sense::Sup { 1.0 } else { -1.0 };
        let cs: Vec<f64> = c.iter().map(|v| sign * v).collect();
        let result = if center.exact { self.homotopy(center, &cs, xi) } else { None };
        let mut sol = match result {
            Some((x, mu, status)) => {
                let value = dot(&cs, &x);
                ConicSolution { value, argpoint: x, kkt_residual: 0.0, status, multiplier: mu }
            }
            None => self.bisection(&cs, xi, tol),
        };
        if sol.status != SolveStatus::UnboundedFlagged {
            sol.kkt_residual = self.kkt_residual(&cs, xi, &sol.argpoint, sol.multiplier);
            if sol.status == SolveStatus::Optimal && sol.kkt_residual > tol.max(1e-6) && center.exact {
                // certify failure on the fast path: redo with the reference solver
                let alt = self.bisection(&cs, xi, tol);
                let margin = 1e-9 * (1.0 + sol.value.abs());
                if alt.value > sol.value + margin || !self.feasible(&sol.argpoint, xi, 1e-7) {
                    sol = alt;
                    sol.kkt_residual = self.kkt_residual(&cs, xi, &sol.argpoint, sol.multiplier);
                }
            }
        }
        sol.value = dot(c, &sol.argpoint);
        if sol.status == SolveStatus::UnboundedFlagged {
            sol.value = sign * f64::INFINITY;
        }
        sol
    }

    pub fn solve_bisection(&self, c: &[f64], xi: &[f64], sense: Sense, tol: f64) -> ConicSolution {
        if !self.compact {
            return ConicSolution::unbounded(self.d, sense);
        }
        let sign = if sense == Sense::Sup { 1.0 } else { -1.0 };
        let cs: Vec<f64> = c.iter().map(|v| sign * v).collect();
        let mut sol = self.bisection(&cs, xi, tol);
        sol.kkt_residual = self.kkt_residual(&cs, xi, &sol.argpoint, sol.multiplier);
        sol.value = dot(c, &sol.argpoint);
        sol
    }

    fn feasible(&self, x: &[f64], xi: &[f64], tol: f64) -> bool {
        let scale = 1.0 + x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let bounds = (0..self.d).all(|j| x[j] >= self.lower[j] - tol * scale && x[j] <= self.upper[j] + tol * scale);
        let eq_ok = self.eq.as_ref().is_none_or(|(e, rhs)| (dot(e, x) - rhs).abs() <= tol * scale);
        bounds && eq_ok && self.quad(x, xi) <= tol * scale * scale * self.q_scale.max(1.0)
    }

    /// Cholesky factor of `2 Q_FF` for the free coordinates of `state`,
    /// written into `face`. Fails when the face Hessian is singular.
    fn face(&self, state: &[Bound], face: &mut Face) -> bool {
        let d = self.d;
        face.free.clear();
        for j in 0..d {
            face.is_free[j] = state[j] == Bound::Free;
            if face.is_free[j] {
                face.free.push(j);
            }
        }
        let nf = face.free.len();
        face.l.clear();
        face.l.resize(nf * nf, 0.0);
        for (a, &ia) in face.free.iter().enumerate() {
            for (b, &ib) in face.free.iter().enumerate().take(a + 1) {
                face.l[a * nf + b] = 2.0 * self.q[ia * d + ib];
            }
        }
        let max_diag = (0..nf).map(|a| face.l[a * nf + a]).fold(0.0, f64::max);
        if !cholesky(&mut face.l, nf, 1e-13 * max_diag.max(2.0 * self.q_scale)) {
            return false;
        }
        face.has_eq = false;
        face.ev = 0.0;
        if let Some((e, _)) = &self.eq {
            face.e_f.clear();
            face.e_f.extend(face.free.iter().map(|&j| e[j]));
            if face.e_f.iter().any(|v| *v != 0.0) {
                face.v.clear();
                face.v.extend_from_slice(&face.e_f);
                chol_solve(&face.l, nf, &mut face.v);
                face.ev = dot(&face.e_f, &face.v);
                face.has_eq = true;
            }
        }
        true
    }

    /// Face minimizer of `x'Qx + lin'x` with non-free coordinates held at
    /// `fixed` and the equality right-hand side `rhs`. Returns the equality
    /// multiplier and the magnitude of the intermediate solves.
    fn face_solve(&self, face: &mut Face, lin: &[f64], fixed: &[f64], rhs: f64, out: &mut [f64]) -> (f64, f64) {
        let d = self.d;
        let nf = face.free.len();
        out.copy_from_slice(fixed);
        for &j in &face.free {
            out[j] = 0.0;
        }
        face.b.clear();
        for &ia in &face.free {
            let row = &self.q[ia * d..(ia + 1) * d];
            face.b.push(-lin[ia] - 2.0 * dot(row, out));
        }
        chol_solve(&face.l, nf, &mut face.b);
        let mut mag = face.b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let mut nu = 0.0;
        if let (true, Some((e, _))) = (face.has_eq, &self.eq) {
            let fixed_part: f64 = (0..d).filter(|&j| !face.is_free[j]).map(|j| e[j] * out[j]).sum();
            let target = rhs - fixed_part;
            nu = (dot(&face.e_f, &face.b) - target) / face.ev;
            for a in 0..nf {
                mag = mag.max((nu * face.v[a]).abs());
                face.b[a] -= nu * face.v[a];
            }
        }
        for (a, &ia) in face.free.iter().enumerate() {
            out[ia] = face.b[a];
        }
        (nu, mag)
    }

    /// Multipliers `grad_j + nu e_j` given `qx = Q x`.
    fn multipliers(&self, qx: &[f64], lin: &[f64], nu: f64, out: &mut [f64]) {
        for j in 0..self.d {
            out[j] = 2.0 * qx[j] + lin[j] + self.eq.as_ref().map_or(0.0, |(e, _)| nu * e[j]);
        }
    }

    fn rhs(&self) -> f64 {
        self.eq.as_ref().map_or(0.0, |(_, r)| *r)
    }

    /// Primal active-set method for `min x'Qx + lin'x` over the region from
    /// a feasible `x` whose non-free coordinates sit at their bounds.
    fn qp_active_set(&self, lin: &[f64], x: &mut [f64], state: &mut [Bound]) -> bool {
        let d = self.d;
        let mut target = vec![0.0; d];
        let mut lambda = vec![0.0; d];
        let mut qx = vec![0.0; d];
        let mut face = Face::new(d);
        let scale = 1.0 + lin.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for _ in 0..(20 * d + 50) {
            if !self.face(state, &mut face) {
                return false;
            }
            let (nu, _) = self.face_solve(&mut face, lin, x, self.rhs(), &mut target);
            let xscale = 1.0 + x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let step = face.free.iter().map(|&j| (target[j] - x[j]).abs()).fold(0.0, f64::max);
            if step <= 1e-13 * xscale {
                x.copy_from_slice(&target);
                self.qx(x, &mut qx);
                self.multipliers(&qx, lin, nu, &mut lambda);
                let tol = 1e-11 * (scale + 2.0 * self.q_scale * xscale);
                let mut worst = None;
                let mut worst_val = tol;
                for j in 0..d {
                    let v = match state[j] {
                        Bound::Lower => -lambda[j],
                        Bound::Upper => lambda[j],
                        _ => continue,
                    };
                    if v > worst_val {
                        worst_val = v;
                        worst = Some(j);
                    }
                }
                match worst {
                    Some(j) => state[j] = Bound::Free,
                    None => return true,
                }
                continue;
            }
            let mut alpha = 1.0;
            let mut blocking = None;
            for &j in &face.free {
                let p = target[j] - x[j];
                if p < 0.0 && self.lower[j].is_finite() {
                    let a = (self.lower[j] - x[j]) / p;
                    if a < alpha {
                        alpha = a.max(0.0);
                        blocking = Some((j, Bound::Lower));
                    }
                } else if p > 0.0 && self.upper[j].is_finite() {
                    let a = (self.upper[j] - x[j]) / p;
                    if a < alpha {
                        alpha = a.max(0.0);
                        blocking = Some((j, Bound::Upper));
                    }
                }
            }
            for &j in &face.free {
                x[j] += alpha * (target[j] - x[j]);
            }
            if let Some((j, b)) = blocking {
                x[j] = if b == Bound::Lower { self.lower[j] } else { self.upper[j] };
                state[j] = b;
            }
        }
        false
    }

    /// Traces the minimizer of `x'Qx - 2 xi'x - s c'x` from `s = 0` until
    /// the quadratic constraint becomes active. Returns the maximizer of
    /// `c'x`, the multiplier `1/s` and the status.
    fn homotopy(&self, center: &Center, c: &[f64], xi: &[f64]) -> Option<(Vec<f64>, f64, SolveStatus)> {
        let d = self.d;
        let mut x = center.x.clone();
        let mut state = center.state.clone();
        let lin0: Vec<f64> = xi.iter().map(|v| -2.0 * v).collect();
        let lin1: Vec<f64> = c.iter().map(|v| -v).collect();
        let zeros = vec![0.0; d];
        let mut x0 = vec![0.0; d];
        let mut x1 = vec![0.0; d];
        let mut lam0 = vec![0.0; d];
        let mut lam1 = vec![0.0; d];
        let mut qx0 = vec![0.0; d];
        let mut qx1 = vec![0.0; d];
        let mut s = 0.0_f64;
        let xi_scale = xi.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let c_scale = c.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let mut stalls = 0;
        let mut face = Face::new(d);
        for _ in 0..(20 * d + 50) {
            if !self.face(&state, &mut face) {
                return None;
            }
            // x(s) = x0 + s x1 on this face
            let (nu0, _) = self.face_solve(&mut face, &lin0, &x, self.rhs(), &mut x0);
            let (nu1, mag1) = self.face_solve(&mut face, &lin1, &zeros, 0.0, &mut x1);
            let noise = 1e-12 * mag1;
            for j in 0..d {
                if state[j] != Bound::Free || x1[j].abs() <= noise {
                    x1[j] = 0.0;
                }
                if state[j] != Bound::Free {
                    x0[j] = x[j];
                }
            }
            // the last free coordinate of the equality row stays free
            let pinned = self.eq.as_ref().and_then(|(e, _)| {
                let mut it = face.free.iter().filter(|&&j| e[j] != 0.0);
                match (it.next(), it.next()) {
                    (Some(&j), None) => Some(j),
                    _ => None,
                }
            });
            self.qx(&x0, &mut qx0);
            self.qx(&x1, &mut qx1);
            self.multipliers(&qx0, &lin0, nu0, &mut lam0);
            self.multipliers(&qx1, &lin1, nu1, &mut lam1);
            let g0 = dot(&x0, &qx0) - 2.0 * dot(xi, &x0);
            let g1 = dot(&x0, &qx1) - dot(xi, &x1);
            let g2 = dot(&x1, &qx1);
            let x1_norm = x1.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let x_scale = 1.0 + x0.iter().fold(0.0_f64, |m, v| m.max(v.abs()));

            // root of g0 + 2 g1 s + g2 s^2 = 0 at or beyond s
            let s_root = if g2 > 1e-14 * self.q_scale * x1_norm * x1_norm && g2 > 0.0 {
                let disc = (g1 * g1 - g0 * g2).max(0.0);
                let r = if g1 <= 0.0 { (-g1 + disc.sqrt()) / g2 } else { -g0 / (g1 + disc.sqrt()) };
                r.max(s)
            } else if g1 > 0.0 {
                (-g0 / (2.0 * g1)).max(s)
            } else {
                f64::INFINITY
            };

            let mut s_next = s_root;
            let mut event: Option<(usize, Bound)> = None;
            for j in 0..d {
                match state[j] {
                    Bound::Free if pinned == Some(j) => {}
                    Bound::Free => {
                        if x1[j] < 0.0 && self.lower[j].is_finite() {
                            let t = (self.lower[j] - x0[j]) / x1[j];
                            if t < s_next {
                                s_next = t;
                                event = Some((j, Bound::Lower));
                            }
                        } else if x1[j] > 0.0 && self.upper[j].is_finite() {
                            let t = (self.upper[j] - x0[j]) / x1[j];
                            if t < s_next {
                                s_next = t;
                                event = Some((j, Bound::Upper));
                            }
                        }
                    }
                    Bound::Lower => {
                        if lam1[j] < 0.0 {
                            let t = -lam0[j] / lam1[j];
                            if t < s_next {
                                s_next = t;
                                event = Some((j, Bound::Free));
                            }
                        }
                    }
                    Bound::Upper => {
                        if lam1[j] > 0.0 {
                            let t = -lam0[j] / lam1[j];
                            if t < s_next {
                                s_next = t;
                                event = Some((j, Bound::Free));
                            }
                        }
                    }
                    Bound::Fixed => {}
                }
            }
            let s_eval = s_next.max(s);
            match event {
                None => {
                    if s_eval.is_infinite() {
                        if x1_norm <= 1e-14 * (1.0 + xi_scale + c_scale) * x_scale {
                            // c'x is constant along the path: the LP optimum is feasible
                            return Some((x0, 0.0, SolveStatus::Optimal));
                        }
                        return None;
                    }
                    let out: Vec<f64> = (0..d).map(|j| x0[j] + s_eval * x1[j]).collect();
                    let mu = if s_eval > 0.0 { 1.0 / s_eval } else { f64::INFINITY };
                    return Some((out, mu.min(f64::MAX), SolveStatus::Optimal));
                }
                Some((j, b)) => {
                    if s_eval <= s * (1.0 + 1e-12) + 1e-300 {
                        stalls += 1;
                        if stalls > 2 * d + 5 {
                            return None;
                        }
                    } else {
                        stalls = 0;
                    }
                    for k in 0..d {
                        x[k] = x0[k] + s_eval * x1[k];
                    }
                    match b {
                        Bound::Lower => x[j] = self.lower[j],
                        Bound::Upper => x[j] = self.upper[j],
                        _ => {}
                    }
                    // keep free coordinates inside the box after round-off
                    for k in 0..d {
                        x[k] = x[k].max(self.lower[k]).min(self.upper[k]);
                    }
                    state[j] = b;
                    s = s_eval;
                }
            }
        }
        None
    }

    /// Bisection on `s` for `g(x(s)) = 0`, `x(s)` from accelerated
    /// projected gradient. Returns the feasible-side iterate.
    fn bisection(&self, c: &[f64], xi: &[f64], tol: f64) -> ConicSolution {
        let d = self.d;
        let poly = Polyhedron {
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            equality: self.eq.as_ref().map(|(e, r)| crate::constraint_sets::Equality { coeffs: e.clone(), rhs: *r }),
        };
        let mut warm = poly.project(&vec![0.0; d]);
        let inner = |s: f64, warm: &mut Vec<f64>| -> (Vec<f64>, bool) {
            let lin: Vec<f64> = (0..d).map(|j| -2.0 * xi[j] - s * c[j]).collect();
            let lip = self.lipschitz.max(1e-12);
            let mut x = warm.clone();
            let mut y = x.clone();
            let mut t = 1.0_f64;
            let mut grad = vec![0.0; d];
            for _ in 0..20_000 {
                self.qx(&y, &mut grad);
                let stepped: Vec<f64> = (0..d).map(|j| y[j] - (2.0 * grad[j] + lin[j]) / lip).collect();
                let next = poly.project(&stepped);
                let diff = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                y = (0..d).map(|j| next[j] + (t - 1.0) / t_next * (next[j] - x[j])).collect();
                // restart when the momentum step leaves the descent direction
                let dir: f64 = (0..d).map(|j| (2.0 * grad[j] + lin[j]) * (next[j] - x[j])).sum();
                if dir > 0.0 {
                    y = next.clone();
                    t = 1.0;
                } else {
                    t = t_next;
                }
                x = next;
                let scale = 1.0 + x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                if diff <= 1e-13 * scale {
                    *warm = x.clone();
                    return (x, true);
                }
            }
            *warm = x.clone();
            (x, false)
        };
        let g_scale = 1.0 + xi.iter().map(|v| v.abs()).sum::<f64>();
        if let Some(x) = self.lp_maximizer(c) {
            if self.quad(&x, xi) <= 1e-12 * g_scale * (1.0 + dot(&x, &x)) {
                return ConicSolution { value: dot(c, &x), argpoint: x, kkt_residual: 0.0, status: SolveStatus::Optimal, multiplier: 0.0 };
            }
        }
        let (x0, _) = inner(0.0, &mut warm);
        if self.quad(&x0, xi) >= -1e-14 * g_scale {
            return ConicSolution { value: dot(c, &x0), argpoint: x0, kkt_residual: 0.0, status: SolveStatus::Optimal, multiplier: f64::INFINITY };
        }
        let mut lo = 0.0;
        let mut x_lo = x0;
        let mut hi = 1.0;
        let mut converged = true;
        loop {
            let (x, ok) = inner(hi, &mut warm);
            converged &= ok;
            if self.quad(&x, xi) > 0.0 {
                break;
            }
            lo = hi;
            x_lo = x;
            hi *= 4.0;
            if hi > 1e15 {
                return ConicSolution {
                    value: dot(c, &x_lo),
                    argpoint: x_lo,
                    kkt_residual: 0.0,
                    status: if converged { SolveStatus::Optimal } else { SolveStatus::MaxIter },
                    multiplier: 0.0,
                };
            }
        }
        let mut status = SolveStatus::MaxIter;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let (x, ok) = inner(mid, &mut warm);
            converged &= ok;
            if self.quad(&x, xi) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
                x_lo = x;
            }
            if hi - lo <= tol.min(1e-10) * hi {
                status = if converged { SolveStatus::Optimal } else { SolveStatus::MaxIter };
                break;
            }
        }
        let mu = if lo > 0.0 { 1.0 / lo } else { f64::INFINITY };
        ConicSolution { value: dot(c, &x_lo), argpoint: x_lo, kkt_residual: 0.0, status, multiplier: mu }
    }

    /// Maximizer of `c'x` over the region alone, `None` when unbounded.
    fn lp_maximizer(&self, c: &[f64]) -> Option<Vec<f64>> {
        let d = self.d;
        let pick = |j: usize, slope: f64| -> f64 {
            if slope > 0.0 {
                self.upper[j]
            } else if slope < 0.0 {
                self.lower[j]
            } else {
                0.0_f64.max(self.lower[j]).min(self.upper[j])
            }
        };
        let Some((e, rhs)) = &self.eq else {
            let x: Vec<f64> = (0..d).map(|j| pick(j, c[j])).collect();
            return x.iter().all(|v| v.is_finite()).then_some(x);
        };
        // x_j(nu) maximizes (c_j - nu e_j) x_j; e'x(nu) is nonincreasing in nu
        let tied = |j: usize, nu: f64| e[j] != 0.0 && c[j] / e[j] == nu;
        let at = |nu: f64| -> Vec<f64> {
            (0..d).map(|j| if tied(j, nu) { pick(j, 0.0) } else { pick(j, c[j] - nu * e[j]) }).collect()
        };
        let mut breaks: Vec<f64> = (0..d).filter(|&j| e[j] != 0.0).map(|j| c[j] / e[j]).collect();
        breaks.sort_by(|a, b| a.total_cmp(b));
        breaks.dedup();
        let level = |x: &[f64]| dot(e, x);
        // candidate nu values: breakpoints and the open intervals between them
        let mut probes = Vec::with_capacity(2 * breaks.len() + 1);
        match (breaks.first(), breaks.last()) {
            (Some(&lo), Some(&hi)) => {
                probes.push(lo - 1.0 - lo.abs());
                for k in 0..breaks.len() {
                    probes.push(breaks[k]);
                    let next = breaks.get(k + 1).copied().unwrap_or(hi + 1.0 + hi.abs());
                    probes.push(0.5 * (breaks[k] + next));
                }
            }
            _ => probes.push(0.0),
        }
        for (k, &nu) in probes.iter().enumerate() {
            let x = at(nu);
            if x.iter().any(|v| !v.is_finite()) {
                continue;
            }
            let gap = level(&x) - rhs;
            let tol = 1e-12 * (1.0 + rhs.abs() + x.iter().zip(e).map(|(a, b)| (a * b).abs()).sum::<f64>());
            if gap.abs() <= tol {
                return Some(x);
            }
            if k % 2 == 1 && gap != 0.0 {
                // at a breakpoint: the tied coordinates absorb the gap
                let mut x = x;
                let mut rest = -gap;
                for j in (0..d).filter(|&j| tied(j, nu)) {
                    let (lo, hi) = (self.lower[j] - x[j], self.upper[j] - x[j]);
                    let step = (rest / e[j]).max(lo).min(hi);
                    x[j] += step;
                    rest -= step * e[j];
                }
                if rest.abs() <= tol && x.iter().all(|v| v.is_finite()) {
                    return Some(x);
                }
            }
        }
        None
    }

    /// KKT residual of a candidate maximizer of `c'x`, relative to
    /// `1 + |c|_inf`, including primal infeasibility.
    fn kkt_residual(&self, c: &[f64], xi: &[f64], x: &[f64], mu: f64) -> f64 {
        let d = self.d;
        let scale = 1.0 + c.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let x_scale = 1.0 + x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let mut qx = vec![0.0; d];
        self.qx(x, &mut qx);
        let g = dot(x, &qx) - 2.0 * dot(xi, x);
        let mut infeas = g.max(0.0) / (self.q_scale * x_scale * x_scale).max(1e-300);
        for j in 0..d {
            infeas = infeas.max((self.lower[j] - x[j]).max(x[j] - self.upper[j]).max(0.0) / x_scale);
        }
        if let Some((e, r)) = &self.eq {
            infeas = infeas.max((dot(e, x) - r).abs() / x_scale);
        }
        if !(mu < 1e12) {
            // the feasible set has collapsed to the center point
            return infeas;
        }
        let resid: Vec<f64> = (0..d).map(|j| c[j] - 2.0 * mu * (qx[j] - xi[j])).collect();
        let at_bound = |j: usize| {
            let t = 1e-9 * x_scale;
            (x[j] - self.lower[j]).abs() <= t || (self.upper[j] - x[j]).abs() <= t
        };
        let free: Vec<usize> = (0..d).filter(|&j| !at_bound(j)).collect();
        let nu = match &self.eq {
            Some((e, _)) => {
                let den: f64 = free.iter().map(|&j| e[j] * e[j]).sum();
                if den > 0.0 {
                    free.iter().map(|&j| e[j] * resid[j]).sum::<f64>() / den
                } else {
                    0.0
                }
            }
            None => 0.0,
        };
        let e_at = |j: usize| self.eq.as_ref().map_or(0.0, |(e, _)| e[j]);
        let mut stat = 0.0_f64;
        for j in 0..d {
            let r = resid[j] - nu * e_at(j);
            let t = 1e-9 * x_scale;
            let viol = if self.lower[j] == self.upper[j] {
                0.0
            } else if (x[j] - self.lower[j]).abs() <= t {
                r.max(0.0)
            } else if (self.upper[j] - x[j]).abs() <= t {
                (-r).max(0.0)
            } else {
                r.abs()
            };
            stat = stat.max(viol);
        }
        let slack = if mu > 0.0 { mu * g.abs() } else { 0.0 };
        (stat + slack) / scale + infeas
    }
}

/// Factorization of one face, reused across iterations.
#[derive(Debug)]
struct Face {
    free: Vec<usize>,
    is_free: Vec<bool>,
    l: Vec<f64>,
    e_f: Vec<f64>,
    /// `(2 Q_FF)^{-1} e_F`
    v: Vec<f64>,
    has_eq: bool,
    ev: f64,
    b: Vec<f64>,
}

impl Face {
    fn new(d: usize) -> Self {
        Self {
            free: Vec::with_capacity(d),
            is_free: vec![false; d],
            l: Vec::with_capacity(d * d),
            e_f: Vec::with_capacity(d),
            v: Vec::with_capacity(d),
            has_eq: false,
            ev: 0.0,
            b: Vec::with_capacity(d),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place lower Cholesky of a row-major `n x n` matrix (lower triangle
/// read). Fails when a pivot falls below `floor`.
fn cholesky(a: &mut [f64], n: usize, floor: f64) -> bool {
    for j in 0..n {
        let mut s = a[j * n + j];
        for k in 0..j {
            s -= a[j * n + k] * a[j * n + k];
        }
        if !(s > floor) {
            return false;
        }
        let ljj = s.sqrt();
        a[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / ljj;
        }
    }
    true
}

fn chol_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichResult {
    pub lower: f64,
    pub upper: f64,
    /// `p' D^{-1} delta_hat = p'(beta_hat - beta0)`.
    pub value: f64,
    pub inside: bool,
}

/// Checks `inf <= p'D^{-1} delta_hat <= sup` over the un-relaxed set
/// centered at `beta0` with `xi = gamma_hat - gamma` (only computable when
/// the pseudo-true value is known).
pub fn sandwich_check(
    fit: &FittedSC,
    constraint: crate::constraint_sets::ConstraintSpec,
    beta0: &[f64],
    gamma_hat_minus_gamma: &[f64],
    p: &PredictorVector,
) -> Result<SandwichResult> {
    let d = fit.dim();
    let pv = p.p();
    if beta0.len() != d || gamma_hat_minus_gamma.len() != d || pv.len() != d {
        return Err(Error::Dimension("sandwich inputs must all have the fit's dimension".into()));
    }
    let spec = DeltaStarSpec::centered(constraint, beta0, fit.n_weights, &fit.scaling)?;
    let solver = QclpSolver::new(&fit.q_hat, &spec.region(), None)?;
    let c: Vec<f64> = pv.iter().zip(&fit.scaling).map(|(a, s)| a / s).collect();
    let (inf, sup) = solver.bounds(&c, gamma_hat_minus_gamma, 1e-9);
    let value: f64 = pv.iter().zip(fit.beta_hat.iter().zip(beta0)).map(|(p, (b, b0))| p * (b - b0)).sum();
    let slack = 1e-9 * (1.0 + value.abs() + inf.value.abs().min(1e12) + sup.value.abs().min(1e12));
    Ok(SandwichResult { lower: inf.value, upper: sup.value, value, inside: inf.value - slack <= value && value <= sup.value + slack })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint_sets::Equality;
    use approx::assert_abs_diff_eq;

    fn simplex_region(w_star: &[f64]) -> Polyhedron {
        Polyhedron {
            lower: w_star.iter().map(|w| -w).collect(),
            upper: vec![f64::INFINITY; w_star.len()],
            equality: Some(Equality { coeffs: vec![1.0; w_star.len()], rhs: 0.0 }),
        }
    }

    #[test]
    fn identity_q_zero_xi_is_origin() {
        let p = ConicProblem {
            objective: vec![1.0, -2.0, 0.5],
            q: DMatrix::identity(3, 3),
            xi: vec![0.0; 3],
            region: simplex_region(&[0.3, 0.3, 0.4]),
            sense: Sense::Sup,
            radius_cap: None,
        };
        let s = solve(&p, 1e-9).unwrap();
        assert_abs_diff_eq!(s.value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn disk_in_free_plane() {
        let p = ConicProblem {
            objective: vec![1.0, 0.0],
            q: DMatrix::identity(2, 2),
            xi: vec![1.0, 0.0],
            region: Polyhedron::free(2),
            sense: Sense::Sup,
            radius_cap: None,
        };
        let s = solve(&p, 1e-9).unwrap();
        assert_abs_diff_eq!(s.value, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.argpoint[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.argpoint[1], 0.0, epsilon = 1e-12);
        let inf = solve(&ConicProblem { sense: Sense::Inf, ..p.clone() }, 1e-9).unwrap();
        assert_abs_diff_eq!(inf.value, 0.0, epsilon = 1e-12);
        let b = solve_bisection(&p, 1e-9).unwrap();
        assert_abs_diff_eq!(b.value, 2.0, epsilon = 1e-7);
    }

    #[test]
    fn singular_q_on_free_coordinates_is_flagged() {
        let mut q = DMatrix::identity(2, 2);
        q[(1, 1)] = 0.0;
        let p = ConicProblem {
            objective: vec![0.0, 1.0],
            q,
            xi: vec![0.0, 1.0],
            region: Polyhedron::free(2),
            sense: Sense::Sup,
            radius_cap: None,
        };
        let s = solve(&p, 1e-9).unwrap();
        assert_eq!(s.status, SolveStatus::UnboundedFlagged);
        let capped = solve(&ConicProblem { radius_cap: Some(3.0), ..p }, 1e-9).unwrap();
        assert_eq!(capped.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(capped.value, 3.0, epsilon = 1e-9);
    }

    #[test]
    fn non_psd_q_is_input_error() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(QclpSolver::new(&q, &Polyhedron::free(2), None), Err(Error::Input(_))));
    }

    #[test]
    fn active_set_matches_bisection_on_simplex() {
        let q = DMatrix::from_row_slice(4, 4, &[
            2.0, 0.3, 0.1, 0.0, 0.3, 1.5, 0.2, 0.1, 0.1, 0.2, 1.0, 0.3, 0.0, 0.1, 0.3, 0.8,
        ]);
        let region = simplex_region(&[0.5, 0.5, 0.0, 0.0]);
        for (xi, c) in [
            (vec![0.4, -0.2, 0.3, 0.1], vec![1.0, 0.5, -0.3, 2.0]),
            (vec![-0.5, 0.5, 0.0, 0.2], vec![0.2, -1.0, 0.3, 0.1]),
            (vec![0.0, 0.0, 0.9, -0.9], vec![1.0, 1.0, 1.0, 1.0]),
        ] {
            for sense in [Sense::Sup, Sense::Inf] {
                let p = ConicProblem {
                    objective: c.clone(),
                    q: q.clone(),
                    xi: xi.clone(),
                    region: region.clone(),
                    sense,
                    radius_cap: None,
                };
                let a = solve(&p, 1e-9).unwrap();
                let b = solve_bisection(&p, 1e-10).unwrap();
                assert_eq!(a.status, SolveStatus::Optimal);
                assert!(a.kkt_residual < 1e-8, "kkt {}", a.kkt_residual);
                assert_abs_diff_eq!(a.value, b.value, epsilon = 1e-6);
            }
        }
    }
}
