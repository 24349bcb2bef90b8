//! Constrained least-squares estimation of the synthetic control weights.
//!
//! The control coefficients `r` are profiled out by projecting onto the
//! orthogonal complement of `C`; the weights are then found by accelerated
//! projected gradient with adaptive restart, and simplex fits are finished
//! with an exact active-set step on the support.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraint_sets::{RSpace, WeightSet};
use crate::error::{Error, Result};
use crate::linalg;
use crate::panel_io::{PredictorVector, ScDesign};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub iterations: usize,
    pub kkt_residual: f64,
    pub converged: bool,
    /// `C` had dependent columns; `r` is the minimum-norm solution.
    pub rank_deficient_controls: bool,
    /// `Q_hat` is numerically singular, so the minimizer may not be unique.
    pub singular_gram: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedSC {
    /// `(w', r')'`.
    pub beta_hat: Vec<f64>,
    pub n_weights: usize,
    /// `A - Z beta_hat`.
    pub residuals: Vec<f64>,
    /// `D^{-1} Z'Z D^{-1}`.
    pub q_hat: DMatrix<f64>,
    pub scaling: Vec<f64>,
    pub objective: f64,
    pub solver_report: SolverReport,
}

impl FittedSC {
    pub fn weights(&self) -> &[f64] {
        &self.beta_hat[..self.n_weights]
    }

    pub fn controls(&self) -> &[f64] {
        &self.beta_hat[self.n_weights..]
    }

    pub fn dim(&self) -> usize {
        self.beta_hat.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative objective decrease below which iteration stops.
    pub objective_tol: f64,
    /// Step-length (projection residual) tolerance.
    pub step_tol: f64,
    /// Initial weights; defaults to the uniform simplex point.
    pub start: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iter: 50_000, objective_tol: 1e-12, step_tol: 1e-10, start: None }
    }
}

pub fn fit(design: &ScDesign) -> Result<FittedSC> {
    fit_with(design, &FitOptions::default())
}

pub fn fit_with(design: &ScDesign, opts: &FitOptions) -> Result<FittedSC> {
    let j = design.n_weights();
    let k = design.n_controls();
    let n = design.a.len();

    // Profile out r: residual maker of C.
    let free_r = design.constraint.r_space == RSpace::Free && k > 0;
    let (q_c, rank_deficient) = if free_r {
        let keep = linalg::independent_columns(&design.c, 1e-10);
        if keep.len() < k {
            log::warn!(
                "control matrix has rank {} < {}; using the minimum-norm control coefficients",
                keep.len(),
                k
            );
        }
        let ck = design.c.select_columns(keep.iter());
        let q = if ck.ncols() > 0 { ck.qr().q() } else { DMatrix::zeros(n, 0) };
        (q, keep.len() < k)
    } else {
        (DMatrix::zeros(n, 0), false)
    };
    let annihilate = |x: &DMatrix<f64>| -> DMatrix<f64> {
        if q_c.ncols() == 0 {
            x.clone()
        } else {
            x - &q_c * (q_c.transpose() * x)
        }
    };
    let a_t = annihilate(&DMatrix::from_column_slice(n, 1, design.a.as_slice())).column(0).into_owned();
    let b_t = annihilate(&design.b);
    let gram = b_t.transpose() * &b_t;
    let lin = b_t.transpose() * &a_t;
    let const_term = a_t.dot(&a_t);
    let obj = |w: &DVector<f64>| -> f64 { w.dot(&(&gram * w)) - 2.0 * lin.dot(w) + const_term };

    let set = design.constraint.weights;
    let (w, iterations, mut converged) = match set {
        WeightSet::Unconstrained => {
            let (w, _) = linalg::min_norm_solve(&b_t, &a_t);
            (w, 0, true)
        }
        _ => fista(&gram, &lin, &obj, set, j, opts)?,
    };
    let mut w = w;
    if matches!(set, WeightSet::Simplex) || matches!(set, WeightSet::SimplexL2 { .. }) {
        if let Some(polished) = simplex_active_set(&gram, &lin, &w) {
            if set.contains(polished.as_slice(), 1e-10) && obj(&polished) <= obj(&w) + 1e-12 * (1.0 + obj(&w).abs()) {
                w = polished;
            }
        }
    }

    let gradient = 2.0 * (&gram * &w - &lin);
    let kkt = kkt_residual(set, &w, &gradient, &gram);
    if !converged && kkt <= 1e-6 {
        converged = true;
    }

    // Recover r.
    let r = if free_r {
        let rhs = &design.a - &design.b * &w;
        linalg::min_norm_solve(&design.c, &rhs).0
    } else {
        DVector::zeros(k)
    };
    let mut beta = w.iter().cloned().collect::<Vec<f64>>();
    beta.extend(r.iter());
    let beta_v = DVector::from_vec(beta.clone());
    let resid = &design.a - &design.z * &beta_v;
    let objective = resid.dot(&resid);
    if !converged {
        return Err(Error::Convergence { iterations, objective, best: beta });
    }

    let dinv = DVector::from_iterator(design.dim(), design.scaling.iter().map(|d| 1.0 / d));
    let zd = &design.z * DMatrix::from_diagonal(&dinv);
    let mut q_hat = zd.transpose() * &zd;
    linalg::symmetrize(&mut q_hat);
    let singular_gram = linalg::independent_columns(&design.z, 1e-10).len() < design.dim();

    Ok(FittedSC {
        beta_hat: beta,
        n_weights: j,
        residuals: resid.iter().cloned().collect(),
        q_hat,
        scaling: design.scaling.clone(),
        objective,
        solver_report: SolverReport {
            iterations,
            kkt_residual: kkt,
            converged,
            rank_deficient_controls: rank_deficient,
            singular_gram,
        },
    })
}

fn fista(
    gram: &DMatrix<f64>,
    lin: &DVector<f64>,
    obj: &dyn Fn(&DVector<f64>) -> f64,
    set: WeightSet,
    j: usize,
    opts: &FitOptions,
) -> Result<(DVector<f64>, usize, bool)> {
    let lipschitz = 2.0 * linalg::max_eigenvalue_psd(gram) * 1.05;
    let project = |v: &DVector<f64>| -> Result<DVector<f64>> { Ok(DVector::from_vec(set.project(v.as_slice())?)) };
    let start = match &opts.start {
        Some(s) if s.len() != j => {
            return Err(Error::Dimension(format!("start has length {}, expected {}", s.len(), j)))
        }
        Some(s) => DVector::from_column_slice(s),
        None => DVector::from_element(j, 1.0 / j as f64),
    };
    let mut w = project(&start)?;
    if lipschitz <= 0.0 {
        return Ok((w, 0, true));
    }
    let mut y = w.clone();
    let mut t = 1.0_f64;
    let mut f_w = obj(&w);
    for it in 1..=opts.max_iter {
        let grad = 2.0 * (gram * &y - lin);
        let w_next = project(&(&y - grad / lipschitz))?;
        let f_next = obj(&w_next);
        let step = (&w_next - &w).norm();
        if f_next > f_w {
            // adaptive restart
            y = w.clone();
            t = 1.0;
            continue;
        }
        let decrease = f_w - f_next;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &w_next + (&w_next - &w) * ((t - 1.0) / t_next);
        t = t_next;
        w = w_next;
        f_w = f_next;
        if decrease <= opts.objective_tol * (1.0 + f_w.abs()) && step <= opts.step_tol {
            return Ok((w, it, true));
        }
    }
    Ok((w, opts.max_iter, false))
}

/// Exact minimizer of `w'Gw - 2h'w` over the simplex with the same
/// `sum(w)` as `w0`, by a primal active-set method started at `w0`.
pub(crate) fn simplex_active_set(gram: &DMatrix<f64>, lin: &DVector<f64>, w0: &DVector<f64>) -> Option<DVector<f64>> {
    let j = w0.len();
    let total: f64 = w0.sum();
    let mut w = w0.map(|v| v.max(0.0));
    let s = w.sum();
    if s <= 0.0 {
        return None;
    }
    w *= total / s;
    let mut support: Vec<bool> = w.iter().map(|&v| v > 1e-12 * total.max(1.0)).collect();
    for (i, v) in w.iter_mut().enumerate() {
        if !support[i] {
            *v = 0.0;
        }
    }
    let scale = gram.diagonal().amax().max(lin.amax()).max(1e-300);
    for _ in 0..(4 * j + 10) {
        let idx: Vec<usize> = (0..j).filter(|&i| support[i]).collect();
        let m = idx.len();
        // KKT system on the support: [2G_SS 1; 1' 0] [w_S; -lambda] = [2h_S; total]
        let mut kkt = DMatrix::zeros(m + 1, m + 1);
        let mut rhs = DVector::zeros(m + 1);
        for (a, &ia) in idx.iter().enumerate() {
            for (b, &ib) in idx.iter().enumerate() {
                kkt[(a, b)] = 2.0 * gram[(ia, ib)];
            }
            kkt[(a, m)] = 1.0;
            kkt[(m, a)] = 1.0;
            rhs[a] = 2.0 * lin[ia];
        }
        rhs[m] = total;
        let sol = kkt.clone().lu().solve(&rhs).filter(|s| s.iter().all(|v| v.is_finite()));
        let sol = match sol {
            Some(s) if (&kkt * &s - &rhs).amax() <= 1e-9 * (1.0 + rhs.amax()) => s,
            _ => linalg::min_norm_solve(&kkt, &rhs).0,
        };
        let mut target = DVector::zeros(j);
        for (a, &ia) in idx.iter().enumerate() {
            target[ia] = sol[a];
        }
        // blocking step toward the face optimum
        let mut alpha = 1.0;
        let mut blocking = None;
        for &i in &idx {
            if target[i] < 0.0 {
                let a = w[i] / (w[i] - target[i]);
                if a < alpha {
                    alpha = a;
                    blocking = Some(i);
                }
            }
        }
        w = &w + (&target - &w) * alpha;
        if let Some(b) = blocking {
            w[b] = 0.0;
            support[b] = false;
            for i in 0..j {
                if !support[i] {
                    w[i] = 0.0;
                }
            }
            continue;
        }
        // dual check on zero coordinates
        let grad = 2.0 * (gram * &w - lin);
        let lambda = idx.iter().map(|&i| grad[i]).sum::<f64>() / m.max(1) as f64;
        let mut worst = None;
        let mut worst_val = -1e-12 * scale;
        for i in 0..j {
            if !support[i] {
                let v = grad[i] - lambda;
                if v < worst_val {
                    worst_val = v;
                    worst = Some(i);
                }
            }
        }
        match worst {
            Some(i) => support[i] = true,
            None => return Some(w),
        }
    }
    None
}

/// Stationarity residual: for the simplex, the largest violation of
/// `g_j = lambda` on the support and `g_j >= lambda` off it; for other
/// sets, the norm of the gradient mapping.
fn kkt_residual(set: WeightSet, w: &DVector<f64>, grad: &DVector<f64>, gram: &DMatrix<f64>) -> f64 {
    match set {
        WeightSet::Unconstrained => grad.amax(),
        WeightSet::Simplex => {
            let tol = 1e-10;
            let support: Vec<usize> = (0..w.len()).filter(|&i| w[i] > tol).collect();
            if support.is_empty() {
                return f64::INFINITY;
            }
            let lambda = support.iter().map(|&i| grad[i]).sum::<f64>() / support.len() as f64;
            let on = support.iter().map(|&i| (grad[i] - lambda).abs()).fold(0.0, f64::max);
            let off = (0..w.len())
                .filter(|&i| w[i] <= tol)
                .map(|i| (lambda - grad[i]).max(0.0))
                .fold(0.0, f64::max);
            on.max(off)
        }
        _ => {
            let l = 2.0 * linalg::max_eigenvalue_psd(gram).max(1e-300);
            let stepped: Vec<f64> = w.iter().zip(grad.iter()).map(|(a, g)| a - g / l).collect();
            match set.project(&stepped) {
                Ok(p) => l * p.iter().zip(w.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
                Err(_) => f64::INFINITY,
            }
        }
    }
}

/// `p_T' beta_hat`.
pub fn predict(fit: &FittedSC, p: &PredictorVector) -> Result<f64> {
    let pv = p.p();
    if pv.len() != fit.dim() {
        return Err(Error::Dimension(format!("predictor has length {}, fit has {}", pv.len(), fit.dim())));
    }
    Ok(pv.iter().zip(&fit.beta_hat).map(|(a, b)| a * b).sum())
}

/// `Y_1T(1) - p_T' beta_hat`.
pub fn treatment_effect(fit: &FittedSC, p: &PredictorVector) -> Result<f64> {
    let y1 = p
        .y1_observed
        .ok_or_else(|| Error::Usage("treatment effect needs the observed treated outcome".into()))?;
    Ok(y1 - predict(fit, p)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint_sets::ConstraintSpec;
    use approx::assert_abs_diff_eq;

    fn design(a: Vec<f64>, b: DMatrix<f64>, c: DMatrix<f64>, spec: ConstraintSpec) -> ScDesign {
        let t0 = a.len();
        let k = c.ncols();
        ScDesign::from_matrices(DVector::from_vec(a), b, c, t0, vec![k], Default::default(), spec).unwrap()
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn noiseless_recovery() {
        let t0 = 40;
        let b = DMatrix::from_column_slice(t0, 5, &pseudo_random(t0 * 5, 3));
        let w = DVector::from_vec(vec![0.3, 0.4, 0.3, 0.0, 0.0]);
        let a = (&b * &w).iter().cloned().collect();
        let f = fit(&design(a, b, DMatrix::zeros(t0, 0), ConstraintSpec::simplex())).unwrap();
        for (x, y) in f.weights().iter().zip(w.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-8);
        }
        assert!(f.objective <= 1e-12);
    }

    #[test]
    fn unconstrained_is_ols() {
        let t0 = 30;
        let b = DMatrix::from_column_slice(t0, 3, &pseudo_random(t0 * 3, 5));
        let c = DMatrix::from_element(t0, 1, 1.0);
        let a: Vec<f64> = pseudo_random(t0, 9);
        let f = fit(&design(a.clone(), b.clone(), c.clone(), ConstraintSpec::unconstrained())).unwrap();
        let mut z = DMatrix::zeros(t0, 4);
        z.columns_mut(0, 3).copy_from(&b);
        z.columns_mut(3, 1).copy_from(&c);
        let (ols, _) = linalg::least_squares(&z, &DVector::from_vec(a));
        for (x, y) in f.beta_hat.iter().zip(ols.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-8);
        }
    }

    #[test]
    fn predict_and_effect() {
        let t0 = 10;
        let b = DMatrix::from_column_slice(t0, 2, &pseudo_random(t0 * 2, 1));
        let a: Vec<f64> = b.column(0).iter().cloned().collect();
        let f = fit(&design(a, b, DMatrix::zeros(t0, 0), ConstraintSpec::simplex())).unwrap();
        let p = PredictorVector { x: vec![3.0, 1.0], g: vec![], period: 11, y1_observed: Some(5.0) };
        let yhat = predict(&f, &p).unwrap();
        assert_abs_diff_eq!(yhat, 3.0, epsilon = 1e-8);
        assert_abs_diff_eq!(treatment_effect(&f, &p).unwrap(), 2.0, epsilon = 1e-8);
        let p0 = PredictorVector { y1_observed: None, ..p };
        assert!(matches!(treatment_effect(&f, &p0), Err(Error::Usage(_))));
    }

    #[test]
    fn rank_deficient_controls_warn_and_proceed() {
        let t0 = 20;
        let b = DMatrix::from_column_slice(t0, 3, &pseudo_random(t0 * 3, 11));
        let c = DMatrix::from_element(t0, 2, 1.0);
        let a = pseudo_random(t0, 12);
        let f = fit(&design(a, b, c, ConstraintSpec::simplex())).unwrap();
        assert!(f.solver_report.rank_deficient_controls);
        assert_abs_diff_eq!(f.controls()[0], f.controls()[1], epsilon = 1e-10);
    }
}
