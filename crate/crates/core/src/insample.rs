//! In-sample uncertainty: the term `p'(beta0 - beta_hat)` is bounded by
//! simulating the optimization bounds with Gaussian `xi ~ N(0, Sigma_hat)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraint_sets::DeltaStarSpec;
use crate::error::{Error, Result};
use crate::linalg;
use crate::panel_io::{PredictorVector, Regime, ScDesign};
use crate::qclp::{QclpSolver, Sense, SolveStatus};
use crate::rng;
use crate::sc_fit::FittedSC;
use crate::stats;

/// Estimator of the variance of the scaled score `D^{-1} Z'U`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SigmaMethod {
    /// `D^{-1} Z' diag(u~^2) Z D^{-1}`.
    #[default]
    PluginDiag,
    /// `(1/T0) sum_t s_t s_t'` with per-period scores `s_t = sum_l z_{t,l} u~_{t,l}`.
    HcIid,
    /// Bartlett-weighted autocovariances of the scores; `None` picks
    /// `floor(4 (T0/100)^(2/9))`.
    LongRun { bandwidth: Option<usize> },
    /// `(1/T0) sum_t Zc_t u~_t u~_t' Zc_t'` with weight rows scaled by `T0^{-1/2}`.
    CointegrationPlugin,
}

impl fmt::Display for SigmaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SigmaMethod::PluginDiag => f.write_str("plugin_diag"),
            SigmaMethod::HcIid => f.write_str("hc_iid"),
            SigmaMethod::LongRun { bandwidth: None } => f.write_str("long_run"),
            SigmaMethod::LongRun { bandwidth: Some(b) } => write!(f, "long_run:{}", b),
            SigmaMethod::CointegrationPlugin => f.write_str("cointegration_plugin"),
        }
    }
}

impl FromStr for SigmaMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h.to_string(), Some(a.to_string())),
            None => (s.clone(), None),
        };
        match (head.as_str(), arg) {
            ("plugin_diag" | "plugin", None) => Ok(SigmaMethod::PluginDiag),
            ("hc_iid" | "hc", None) => Ok(SigmaMethod::HcIid),
            ("long_run" | "hac", None) => Ok(SigmaMethod::LongRun { bandwidth: None }),
            ("long_run" | "hac", Some(b)) => b
                .parse()
                .map(|b| SigmaMethod::LongRun { bandwidth: Some(b) })
                .map_err(|_| Error::Config(format!("bad long-run bandwidth '{}'", b))),
            ("cointegration_plugin" | "cointegration", None) => Ok(SigmaMethod::CointegrationPlugin),
            _ => Err(Error::Config(format!("unknown sigma method '{}'", s))),
        }
    }
}

/// Default Bartlett bandwidth `floor(4 (T0/100)^(2/9))`.
pub fn default_bandwidth(t0: usize) -> usize {
    (4.0 * (t0 as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaEstimate {
    #[serde(with = "linalg::serde_rows")]
    pub sigma: DMatrix<f64>,
    pub method: SigmaMethod,
    pub centered_residuals: Vec<f64>,
    /// Smallest eigenvalue before clipping.
    pub min_eigenvalue: f64,
    pub clipped: bool,
}

/// Fitted values of a least-squares regression of `residuals` on a
/// polynomial basis of `regressors`. Degree 0 gives the sample mean.
pub fn conditional_mean_residuals(residuals: &[f64], regressors: &DMatrix<f64>, degree: usize) -> Result<Vec<f64>> {
    if degree > 2 {
        return Err(Error::Usage(format!("mean degree must be 0, 1 or 2, got {}", degree)));
    }
    if residuals.len() != regressors.nrows() {
        return Err(Error::Dimension(format!(
            "{} residuals but {} regressor rows",
            residuals.len(),
            regressors.nrows()
        )));
    }
    if residuals.is_empty() {
        return Ok(Vec::new());
    }
    if degree == 0 || regressors.ncols() == 0 {
        return Ok(vec![stats::mean(residuals); residuals.len()]);
    }
    let basis = stats::polynomial_basis(regressors, degree);
    let y = DVector::from_column_slice(residuals);
    let (coef, dropped) = linalg::least_squares(&basis, &y);
    if !dropped.is_empty() {
        log::warn!("conditional mean: dropped {} collinear basis columns", dropped.len());
    }
    Ok((basis * coef).iter().copied().collect())
}

/// Residuals minus their conditional mean, equation by equation, using the
/// donor columns `selected` of each equation's block as regressors.
pub fn centered_residuals(design: &ScDesign, fit: &FittedSC, selected: &[usize], degree: usize) -> Result<Vec<f64>> {
    let t0 = design.t0;
    let mut out = Vec::with_capacity(fit.residuals.len());
    for l in 0..design.n_equations() {
        let rows = l * t0..(l + 1) * t0;
        let u = &fit.residuals[rows.clone()];
        let x = DMatrix::from_fn(t0, selected.len(), |t, k| design.b[(rows.start + t, selected[k])]);
        let m = conditional_mean_residuals(u, &x, degree)?;
        out.extend(u.iter().zip(&m).map(|(a, b)| a - b));
    }
    Ok(out)
}

pub fn estimate_sigma(design: &ScDesign, fit: &FittedSC, centered: &[f64], method: SigmaMethod) -> Result<SigmaEstimate> {
    let z = &design.z;
    let (n, d) = z.shape();
    let t0 = design.t0;
    if centered.len() != n {
        return Err(Error::Dimension(format!("{} centered residuals for {} design rows", centered.len(), n)));
    }
    if fit.scaling.len() != d {
        return Err(Error::Dimension("fit and design dimensions differ".into()));
    }
    if centered.iter().all(|u| *u == 0.0) {
        log::warn!("all centered residuals are zero; the simulated bounds are degenerate");
    }
    let scores = || -> DMatrix<f64> {
        let mut s = DMatrix::zeros(t0, d);
        for r in 0..n {
            let t = r % t0;
            for j in 0..d {
                s[(t, j)] += z[(r, j)] * centered[r];
            }
        }
        s
    };
    let mut sigma = match method {
        SigmaMethod::PluginDiag => {
            let mut zu = z.clone();
            for r in 0..n {
                zu.row_mut(r).scale_mut(centered[r]);
            }
            let mut m = zu.transpose() * zu;
            for i in 0..d {
                for j in 0..d {
                    m[(i, j)] /= fit.scaling[i] * fit.scaling[j];
                }
            }
            m
        }
        SigmaMethod::HcIid => {
            let s = scores();
            s.transpose() * s / t0 as f64
        }
        SigmaMethod::LongRun { bandwidth } => {
            let s = scores();
            let bw = bandwidth.unwrap_or_else(|| default_bandwidth(t0)).min(t0.saturating_sub(1));
            let mut m = s.transpose() * &s;
            for h in 1..=bw {
                let weight = 1.0 - h as f64 / (bw as f64 + 1.0);
                let lead = s.rows(h, t0 - h);
                let lag = s.rows(0, t0 - h);
                let gamma = lead.transpose() * lag;
                m += (&gamma + gamma.transpose()) * weight;
            }
            m / t0 as f64
        }
        SigmaMethod::CointegrationPlugin => {
            let mut s = scores();
            let root = (t0 as f64).sqrt();
            for j in 0..fit.n_weights {
                s.column_mut(j).unscale_mut(root);
            }
            s.transpose() * s / t0 as f64
        }
    };
    linalg::symmetrize(&mut sigma);
    let scale = sigma.diagonal().iter().cloned().fold(0.0, f64::max).max(1e-300);
    let repair = linalg::psd_clip(&sigma, 1e-10 * scale);
    if repair.clipped {
        log::warn!("sigma estimate had eigenvalue {:e}; clipped to PSD", repair.min_eigenvalue);
    }
    Ok(SigmaEstimate {
        sigma: repair.matrix,
        method,
        centered_residuals: centered.to_vec(),
        min_eigenvalue: repair.min_eigenvalue,
        clipped: repair.clipped,
    })
}

/// Threshold `sd(u) (log T0)^c / (min_j sd(b_j) sqrt(T0))` with `c = 1`
/// under cointegration and `1/2` otherwise.
pub fn rho_rule(residuals: &[f64], donors: &DMatrix<f64>, t0: usize, regime: Regime) -> Result<f64> {
    if t0 < 2 {
        return Err(Error::Input(format!("need at least 2 pre-treatment periods, got {}", t0)));
    }
    let sd_u = stats::sample_sd(residuals);
    let mut min_sd = f64::INFINITY;
    for j in 0..donors.ncols() {
        let col: Vec<f64> = donors.column(j).iter().copied().collect();
        let sd = stats::sample_sd(&col);
        if sd > 0.0 {
            min_sd = min_sd.min(sd);
        } else {
            log::warn!("donor column {} has zero variance; excluded from the threshold rule", j);
        }
    }
    if !min_sd.is_finite() {
        return Err(Error::Input("every donor column has zero variance".into()));
    }
    let c = if regime == Regime::Cointegration { 1.0 } else { 0.5 };
    let t = t0 as f64;
    Ok(sd_u * t.ln().powf(c) / (min_sd * t.sqrt()))
}

/// Empirical quantiles of the simulated inf and sup at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimQuantile {
    pub level: f64,
    pub inf: f64,
    pub sup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InSampleResult {
    #[serde(rename = "M1_L")]
    pub m1_l: f64,
    #[serde(rename = "M1_U")]
    pub m1_u: f64,
    pub alpha1: f64,
    pub draws: usize,
    pub dropped: usize,
    pub sim_quantiles: Vec<SimQuantile>,
    pub rho: f64,
    pub seed: u64,
    /// Simulated infima of the kept draws, in draw order.
    #[serde(skip)]
    pub inf_draws: Vec<f64>,
    /// Simulated suprema of the kept draws, in draw order.
    #[serde(skip)]
    pub sup_draws: Vec<f64>,
}

const STORED_LEVELS: [f64; 9] = [0.005, 0.025, 0.05, 0.1, 0.5, 0.9, 0.95, 0.975, 0.995];

impl InSampleResult {
    fn from_draws(inf: Vec<f64>, sup: Vec<f64>, alpha1: f64, draws: usize, rho: f64, seed: u64) -> Self {
        let dropped = draws - inf.len();
        let (inf_sorted, sup_sorted) = (sorted(&inf), sorted(&sup));
        let sim_quantiles = STORED_LEVELS
            .iter()
            .map(|&level| SimQuantile {
                level,
                inf: stats::quantile_sorted(&inf_sorted, level),
                sup: stats::quantile_sorted(&sup_sorted, level),
            })
            .collect();
        let mut out = Self {
            m1_l: 0.0,
            m1_u: 0.0,
            alpha1,
            draws,
            dropped,
            sim_quantiles,
            rho,
            seed,
            inf_draws: inf,
            sup_draws: sup,
        };
        (out.m1_l, out.m1_u) = out.bounds_at(alpha1);
        out
    }

    /// `(M1_L, M1_U)` at another level from the same draws.
    pub fn bounds_at(&self, alpha1: f64) -> (f64, f64) {
        let upper = -stats::quantile_sorted(&sorted(&self.inf_draws), alpha1 / 2.0);
        let lower = -stats::quantile_sorted(&sorted(&self.sup_draws), 1.0 - alpha1 / 2.0);
        (lower, upper)
    }
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

fn check_level(alpha1: f64, draws: usize) -> Result<()> {
    if !(alpha1 > 0.0 && alpha1 < 0.5) {
        return Err(Error::Usage(format!("alpha1 must lie in (0, 0.5), got {}", alpha1)));
    }
    if draws < 100 {
        return Err(Error::Usage(format!("at least 100 draws are required, got {}", draws)));
    }
    Ok(())
}

/// Simulated in-sample bounds for one predictor.
pub fn simulate_bounds(
    fit: &FittedSC,
    sigma: &SigmaEstimate,
    delta_star: &DeltaStarSpec,
    p: &PredictorVector,
    alpha1: f64,
    draws: usize,
    seed: u64,
) -> Result<InSampleResult> {
    let mut out = simulate_bounds_many(fit, sigma, delta_star, std::slice::from_ref(p), alpha1, draws, seed)?;
    Ok(out.remove(0))
}

/// Simulated in-sample bounds for several predictors sharing the same draws.
pub fn simulate_bounds_many(
    fit: &FittedSC,
    sigma: &SigmaEstimate,
    delta_star: &DeltaStarSpec,
    ps: &[PredictorVector],
    alpha1: f64,
    draws: usize,
    seed: u64,
) -> Result<Vec<InSampleResult>> {
    check_level(alpha1, draws)?;
    let d = fit.dim();
    if sigma.sigma.nrows() != d || delta_star.dim() != d {
        return Err(Error::Dimension(format!(
            "sigma is {}x{}, relaxed set has dimension {}, fit has {}",
            sigma.sigma.nrows(),
            sigma.sigma.ncols(),
            delta_star.dim(),
            d
        )));
    }
    let mut objectives = Vec::with_capacity(ps.len());
    for p in ps {
        let pv = p.p();
        if pv.len() != d {
            return Err(Error::Dimension(format!("predictor has length {}, expected {}", pv.len(), d)));
        }
        objectives.push(pv.iter().zip(&delta_star.scaling).map(|(a, s)| a / s).collect::<Vec<f64>>());
    }
    let solver = QclpSolver::new(&fit.q_hat, &delta_star.region(), None)?;
    if !solver.is_compact() {
        log::warn!("the simulated region is unbounded; in-sample bounds are infinite");
    }
    let root = linalg::psd_sqrt(&sigma.sigma);
    let per_draw: Vec<Vec<Option<(f64, f64)>>> = (0..draws)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(seed, b as u64);
            let normals = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let xi = &root * normals;
            let xi = xi.as_slice();
            let center = solver.center(xi);
            objectives
                .iter()
                .map(|c| {
                    let lo = solver.solve_from(&center, c, xi, Sense::Inf, 1e-9);
                    let hi = solver.solve_from(&center, c, xi, Sense::Sup, 1e-9);
                    let ok = |s: &crate::qclp::ConicSolution| match s.status {
                        SolveStatus::Optimal => s.value.is_finite(),
                        SolveStatus::UnboundedFlagged => true,
                        SolveStatus::MaxIter => false,
                    };
                    (ok(&lo) && ok(&hi)).then_some((lo.value, hi.value))
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(ps.len());
    for k in 0..ps.len() {
        let (inf, sup): (Vec<f64>, Vec<f64>) = per_draw.iter().filter_map(|v| v[k]).unzip();
        let dropped = draws - inf.len();
        if dropped * 100 > draws {
            return Err(Error::Simulation(format!(
                "{} of {} simulation draws failed to solve (limit 1%)",
                dropped, draws
            )));
        }
        if dropped > 0 {
            log::warn!("dropped {} of {} simulation draws", dropped, draws);
        }
        out.push(InSampleResult::from_draws(inf, sup, alpha1, draws, delta_star.rho, seed));
    }
    Ok(out)
}

/// How the relaxation threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoPolicy {
    Auto,
    Value(f64),
}

impl FromStr for RhoPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("auto") {
            return Ok(RhoPolicy::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v >= 0.0 => Ok(RhoPolicy::Value(v)),
            _ => Err(Error::Config(format!("rho must be 'auto' or a nonnegative number, got '{}'", s))),
        }
    }
}

impl fmt::Display for RhoPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RhoPolicy::Auto => f.write_str("auto"),
            RhoPolicy::Value(v) => write!(f, "{}", v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InSampleOptions {
    pub sigma_method: SigmaMethod,
    pub mean_degree: usize,
    pub rho: RhoPolicy,
    pub alpha1: f64,
    pub draws: usize,
    pub seed: u64,
}

impl Default for InSampleOptions {
    fn default() -> Self {
        Self { sigma_method: SigmaMethod::PluginDiag, mean_degree: 1, rho: RhoPolicy::Auto, alpha1: 0.05, draws: 1000, seed: 0 }
    }
}

/// Everything the simulation needs besides the predictor.
#[derive(Debug, Clone)]
pub struct InSamplePlan {
    pub delta_star: DeltaStarSpec,
    pub sigma: SigmaEstimate,
    /// Donors with nonzero thresholded weight.
    pub selected: Vec<usize>,
}

/// Threshold, relaxed set, residual centering and variance estimate.
pub fn prepare(design: &ScDesign, fit: &FittedSC, opts: &InSampleOptions) -> Result<InSamplePlan> {
    let rho = match opts.rho {
        RhoPolicy::Auto => rho_rule(&fit.residuals, &design.b, design.t0, design.regime)?,
        RhoPolicy::Value(v) => v,
    };
    let delta_star = DeltaStarSpec::new(design.constraint.clone(), &fit.beta_hat, fit.n_weights, rho, &fit.scaling)?;
    let selected: Vec<usize> = (0..fit.n_weights).filter(|&j| delta_star.beta_star[j] != 0.0).collect();
    let centered = centered_residuals(design, fit, &selected, opts.mean_degree)?;
    let sigma = estimate_sigma(design, fit, &centered, opts.sigma_method)?;
    Ok(InSamplePlan { delta_star, sigma, selected })
}

/// Full in-sample step for several predictors.
pub fn run(design: &ScDesign, fit: &FittedSC, ps: &[PredictorVector], opts: &InSampleOptions) -> Result<(InSamplePlan, Vec<InSampleResult>)> {
    let plan = prepare(design, fit, opts)?;
    let results = simulate_bounds_many(fit, &plan.sigma, &plan.delta_star, ps, opts.alpha1, opts.draws, opts.seed)?;
    Ok((plan, results))
}
