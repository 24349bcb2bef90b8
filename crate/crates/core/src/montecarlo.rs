//! Simulation designs and a coverage harness for the prediction intervals.
//!
//! Donors follow independent AR(1) recursions `b_jt = rho b_j(t-1) + v_jt`
//! with standard normal innovations and the treated unit is
//! `a_t = b_t'w + u_t`. Coverage is measured at several evaluation points
//! obtained by shifting the first donor in the post-treatment period.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::constraint_sets::ConstraintSpec;
use crate::error::{Error, Result};
use crate::insample::{self, InSampleOptions, RhoPolicy, SigmaMethod};
use crate::intervals::{self, UncertaintyBounds};
use crate::outsample::{self, Approach, ErrorData, OutSampleOptions};
use crate::panel_io::{PanelDataset, PredictorVector, Regime, ScDesign};
use crate::rng;
use crate::sc_fit;
use crate::stats;

const BURN_IN: usize = 100;
const DESIGN_TAG: u64 = 0xD5;
const REP_TAG: u64 = 0x5E;
const SIM_TAG: u64 = 0x51;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Donor paths drawn once; only the treated errors vary across reps.
    FixedDesign,
    /// Everything redrawn each rep.
    Redrawn,
}

impl FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fixed" | "fixed_design" => Ok(Conditioning::FixedDesign),
            "redrawn" | "unconditional" => Ok(Conditioning::Redrawn),
            other => Err(Error::Config(format!("unknown mode '{}'", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DGPSpec {
    pub rho: f64,
    pub t0: usize,
    pub t1: usize,
    pub n: usize,
    pub w_true: Vec<f64>,
    pub sigma_u2: f64,
    pub misspecified: bool,
    pub eval_shifts: Vec<f64>,
    pub conditioning: Conditioning,
}

impl Default for DGPSpec {
    fn default() -> Self {
        let mut w_true = vec![0.0; 10];
        w_true[..3].copy_from_slice(&[0.3, 0.4, 0.3]);
        Self {
            rho: 0.0,
            t0: 100,
            t1: 1,
            n: 10,
            w_true,
            sigma_u2: 0.5,
            misspecified: false,
            eval_shifts: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            conditioning: Conditioning::FixedDesign,
        }
    }
}

impl DGPSpec {
    pub fn with_rho(rho: f64) -> Self {
        Self { rho, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if self.t0 < 2 || self.t1 < 1 || self.n < 1 {
            return Err(Error::Config("need T0 >= 2, T1 >= 1 and N >= 1".into()));
        }
        if self.w_true.len() != self.n {
            return Err(Error::Config(format!("w has length {}, N = {}", self.w_true.len(), self.n)));
        }
        if !ConstraintSpec::simplex().contains(&self.w_true, &[], 1e-9) {
            return Err(Error::Config("w must lie on the simplex".into()));
        }
        if !(self.sigma_u2 > 0.0) {
            return Err(Error::Config("error variance must be positive".into()));
        }
        if self.eval_shifts.is_empty() {
            return Err(Error::Config("at least one evaluation shift is required".into()));
        }
        Ok(())
    }

    /// Scaling regime matching the donor process.
    pub fn regime(&self) -> Regime {
        if self.rho >= 1.0 {
            Regime::Cointegration
        } else if self.rho > 0.0 {
            Regime::WeaklyDependent
        } else {
            Regime::Iid
        }
    }

    fn periods(&self) -> usize {
        self.t0 + self.t1
    }
}

/// Donor paths, `(T0 + T1) x N`.
pub fn draw_donors(spec: &DGPSpec, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let t = spec.periods();
    let burn = if spec.rho > 0.0 && spec.rho < 1.0 { BURN_IN } else { 0 };
    let mut out = DMatrix::zeros(t, spec.n);
    for j in 0..spec.n {
        let mut prev = 0.0;
        for s in 0..burn + t {
            let v: f64 = rng.sample(StandardNormal);
            prev = spec.rho * prev + v;
            if s >= burn {
                out[(s - burn, j)] = prev;
            }
        }
    }
    out
}

/// Conditional mean of the treated error given the donors at period `t`
/// (nonzero only under misspecification).
fn error_mean(spec: &DGPSpec, b1_now: f64, b1_prev: f64) -> f64 {
    if !spec.misspecified {
        0.0
    } else if spec.rho >= 1.0 {
        0.9 * (b1_now - b1_prev)
    } else {
        0.2 * b1_now
    }
}

fn error_sd(spec: &DGPSpec) -> f64 {
    spec.sigma_u2.sqrt()
}

/// One evaluation point in the first post-treatment period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub shift: f64,
    pub x_t: Vec<f64>,
    /// Conditional mean of `Y_1T(0) - x_T'w` given the donors.
    pub error_mean: f64,
    /// Realized `Y_1T(0)`.
    pub y0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub w_true: Vec<f64>,
    /// Treated errors in every period (unshifted).
    pub u: Vec<f64>,
    /// No treatment is applied, so the effect is zero.
    pub tau_t: f64,
    /// Best simplex-constrained predictor given the donors.
    pub beta0: Vec<f64>,
    pub eval_points: Vec<EvalPoint>,
}

/// Treated outcomes and evaluation points for given donors.
fn draw_treated(spec: &DGPSpec, donors: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<EvalPoint>) {
    let t = spec.periods();
    let w = DVector::from_column_slice(&spec.w_true);
    let sd = error_sd(spec);
    let zeta: Vec<f64> = (0..t).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let b1 = |s: usize| donors[(s, 0)];
    let b1_prev = |s: usize| if s == 0 { 0.0 } else { donors[(s - 1, 0)] };
    let u: Vec<f64> = (0..t).map(|s| error_mean(spec, b1(s), b1_prev(s)) + zeta[s]).collect();
    let a: Vec<f64> = (0..t).map(|s| donors.row(s).dot(&w.transpose()) + u[s]).collect();
    let pre_b1: Vec<f64> = (0..spec.t0).map(b1).collect();
    let sd_b1 = stats::sample_sd(&pre_b1);
    let tt = spec.t0;
    let eval_points = spec
        .eval_shifts
        .iter()
        .map(|&c| {
            let mut x_t: Vec<f64> = donors.row(tt).iter().copied().collect();
            x_t[0] += c * sd_b1;
            let m = error_mean(spec, x_t[0], b1_prev(tt));
            let y0 = x_t.iter().zip(&spec.w_true).map(|(x, w)| x * w).sum::<f64>() + m + zeta[tt];
            EvalPoint { shift: c, x_t, error_mean: m, y0 }
        })
        .collect();
    (a, u, eval_points)
}

/// Simplex projection of the conditional best linear predictor.
fn pseudo_true(spec: &DGPSpec, donors: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !spec.misspecified {
        return Ok(spec.w_true.clone());
    }
    let t0 = spec.t0;
    let b = donors.rows(0, t0).into_owned();
    let w = DVector::from_column_slice(&spec.w_true);
    let mean = DVector::from_fn(t0, |s, _| {
        let prev = if s == 0 { 0.0 } else { donors[(s - 1, 0)] };
        error_mean(spec, donors[(s, 0)], prev)
    });
    let a = &b * w + mean;
    let design = ScDesign::from_matrices(a, b, DMatrix::zeros(t0, 0), t0, vec![0], spec.regime(), ConstraintSpec::simplex())?;
    Ok(sc_fit::fit(&design)?.beta_hat)
}

/// One simulated panel (single feature `y`, treated unit first) and the
/// quantities needed to score intervals.
pub fn generate(spec: &DGPSpec, seed: u64) -> Result<(PanelDataset, Truth)> {
    spec.validate()?;
    let mut rng = rng::stream(seed, 0);
    let donors = draw_donors(spec, &mut rng);
    let (a, u, eval_points) = draw_treated(spec, &donors, &mut rng);
    let panel = to_panel(spec, &donors, &a)?;
    let beta0 = pseudo_true(spec, &donors)?;
    Ok((panel, Truth { w_true: spec.w_true.clone(), u, tau_t: 0.0, beta0, eval_points }))
}

fn to_panel(spec: &DGPSpec, donors: &DMatrix<f64>, a: &[f64]) -> Result<PanelDataset> {
    let t = spec.periods();
    let mut units = vec!["treated".to_string()];
    units.extend((1..=spec.n).map(|j| format!("donor{}", j)));
    let mut values = Vec::with_capacity((spec.n + 1) * t);
    values.extend_from_slice(a);
    for j in 0..spec.n {
        values.extend(donors.column(j).iter());
    }
    PanelDataset::new(units, (1..=t as i64).collect(), vec!["y".into()], values, spec.t0)
}

/// Interval construction compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Simulated in-sample bounds with the subgaussian out-of-sample bound.
    M1,
    /// As `M1` with the conditional sd doubled.
    M1S,
    /// Location-scale out-of-sample bound.
    M2,
    /// Quantile-regression out-of-sample bound.
    M3,
    /// True weights and the true conditional error quantiles.
    Oracle,
    /// `(-inf, inf)`; checks the harness itself.
    Infinite,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::M1 => "M1",
            Method::M1S => "M1-S",
            Method::M2 => "M2",
            Method::M3 => "M3",
            Method::Oracle => "oracle",
            Method::Infinite => "infinite",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "M1" => Ok(Method::M1),
            "M1-S" | "M1S" => Ok(Method::M1S),
            "M2" => Ok(Method::M2),
            "M3" => Ok(Method::M3),
            "ORACLE" => Ok(Method::Oracle),
            "INFINITE" | "INF" => Ok(Method::Infinite),
            other => Err(Error::Config(format!("unknown method '{}'", other))),
        }
    }
}

impl Method {
    fn needs_fit(&self) -> bool {
        !matches!(self, Method::Oracle | Method::Infinite)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageOptions {
    pub alpha1: f64,
    pub alpha2: f64,
    pub draws: usize,
    /// Degree of the residual mean and variance regressions.
    pub mean_degree: usize,
    pub sigma_method: SigmaMethod,
    pub rho: RhoPolicy,
    /// Worker count; `None` uses the global pool.
    pub parallelism: Option<usize>,
}

impl Default for CoverageOptions {
    fn default() -> Self {
        Self {
            alpha1: 0.05,
            alpha2: 0.05,
            draws: 1000,
            mean_degree: 1,
            sigma_method: SigmaMethod::PluginDiag,
            rho: RhoPolicy::Auto,
            parallelism: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub method: String,
    pub shift: f64,
    #[serde(rename = "CP")]
    pub cp: f64,
    #[serde(rename = "AL")]
    pub al: f64,
    pub reps: usize,
    pub mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTable {
    pub rows: Vec<CoverageRow>,
    pub failures: usize,
    /// Fingerprint of the donor paths in fixed-design mode.
    pub design_hash: Option<u64>,
}

impl CoverageTable {
    pub fn row(&self, method: Method, shift: f64) -> Option<&CoverageRow> {
        let name = method.to_string();
        self.rows.iter().find(|r| r.method == name && r.shift == shift)
    }

    /// Hits and reps of one method pooled over all shifts.
    pub fn pooled(&self, method: Method) -> (usize, usize) {
        let name = method.to_string();
        self.rows
            .iter()
            .filter(|r| r.method == name)
            .fold((0, 0), |(h, n), r| (h + (r.cp * r.reps as f64).round() as usize, n + r.reps))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,shift,CP,AL,reps,mc_se\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6},{:.6},{},{:.6}\n", r.method, r.shift, r.cp, r.al, r.reps, r.mc_se));
        }
        out
    }
}

/// Fingerprint of a matrix's bit pattern.
pub fn matrix_hash(m: &DMatrix<f64>) -> u64 {
    m.iter().fold(0x243F_6A88_85A3_08D3, |h, v| rng::splitmix64(h ^ v.to_bits()))
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    hits: usize,
    length: f64,
    infinite: bool,
}

/// Intervals for one replication, one entry per `(method, shift)`.
fn replicate(
    spec: &DGPSpec,
    donors: &DMatrix<f64>,
    methods: &[Method],
    opts: &CoverageOptions,
    rep: usize,
    base_seed: u64,
) -> Result<Vec<(f64, f64, f64)>> {
    let mut rng = rng::stream(rng::derive_seed(base_seed, REP_TAG), rep as u64);
    let (a, _, points) = draw_treated(spec, donors, &mut rng);
    let t0 = spec.t0;
    let mut out = Vec::with_capacity(methods.len() * points.len());
    let fitted = if methods.iter().any(Method::needs_fit) {
        let b = donors.rows(0, t0).into_owned();
        let design = ScDesign::from_matrices(
            DVector::from_column_slice(&a[..t0]),
            b.clone(),
            DMatrix::zeros(t0, 0),
            t0,
            vec![0],
            spec.regime(),
            ConstraintSpec::simplex(),
        )?;
        let fit = sc_fit::fit(&design)?;
        let in_opts = InSampleOptions {
            sigma_method: opts.sigma_method,
            mean_degree: opts.mean_degree,
            rho: opts.rho,
            alpha1: opts.alpha1,
            draws: opts.draws,
            seed: rng::derive_seed(rng::derive_seed(base_seed, SIM_TAG), rep as u64),
        };
        let ps: Vec<PredictorVector> =
            points.iter().map(|p| PredictorVector { x: p.x_t.clone(), g: vec![], period: t0 as i64 + 1, y1_observed: None }).collect();
        let (plan, m1) = insample::run(&design, &fit, &ps, &in_opts)?;
        Some((fit, plan, m1, b))
    } else {
        None
    };
    let sd = error_sd(spec);
    let z = Normal::new(0.0, 1.0).map_err(|e| Error::Simulation(e.to_string()))?;
    let alpha = opts.alpha1 + opts.alpha2;
    for &method in methods {
        for (k, point) in points.iter().enumerate() {
            let (lo, hi) = match (method, &fitted) {
                (Method::Infinite, _) => (f64::NEG_INFINITY, f64::INFINITY),
                (Method::Oracle, _) => {
                    let centre = point.x_t.iter().zip(&spec.w_true).map(|(x, w)| x * w).sum::<f64>() + point.error_mean;
                    (centre + sd * z.inverse_cdf(alpha / 2.0), centre + sd * z.inverse_cdf(1.0 - alpha / 2.0))
                }
                (_, Some((fit, plan, m1, b))) => {
                    let sel = &plan.selected;
                    let x = DMatrix::from_fn(t0, sel.len(), |t, j| b[(t, sel[j])]);
                    let x_t: Vec<f64> = sel.iter().map(|&j| point.x_t[j]).collect();
                    let data = ErrorData { e: &fit.residuals, x: &x, x_t: &x_t, labels: &[] };
                    let (approach, factor) = match method {
                        Method::M1 => (Approach::Subgaussian, 1.0),
                        Method::M1S => (Approach::Subgaussian, 2.0),
                        Method::M2 => (Approach::LocationScale, 1.0),
                        _ => (Approach::QuantileReg, 1.0),
                    };
                    let out_opts = OutSampleOptions { degree: opts.mean_degree, bias_correct: true, sd_factor: factor };
                    let m2 = outsample::bound(approach, &data, opts.alpha2, &out_opts)?;
                    let y_hat = point.x_t.iter().zip(fit.weights()).map(|(x, w)| x * w).sum::<f64>();
                    let pi = intervals::assemble_counterfactual(
                        y_hat,
                        &UncertaintyBounds::from(&m1[k]),
                        &UncertaintyBounds::from(&m2),
                    )?;
                    (pi.lower, pi.upper)
                }
                (_, None) => unreachable!("fitted methods always have a fit"),
            };
            out.push((lo, hi, point.y0));
        }
    }
    Ok(out)
}

/// Coverage probability and average length of each method at each shift.
pub fn run_coverage(spec: &DGPSpec, methods: &[Method], reps: usize, base_seed: u64, opts: &CoverageOptions) -> Result<CoverageTable> {
    spec.validate()?;
    if reps < 100 {
        return Err(Error::Usage(format!("at least 100 replications are required, got {}", reps)));
    }
    if methods.is_empty() {
        return Err(Error::Usage("no methods requested".into()));
    }
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    let fixed = match spec.conditioning {
        Conditioning::FixedDesign => Some(draw_donors(spec, &mut rng::stream(rng::derive_seed(base_seed, DESIGN_TAG), 0))),
        Conditioning::Redrawn => None,
    };
    let design_hash = fixed.as_ref().map(matrix_hash);
    let work = || -> Vec<(Result<Vec<(f64, f64, f64)>>, u64)> {
        (0..reps)
            .into_par_iter()
            .map(|rep| {
                let donors = match &fixed {
                    Some(d) => d.clone(),
                    None => draw_donors(spec, &mut rng::stream(rng::derive_seed(base_seed, DESIGN_TAG), rep as u64 + 1)),
                };
                let hash = matrix_hash(&donors);
                (replicate(spec, &donors, &methods, opts, rep, base_seed), hash)
            })
            .collect()
    };
    let results = match opts.parallelism {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Simulation(e.to_string()))?
            .install(work),
        None => work(),
    };
    let cells = methods.len() * spec.eval_shifts.len();
    let mut tallies = vec![Tally::default(); cells];
    let mut failures = Vec::new();
    let mut ok_reps = 0;
    for (rep, (res, hash)) in results.into_iter().enumerate() {
        if let Some(h) = design_hash {
            if h != hash {
                return Err(Error::Simulation(format!("donor paths changed in replication {}", rep)));
            }
        }
        match res {
            Ok(v) => {
                ok_reps += 1;
                for (cell, (lo, hi, y)) in v.into_iter().enumerate() {
                    let t = &mut tallies[cell];
                    t.hits += (lo <= y && y <= hi) as usize;
                    if (hi - lo).is_finite() {
                        t.length += hi - lo;
                    } else {
                        t.infinite = true;
                    }
                }
            }
            Err(e) => failures.push((rep, e)),
        }
    }
    if failures.len() * 100 > reps {
        let detail: Vec<String> = failures.iter().take(5).map(|(r, e)| format!("rep {}: {}", r, e)).collect();
        return Err(Error::Simulation(format!(
            "{} of {} replications failed (limit 1%); first: {}",
            failures.len(),
            reps,
            detail.join("; ")
        )));
    }
    for (rep, e) in &failures {
        log::warn!("replication {} failed: {}", rep, e);
    }
    let mut rows = Vec::with_capacity(cells);
    for (mi, m) in methods.iter().enumerate() {
        for (si, &shift) in spec.eval_shifts.iter().enumerate() {
            let t = tallies[mi * spec.eval_shifts.len() + si];
            let cp = t.hits as f64 / ok_reps as f64;
            rows.push(CoverageRow {
                method: m.to_string(),
                shift,
                cp,
                al: if t.infinite { f64::INFINITY } else { t.length / ok_reps as f64 },
                reps: ok_reps,
                mc_se: (cp * (1.0 - cp) / ok_reps as f64).sqrt(),
            });
        }
    }
    Ok(CoverageTable { rows, failures: failures.len(), design_hash })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn donors_have_ar1_autocorrelation() {
        let spec = DGPSpec { t0: 20_000, ..DGPSpec::with_rho(0.5) };
        let d = draw_donors(&spec, &mut rng::stream(3, 0));
        let col: Vec<f64> = d.column(2).iter().copied().collect();
        let r = corr(&col[1..], &col[..col.len() - 1]);
        assert!((r - 0.5).abs() < 0.03, "lag-1 correlation {}", r);
        let var = stats::sample_sd(&col).powi(2);
        assert!((var - 1.0 / 0.75).abs() < 0.06, "variance {}", var);
    }

    #[test]
    fn random_walk_starts_at_zero() {
        let spec = DGPSpec::with_rho(1.0);
        let d = draw_donors(&spec, &mut rng::stream(4, 0));
        let mut r = rng::stream(4, 0);
        for j in 0..spec.n {
            let first: f64 = r.sample(StandardNormal);
            assert_eq!(d[(0, j)], first);
            for _ in 1..spec.periods() {
                let _: f64 = r.sample(StandardNormal);
            }
        }
    }

    #[test]
    fn generated_panel_matches_truth() {
        let spec = DGPSpec::with_rho(0.5);
        let (panel, truth) = generate(&spec, 11).unwrap();
        assert_eq!(panel.unit_ids().len(), spec.n + 1);
        assert_eq!(truth.u.len(), spec.periods());
        assert_eq!(truth.eval_points.len(), 5);
        let zero = &truth.eval_points[2];
        assert_eq!(zero.shift, 0.0);
        assert_eq!(truth.beta0, spec.w_true);
        let (_, again) = generate(&spec, 11).unwrap();
        assert_eq!(truth, again);
    }

    #[test]
    fn misspecified_error_tracks_first_donor() {
        let spec = DGPSpec { t0: 20_000, misspecified: true, ..DGPSpec::with_rho(0.0) };
        let (_, truth) = generate(&spec, 5).unwrap();
        let mut r = rng::stream(5, 0);
        let d = draw_donors(&spec, &mut r);
        let b1: Vec<f64> = d.column(0).iter().copied().collect();
        // cov(u, b1) = 0.2 var(b1) = 0.2, sd(u) = sqrt(0.04 + 0.5)
        let r = corr(&truth.u, &b1);
        assert!((r - 0.2 / 0.54f64.sqrt()).abs() < 0.03, "corr {}", r);
        let s: f64 = truth.beta0.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(truth.beta0[0] > spec.w_true[0]);
    }

    #[test]
    fn validation_rejects_bad_specs() {
        assert!(DGPSpec::with_rho(1.5).validate().is_err());
        let spec = DGPSpec { w_true: vec![0.5; 10], ..DGPSpec::default() };
        assert!(spec.validate().is_err());
        let spec = DGPSpec { eval_shifts: vec![], ..DGPSpec::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn infinite_intervals_always_cover() {
        let spec = DGPSpec::default();
        let t = run_coverage(&spec, &[Method::Infinite], 100, 1, &CoverageOptions::default()).unwrap();
        assert_eq!(t.rows.len(), 5);
        for r in &t.rows {
            assert_eq!(r.cp, 1.0);
            assert!(r.al.is_infinite());
            assert_eq!(r.mc_se, 0.0);
        }
        assert!(t.design_hash.is_some());
        assert!(t.to_csv().contains("infinite,0,1.000000,inf,100,0.000000"));
    }

    #[test]
    fn oracle_covers_near_nominal() {
        let spec = DGPSpec { misspecified: true, ..DGPSpec::with_rho(0.5) };
        let t = run_coverage(&spec, &[Method::Oracle], 2000, 2, &CoverageOptions::default()).unwrap();
        let (hits, n) = t.pooled(Method::Oracle);
        let cp = hits as f64 / n as f64;
        assert!((cp - 0.9).abs() < 0.02, "oracle coverage {}", cp);
    }

    #[test]
    fn too_few_reps_is_a_usage_error() {
        let e = run_coverage(&DGPSpec::default(), &[Method::Oracle], 10, 0, &CoverageOptions::default());
        assert!(matches!(e, Err(Error::Usage(_))));
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::M1, Method::M1S, Method::M2, Method::M3, Method::Oracle, Method::Infinite] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
    }
}
