//! Out-of-sample uncertainty: bounds `(M2_L, M2_U)` on the post-treatment
//! error `e_T` given the conditioning information.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::stats;

/// `-E[log chi^2_1]`, added back when exponentiating a log-square regression.
pub const LOG_CHI2_BIAS: f64 = 1.2704;

/// Model for the distribution of `e_T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Approach {
    /// Gaussian tail bound with the estimated conditional sd.
    Subgaussian,
    /// Markov bound on the `k`th central moment.
    Polynomial(u32),
    /// Empirical quantiles of standardized residuals.
    LocationScale,
    /// Linear quantile regression.
    QuantileReg,
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Approach::Subgaussian => f.write_str("subg"),
            Approach::Polynomial(k) => write!(f, "poly:{}", k),
            Approach::LocationScale => f.write_str("locscale"),
            Approach::QuantileReg => f.write_str("qreg"),
        }
    }
}

impl FromStr for Approach {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "subg" | "subgaussian" | "gaussian" => return Ok(Approach::Subgaussian),
            "locscale" | "location_scale" | "ls" => return Ok(Approach::LocationScale),
            "qreg" | "quantile_reg" | "qr" => return Ok(Approach::QuantileReg),
            _ => {}
        }
        if let Some(k) = s.strip_prefix("poly:").or_else(|| s.strip_prefix("polynomial:")) {
            return match k.parse::<u32>() {
                Ok(k) if k >= 2 => Ok(Approach::Polynomial(k)),
                _ => Err(Error::Config(format!("polynomial order must be an integer >= 2, got '{}'", k))),
            };
        }
        Err(Error::Config(format!("unknown approach '{}'", s)))
    }
}

impl From<Approach> for String {
    fn from(a: Approach) -> String {
        a.to_string()
    }
}

impl TryFrom<String> for Approach {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub n: usize,
    pub basis_size: usize,
    pub dropped_columns: usize,
    /// Observations whose predicted variance hit the floor.
    pub floored: usize,
    pub crossed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutSampleResult {
    #[serde(rename = "M2_L")]
    pub m2_l: f64,
    #[serde(rename = "M2_U")]
    pub m2_u: f64,
    pub alpha2: f64,
    pub approach: Approach,
    pub conditional_mean: Option<f64>,
    pub conditional_sd: Option<f64>,
    pub model_report: Option<ModelReport>,
}

impl OutSampleResult {
    /// `M2 = (0, 0)`, used when no out-of-sample allowance is requested.
    pub fn zero(approach: Approach) -> Self {
        Self { m2_l: 0.0, m2_u: 0.0, alpha2: 0.0, approach, conditional_mean: None, conditional_sd: None, model_report: None }
    }
}

/// Polynomial mean and exp-linear variance model for residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualModel {
    pub mean_coeffs: Vec<f64>,
    pub logvar_coeffs: Vec<f64>,
    pub regressors: Vec<String>,
    pub degree: usize,
    /// Constant added to the fitted log variance before exponentiating.
    pub bias_correction: f64,
    pub variance_floor: f64,
    pub dropped_columns: usize,
}

impl ResidualModel {
    fn basis_row(&self, x: &[f64]) -> Vec<f64> {
        let m = DMatrix::from_row_slice(1, x.len(), x);
        stats::polynomial_basis(&m, self.degree).row(0).iter().copied().collect()
    }

    pub fn mean_at(&self, x: &[f64]) -> f64 {
        dot(&self.basis_row(x), &self.mean_coeffs)
    }

    pub fn variance_at(&self, x: &[f64]) -> f64 {
        (dot(&self.basis_row(x), &self.logvar_coeffs) + self.bias_correction).exp().max(self.variance_floor)
    }

    pub fn sd_at(&self, x: &[f64]) -> f64 {
        self.variance_at(x).sqrt()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_alpha(alpha2: f64) -> Result<()> {
    if !(alpha2 > 0.0 && alpha2 < 1.0) {
        return Err(Error::Usage(format!("alpha2 must lie in (0, 1), got {}", alpha2)));
    }
    Ok(())
}

fn check_rows(e: &[f64], x: &DMatrix<f64>, degree: usize) -> Result<()> {
    if degree > 2 {
        return Err(Error::Usage(format!("degree must be 0, 1 or 2, got {}", degree)));
    }
    if e.len() != x.nrows() {
        return Err(Error::Dimension(format!("{} residuals but {} regressor rows", e.len(), x.nrows())));
    }
    let p = stats::basis_size(x.ncols(), degree);
    if e.len() < 3 * p {
        return Err(Error::Underdetermined(format!(
            "{} observations for a basis of size {} (need at least {})",
            e.len(),
            p,
            3 * p
        )));
    }
    Ok(())
}

/// Fits the mean by least squares on the polynomial basis and the log
/// variance by least squares of `log((e - m)^2)` on the same basis.
pub fn fit_residual_model(
    e: &[f64],
    x: &DMatrix<f64>,
    labels: &[String],
    degree: usize,
    bias_correct: bool,
) -> Result<ResidualModel> {
    check_rows(e, x, degree)?;
    let basis = stats::polynomial_basis(x, degree);
    let y = DVector::from_column_slice(e);
    let (mean, dropped) = linalg::least_squares(&basis, &y);
    if !dropped.is_empty() {
        log::warn!("residual model: dropped {} collinear basis columns", dropped.len());
    }
    let fitted = &basis * &mean;
    let variance_floor = 1e-8 * stats::sample_variance(e);
    let log_sq = DVector::from_iterator(
        e.len(),
        e.iter().zip(fitted.iter()).map(|(a, m)| ((a - m) * (a - m)).max(variance_floor).max(f64::MIN_POSITIVE).ln()),
    );
    let (logvar, _) = linalg::least_squares(&basis, &log_sq);
    Ok(ResidualModel {
        mean_coeffs: mean.iter().copied().collect(),
        logvar_coeffs: logvar.iter().copied().collect(),
        regressors: labels.to_vec(),
        degree,
        bias_correction: if bias_correct { LOG_CHI2_BIAS } else { 0.0 },
        variance_floor,
        dropped_columns: dropped.len(),
    })
}

/// `M2 = m -/+ s sqrt(2 log(2/alpha2))`.
pub fn bound_subgaussian(m: f64, s: f64, alpha2: f64) -> Result<OutSampleResult> {
    check_alpha(alpha2)?;
    if !(s >= 0.0) {
        return Err(Error::Usage(format!("scale must be nonnegative, got {}", s)));
    }
    let eps = s * (2.0 * (2.0 / alpha2).ln()).sqrt();
    Ok(OutSampleResult {
        m2_l: m - eps,
        m2_u: m + eps,
        alpha2,
        approach: Approach::Subgaussian,
        conditional_mean: Some(m),
        conditional_sd: Some(s),
        model_report: None,
    })
}

/// `M2 = m -/+ (moment / alpha2)^(1/k)`.
pub fn bound_polynomial(m: f64, central_moment: f64, k: u32, alpha2: f64) -> Result<OutSampleResult> {
    check_alpha(alpha2)?;
    if k < 2 {
        return Err(Error::Usage(format!("moment order must be at least 2, got {}", k)));
    }
    if !(central_moment >= 0.0) {
        return Err(Error::Usage(format!("central moment must be nonnegative, got {}", central_moment)));
    }
    let eps = (central_moment / alpha2).powf(1.0 / k as f64);
    Ok(OutSampleResult {
        m2_l: m - eps,
        m2_u: m + eps,
        alpha2,
        approach: Approach::Polynomial(k),
        conditional_mean: Some(m),
        conditional_sd: None,
        model_report: None,
    })
}

/// Location-scale bound from the empirical quantiles of standardized
/// residuals.
pub fn bound_location_scale(model: &ResidualModel, e: &[f64], x: &DMatrix<f64>, x_t: &[f64], alpha2: f64) -> Result<OutSampleResult> {
    check_alpha(alpha2)?;
    if e.len() != x.nrows() || x.ncols() != x_t.len() {
        return Err(Error::Dimension("residuals, regressors and evaluation row disagree".into()));
    }
    if e.is_empty() {
        return Err(Error::Underdetermined("no residuals".into()));
    }
    let mut floored = 0;
    let mut eps: Vec<f64> = Vec::with_capacity(e.len());
    for (t, &et) in e.iter().enumerate() {
        let row: Vec<f64> = x.row(t).iter().copied().collect();
        let var = model.variance_at(&row);
        if var <= model.variance_floor {
            floored += 1;
        }
        let s = var.sqrt();
        eps.push(if s > 0.0 { (et - model.mean_at(&row)) / s } else { 0.0 });
    }
    if floored > 0 {
        log::warn!("location-scale: {} fitted scales floored", floored);
    }
    eps.sort_by(|a, b| a.total_cmp(b));
    let m = model.mean_at(x_t);
    let s = model.sd_at(x_t);
    Ok(OutSampleResult {
        m2_l: m + s * stats::quantile_sorted(&eps, alpha2 / 2.0),
        m2_u: m + s * stats::quantile_sorted(&eps, 1.0 - alpha2 / 2.0),
        alpha2,
        approach: Approach::LocationScale,
        conditional_mean: Some(m),
        conditional_sd: Some(s),
        model_report: Some(ModelReport {
            n: e.len(),
            basis_size: model.mean_coeffs.len(),
            dropped_columns: model.dropped_columns,
            floored,
            crossed: false,
        }),
    })
}

/// Linear quantile regression fit.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileFit {
    pub coeffs: Vec<f64>,
    /// Pinball objective at `coeffs`.
    pub objective: f64,
    /// Columns of the design kept after removing collinear ones.
    pub kept: Vec<usize>,
}

/// Pinball loss `sum rho_tau(y - X theta)`.
pub fn pinball_objective(x: &DMatrix<f64>, y: &[f64], theta: &[f64], tau: f64) -> f64 {
    (0..y.len())
        .map(|i| {
            let r = y[i] - x.row(i).iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
            if r >= 0.0 {
                tau * r
            } else {
                (tau - 1.0) * r
            }
        })
        .sum()
}

/// Minimizes the pinball loss: annealed IRLS for a starting point, then an
/// exact vertex exchange on the underlying linear program.
pub fn quantile_regression(x: &DMatrix<f64>, y: &[f64], tau: f64) -> Result<QuantileFit> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Usage(format!("quantile level must lie in (0, 1), got {}", tau)));
    }
    let (n, p_all) = x.shape();
    if n != y.len() {
        return Err(Error::Dimension(format!("{} responses but {} design rows", y.len(), n)));
    }
    let kept = linalg::independent_columns(x, 1e-10);
    if kept.is_empty() || n < kept.len() {
        return Err(Error::Underdetermined("quantile regression design is degenerate".into()));
    }
    if kept.len() < p_all {
        log::warn!("quantile regression: dropped {} collinear columns", p_all - kept.len());
    }
    let xs = x.select_columns(kept.iter());
    let theta = irls(&xs, y, tau);
    let theta = vertex_polish(&xs, y, tau, &theta);
    let mut coeffs = vec![0.0; p_all];
    for (k, &j) in kept.iter().enumerate() {
        coeffs[j] = theta[k];
    }
    let objective = pinball_objective(x, y, &coeffs, tau);
    Ok(QuantileFit { coeffs, objective, kept })
}

fn irls(x: &DMatrix<f64>, y: &[f64], tau: f64) -> Vec<f64> {
    let n = y.len();
    let scale = stats::sample_sd(y).max(1e-12);
    let yv = DVector::from_column_slice(y);
    let (mut theta, _) = linalg::least_squares(x, &yv);
    let mut eps = 1e-2;
    while eps >= 1e-8 {
        for _ in 0..50 {
            let r = &yv - x * &theta;
            let w: Vec<f64> = (0..n)
                .map(|i| {
                    let side = if r[i] >= 0.0 { tau } else { 1.0 - tau };
                    side / r[i].abs().max(eps * scale)
                })
                .collect();
            let mut xw = x.clone();
            let mut yw = yv.clone();
            for i in 0..n {
                let sw = w[i].sqrt();
                xw.row_mut(i).scale_mut(sw);
                yw[i] *= sw;
            }
            let (next, _) = linalg::least_squares(&xw, &yw);
            let change = (&next - &theta).amax();
            theta = next;
            if change <= 1e-12 * (1.0 + theta.amax()) {
                break;
            }
        }
        eps /= 10.0;
    }
    theta.iter().copied().collect()
}

/// Basis of `p` observations interpolated exactly.
struct Vertex {
    rows: Vec<usize>,
    inv: DMatrix<f64>,
    theta: DVector<f64>,
}

fn make_vertex(x: &DMatrix<f64>, y: &[f64], rows: Vec<usize>) -> Option<Vertex> {
    let xh = x.select_rows(rows.iter());
    let inv = xh.try_inverse()?;
    let yh = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y[i]));
    let theta = &inv * yh;
    Some(Vertex { rows, inv, theta })
}

fn vertex_polish(x: &DMatrix<f64>, y: &[f64], tau: f64, start: &[f64]) -> Vec<f64> {
    let (n, p) = x.shape();
    let theta0 = DVector::from_column_slice(start);
    let r0 = DVector::from_column_slice(y) - x * &theta0;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| r0[a].abs().total_cmp(&r0[b].abs()).then(a.cmp(&b)));
    // greedy independent rows closest to the starting fit
    let mut rows: Vec<usize> = Vec::with_capacity(p);
    for &i in &order {
        let mut trial = rows.clone();
        trial.push(i);
        if linalg::independent_columns(&x.select_rows(trial.iter()).transpose(), 1e-10).len() == trial.len() {
            rows = trial;
        }
        if rows.len() == p {
            break;
        }
    }
    let Some(mut v) = make_vertex(x, y, rows) else {
        return start.to_vec();
    };
    let obj_start = pinball_objective(x, y, start, tau);
    let scale = 1.0 + y.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    for _ in 0..(50 * n) {
        let resid = DVector::from_column_slice(y) - x * &v.theta;
        let mut best: Option<(f64, usize, f64)> = None;
        for (k, _) in v.rows.iter().enumerate() {
            let col = v.inv.column(k).into_owned();
            let g = x * &col;
            for sigma in [1.0, -1.0] {
                // theta(t) = theta + t sigma col; r_i(t) = r_i - t sigma g_i
                let mut slope = if sigma > 0.0 { 1.0 - tau } else { tau };
                for i in 0..n {
                    if v.rows.contains(&i) {
                        continue;
                    }
                    let gi = sigma * g[i];
                    let ri = resid[i];
                    slope += if ri > 1e-12 * scale {
                        -tau * gi
                    } else if ri < -1e-12 * scale {
                        (1.0 - tau) * gi
                    } else {
                        (-tau * gi).max((1.0 - tau) * gi)
                    };
                }
                if slope < -1e-12 && best.is_none_or(|b| slope < b.0) {
                    best = Some((slope, k, sigma));
                }
            }
        }
        let Some((slope, k, sigma)) = best else {
            break;
        };
        let col = v.inv.column(k).into_owned();
        let g = x * &col;
        // breakpoints where a nonbasic residual changes sign
        let mut breaks: Vec<(f64, usize, f64)> = Vec::new();
        for i in 0..n {
            if v.rows.contains(&i) {
                continue;
            }
            let gi = sigma * g[i];
            if gi.abs() <= 1e-14 {
                continue;
            }
            let t = resid[i] / gi;
            if t > -1e-12 * scale {
                breaks.push((t.max(0.0), i, gi.abs()));
            }
        }
        breaks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut s = slope;
        let mut enter = None;
        for &(_, i, gabs) in &breaks {
            s += gabs;
            if s >= 0.0 {
                enter = Some(i);
                break;
            }
        }
        let Some(i) = enter else {
            break;
        };
        let mut rows = v.rows.clone();
        rows[k] = i;
        match make_vertex(x, y, rows) {
            Some(next) => {
                let before = pinball_objective(x, y, v.theta.as_slice(), tau);
                let after = pinball_objective(x, y, next.theta.as_slice(), tau);
                if after > before + 1e-12 * scale {
                    break;
                }
                v = next;
            }
            None => break,
        }
    }
    let polished: Vec<f64> = v.theta.iter().copied().collect();
    if pinball_objective(x, y, &polished, tau) <= obj_start {
        polished
    } else {
        start.to_vec()
    }
}

/// Quantile-regression bound: fitted `alpha2/2` and `1 - alpha2/2` quantile
/// lines evaluated at the basis row of `x_t`.
pub fn bound_quantile_regression(e: &[f64], x: &DMatrix<f64>, x_t: &[f64], alpha2: f64, degree: usize) -> Result<OutSampleResult> {
    check_alpha(alpha2)?;
    check_rows(e, x, degree)?;
    if x.ncols() != x_t.len() {
        return Err(Error::Dimension("evaluation row length differs from regressors".into()));
    }
    let basis = stats::polynomial_basis(x, degree);
    let row = stats::polynomial_basis(&DMatrix::from_row_slice(1, x_t.len(), x_t), degree);
    let lo = quantile_regression(&basis, e, alpha2 / 2.0)?;
    let hi = quantile_regression(&basis, e, 1.0 - alpha2 / 2.0)?;
    let at = |c: &[f64]| row.row(0).iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
    let (mut l, mut u) = (at(&lo.coeffs), at(&hi.coeffs));
    let crossed = l > u;
    if crossed {
        log::warn!("quantile regression lines cross at the evaluation point; swapping");
        std::mem::swap(&mut l, &mut u);
    }
    Ok(OutSampleResult {
        m2_l: l,
        m2_u: u,
        alpha2,
        approach: Approach::QuantileReg,
        conditional_mean: None,
        conditional_sd: None,
        model_report: Some(ModelReport {
            n: e.len(),
            basis_size: basis.ncols(),
            dropped_columns: basis.ncols() - lo.kept.len(),
            floored: 0,
            crossed,
        }),
    })
}

pub const DEFAULT_SENSITIVITY: [f64; 5] = [0.25, 0.5, 1.0, 1.5, 2.0];

/// Subgaussian bounds with scale `c s` for each factor `c`.
pub fn sensitivity_grid(m: f64, s: f64, alpha2: f64, factors: &[f64]) -> Result<Vec<(f64, OutSampleResult)>> {
    if let Some(bad) = factors.iter().find(|c| !(**c > 0.0)) {
        return Err(Error::Usage(format!("sensitivity factors must be positive, got {}", bad)));
    }
    factors.iter().map(|&c| Ok((c, bound_subgaussian(m, c * s, alpha2)?))).collect()
}

/// Data for one out-of-sample bound: the pre-treatment error proxy, its
/// regressors, and the regressor row at the evaluation period.
#[derive(Debug, Clone)]
pub struct ErrorData<'a> {
    pub e: &'a [f64],
    pub x: &'a DMatrix<f64>,
    pub x_t: &'a [f64],
    pub labels: &'a [String],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutSampleOptions {
    pub degree: usize,
    pub bias_correct: bool,
    /// Multiplies the estimated conditional sd in the subgaussian bound.
    pub sd_factor: f64,
}

impl Default for OutSampleOptions {
    fn default() -> Self {
        Self { degree: 1, bias_correct: true, sd_factor: 1.0 }
    }
}

/// Computes the bound for one approach from raw error data.
pub fn bound(approach: Approach, data: &ErrorData<'_>, alpha2: f64, opts: &OutSampleOptions) -> Result<OutSampleResult> {
    check_alpha(alpha2)?;
    if data.x.ncols() != data.x_t.len() {
        return Err(Error::Dimension("evaluation row length differs from regressors".into()));
    }
    let report = |model: &ResidualModel| ModelReport {
        n: data.e.len(),
        basis_size: model.mean_coeffs.len(),
        dropped_columns: model.dropped_columns,
        floored: 0,
        crossed: false,
    };
    match approach {
        Approach::Subgaussian => {
            let model = fit_residual_model(data.e, data.x, data.labels, opts.degree, opts.bias_correct)?;
            let mut out = bound_subgaussian(model.mean_at(data.x_t), opts.sd_factor * model.sd_at(data.x_t), alpha2)?;
            out.model_report = Some(report(&model));
            Ok(out)
        }
        Approach::Polynomial(k) => {
            let model = fit_residual_model(data.e, data.x, data.labels, opts.degree, opts.bias_correct)?;
            let moment = (0..data.e.len())
                .map(|t| {
                    let row: Vec<f64> = data.x.row(t).iter().copied().collect();
                    (data.e[t] - model.mean_at(&row)).abs().powi(k as i32)
                })
                .sum::<f64>()
                / data.e.len() as f64;
            let mut out = bound_polynomial(model.mean_at(data.x_t), moment, k, alpha2)?;
            out.model_report = Some(report(&model));
            Ok(out)
        }
        Approach::LocationScale => {
            let model = fit_residual_model(data.e, data.x, data.labels, opts.degree, opts.bias_correct)?;
            bound_location_scale(&model, data.e, data.x, data.x_t, alpha2)
        }
        Approach::QuantileReg => bound_quantile_regression(data.e, data.x, data.x_t, alpha2, opts.degree),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn subgaussian_closed_form() {
        let r = bound_subgaussian(0.0, 1.0, 0.05).unwrap();
        assert_abs_diff_eq!(r.m2_u, 2.7162, epsilon = 1e-4);
        assert_abs_diff_eq!(r.m2_l, -2.7162, epsilon = 1e-4);
        let z = bound_subgaussian(1.5, 0.0, 0.05).unwrap();
        assert_eq!((z.m2_l, z.m2_u), (1.5, 1.5));
        assert!(bound_subgaussian(0.0, 1.0, 1.0).is_err());
        assert!(bound_subgaussian(0.0, 1.0, 2.0 * (-0.5_f64).exp()).is_err());
        assert!(bound_subgaussian(0.0, -1.0, 0.1).is_err());
    }

    #[test]
    fn polynomial_closed_form() {
        let r = bound_polynomial(0.0, 1.0, 2, 0.1).unwrap();
        assert_abs_diff_eq!(r.m2_u, 3.1623, epsilon = 1e-4);
        assert_eq!(bound_polynomial(0.3, 0.0, 4, 0.1).unwrap().m2_u, 0.3);
        assert!(bound_polynomial(0.0, -1.0, 2, 0.1).is_err());
        assert!(bound_polynomial(0.0, 1.0, 1, 0.1).is_err());
    }

    #[test]
    fn fourth_moment_bound_from_gaussian_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = normals(&mut rng, 100_000);
        let m4 = stats::central_moment(&xs, 4);
        // sd of the sample fourth moment of N(0,1) is sqrt(96/n)
        assert!((m4 - 3.0).abs() < 4.0 * (96.0_f64 / 100_000.0).sqrt());
        let r = bound_polynomial(0.0, m4, 4, 0.1).unwrap();
        assert_abs_diff_eq!(r.m2_u, 30.0_f64.powf(0.25), epsilon = 0.02);
    }

    #[test]
    fn nesting_and_ordering() {
        for (a, b) in [(0.2, 0.1), (0.1, 0.05), (0.05, 0.01)] {
            assert!(bound_subgaussian(0.0, 1.0, b).unwrap().m2_u > bound_subgaussian(0.0, 1.0, a).unwrap().m2_u);
            assert!(bound_polynomial(0.0, 1.0, 2, b).unwrap().m2_u > bound_polynomial(0.0, 1.0, 2, a).unwrap().m2_u);
        }
        let subg = bound_subgaussian(0.0, 1.0, 0.05).unwrap().m2_u;
        let cheb = bound_polynomial(0.0, 1.0, 2, 0.05).unwrap().m2_u;
        assert!(subg < cheb);
        assert_abs_diff_eq!(cheb, 20.0_f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn residual_model_homoskedastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let e: Vec<f64> = normals(&mut rng, 100).iter().map(|v| v * 0.5_f64.sqrt()).collect();
        let b = DMatrix::from_vec(100, 1, normals(&mut rng, 100));
        let model = fit_residual_model(&e, &b, &["b1".into()], 1, true).unwrap();
        assert!(model.mean_at(&[0.0]).abs() < 0.2);
        let ratio = model.variance_at(&[0.0]) / stats::sample_variance(&e);
        assert!((ratio - 1.0).abs() < 0.25, "ratio {}", ratio);
    }

    #[test]
    fn residual_model_recovers_exact_mean() {
        let b: Vec<f64> = (0..30).map(|t| (t as f64 * 0.37).sin() * 2.0).collect();
        let e: Vec<f64> = b.iter().map(|v| 0.7 - 1.3 * v).collect();
        let model = fit_residual_model(&e, &DMatrix::from_vec(30, 1, b), &[], 1, true).unwrap();
        assert_abs_diff_eq!(model.mean_coeffs[0], 0.7, epsilon = 1e-8);
        assert_abs_diff_eq!(model.mean_coeffs[1], -1.3, epsilon = 1e-8);
        assert!(model.variance_at(&[100.0]) > 0.0);
    }

    #[test]
    fn residual_model_recovers_variance_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b = normals(&mut rng, 1000);
        let z = normals(&mut rng, 1000);
        let e: Vec<f64> = (0..1000).map(|t| (0.25 * b[t]).exp() * z[t]).collect();
        let model = fit_residual_model(&e, &DMatrix::from_vec(1000, 1, b), &[], 1, true).unwrap();
        assert!((model.logvar_coeffs[1] - 0.5).abs() < 0.15, "slope {}", model.logvar_coeffs[1]);
    }

    #[test]
    fn underdetermined_model() {
        let b = DMatrix::from_vec(5, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(matches!(fit_residual_model(&[0.0; 5], &b, &[], 1, true), Err(Error::Underdetermined(_))));
    }

    #[test]
    fn location_scale_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let half = normals(&mut rng, 50);
        let e: Vec<f64> = half.iter().chain(half.iter()).enumerate().map(|(i, v)| if i < 50 { *v } else { -v }).collect();
        let x = DMatrix::from_element(100, 1, 0.0);
        let model = fit_residual_model(&e, &x, &[], 0, true).unwrap();
        let r = bound_location_scale(&model, &e, &x, &[0.0], 0.1).unwrap();
        assert_abs_diff_eq!(r.m2_l + r.m2_u, 2.0 * model.mean_at(&[0.0]), epsilon = 1e-12);
        // degree 0: constant location and scale
        let e2: Vec<f64> = normals(&mut rng, 100).iter().map(|v| v + 0.4).collect();
        let model = fit_residual_model(&e2, &x, &[], 0, true).unwrap();
        let r = bound_location_scale(&model, &e2, &x, &[0.0], 0.1).unwrap();
        assert_abs_diff_eq!(r.m2_l, stats::quantile(&e2, 0.05), epsilon = 1e-10);
        assert_abs_diff_eq!(r.m2_u, stats::quantile(&e2, 0.95), epsilon = 1e-10);
    }

    #[test]
    fn intercept_quantile_is_order_statistic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = normals(&mut rng, 50);
        let ones = DMatrix::from_element(50, 1, 1.0);
        let mut sorted = e.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        for tau in [0.05, 0.31, 0.95] {
            let fit = quantile_regression(&ones, &e, tau).unwrap();
            let k = (50.0 * tau as f64).ceil() as usize - 1;
            assert_abs_diff_eq!(fit.coeffs[0], sorted[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn noiseless_quantile_lines() {
        let b: Vec<f64> = (0..40).map(|t| (t as f64 * 0.7).cos() * 3.0).collect();
        let e: Vec<f64> = b.iter().map(|v| 0.6 * v).collect();
        let x = DMatrix::from_vec(40, 1, b);
        let r = bound_quantile_regression(&e, &x, &[1.5], 0.1, 1).unwrap();
        assert_abs_diff_eq!(r.m2_l, 0.9, epsilon = 1e-6);
        assert_abs_diff_eq!(r.m2_u, 0.9, epsilon = 1e-6);
    }

    #[test]
    fn quantile_subgradient_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = normals(&mut rng, 120);
        let z = normals(&mut rng, 120);
        let e: Vec<f64> = (0..120).map(|t| 0.3 * b[t] + z[t]).collect();
        let x = stats::polynomial_basis(&DMatrix::from_vec(120, 1, b), 2);
        for tau in [0.05, 0.5, 0.95] {
            let fit = quantile_regression(&x, &e, tau).unwrap();
            let below = (0..120)
                .filter(|&i| e[i] < x.row(i).iter().zip(&fit.coeffs).map(|(a, c)| a * c).sum::<f64>() - 1e-9)
                .count() as f64;
            let p = x.ncols() as f64;
            assert!(below >= tau * 120.0 - p && below <= tau * 120.0 + p, "tau {} below {}", tau, below);
        }
    }

    #[test]
    fn sensitivity_grid_properties() {
        let one = sensitivity_grid(0.2, 1.3, 0.1, &[1.0]).unwrap();
        assert_eq!(one[0].1, bound_subgaussian(0.2, 1.3, 0.1).unwrap());
        let grid = sensitivity_grid(0.2, 1.3, 0.1, &DEFAULT_SENSITIVITY).unwrap();
        assert_eq!(grid.len(), 5);
        let w1 = grid[2].1.m2_u - grid[2].1.m2_l;
        for (c, r) in &grid {
            assert_abs_diff_eq!(r.m2_u - r.m2_l, c * w1, epsilon = 1e-12);
            assert_abs_diff_eq!(r.m2_u + r.m2_l, 0.4, epsilon = 1e-12);
        }
        for k in 1..5 {
            assert!(grid[k].1.m2_l < grid[k - 1].1.m2_l && grid[k].1.m2_u > grid[k - 1].1.m2_u);
        }
        assert!(sensitivity_grid(0.0, 1.0, 0.1, &[0.0]).is_err());
    }

    #[test]
    fn approach_parsing() {
        for s in ["subg", "poly:4", "locscale", "qreg"] {
            assert_eq!(s.parse::<Approach>().unwrap().to_string(), s);
        }
        assert!("poly:1".parse::<Approach>().is_err());
        assert_eq!(serde_json::to_string(&Approach::Polynomial(3)).unwrap(), "\"poly:3\"");
    }
}
