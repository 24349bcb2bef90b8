//! Feasibility sets for the weights and controls, the relaxed simulation set
//! built around thresholded estimates, and Euclidean projections.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feasibility set for the donor weights `w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSet {
    /// `w >= 0`, `sum(w) = 1`.
    Simplex,
    /// `||w||_1 <= q`.
    L1Ball { q: f64 },
    /// `||w||_2 <= q`.
    L2Ball { q: f64 },
    /// Simplex intersected with `||w||_2 <= q`.
    SimplexL2 { q: f64 },
    /// `(1 - alpha)/2 ||w||_2^2 + alpha ||w||_1 <= q`.
    ElasticNet { q: f64, alpha: f64 },
    Unconstrained,
}

/// Feasibility set for the control coefficients `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RSpace {
    #[default]
    Free,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub weights: WeightSet,
    pub r_space: RSpace,
}

impl ConstraintSpec {
    pub fn simplex() -> Self {
        Self { weights: WeightSet::Simplex, r_space: RSpace::Free }
    }

    pub fn unconstrained() -> Self {
        Self { weights: WeightSet::Unconstrained, r_space: RSpace::Free }
    }

    pub fn validate(&self) -> Result<()> {
        let bad_q = |q: f64| !(q > 0.0 && q.is_finite());
        match self.weights {
            WeightSet::L1Ball { q } | WeightSet::L2Ball { q } | WeightSet::SimplexL2 { q } if bad_q(q) => {
                Err(Error::Config(format!("constraint radius Q must be positive, got {}", q)))
            }
            WeightSet::ElasticNet { q, alpha } => {
                if bad_q(q) {
                    Err(Error::Config(format!("constraint radius Q must be positive, got {}", q)))
                } else if !(0.0..=1.0).contains(&alpha) {
                    Err(Error::Config(format!("elastic-net alpha must lie in [0, 1], got {}", alpha)))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Whether `(w, r)` satisfies every defining (in)equality within `tol`.
    pub fn contains(&self, w: &[f64], r: &[f64], tol: f64) -> bool {
        let r_ok = match self.r_space {
            RSpace::Free => true,
            RSpace::Zero => r.iter().all(|v| v.abs() <= tol),
        };
        r_ok && self.weights.contains(w, tol)
    }

    /// Euclidean projection of `v` onto the weight set.
    pub fn project_weights(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.weights.project(v)
    }
}

impl WeightSet {
    pub fn contains(&self, w: &[f64], tol: f64) -> bool {
        let l1: f64 = w.iter().map(|x| x.abs()).sum();
        let l2sq: f64 = w.iter().map(|x| x * x).sum();
        let simplex = || w.iter().all(|&x| x >= -tol) && (w.iter().sum::<f64>() - 1.0).abs() <= tol;
        match *self {
            WeightSet::Simplex => simplex(),
            WeightSet::L1Ball { q } => l1 <= q + tol,
            WeightSet::L2Ball { q } => l2sq.sqrt() <= q + tol,
            WeightSet::SimplexL2 { q } => simplex() && l2sq.sqrt() <= q + tol,
            WeightSet::ElasticNet { q, alpha } => 0.5 * (1.0 - alpha) * l2sq + alpha * l1 <= q + tol,
            WeightSet::Unconstrained => w.iter().all(|x| x.is_finite()),
        }
    }

    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.is_empty() {
            return Err(Error::Dimension("cannot project an empty vector".into()));
        }
        Ok(match *self {
            WeightSet::Simplex => project_simplex_sum(v, 1.0),
            WeightSet::L1Ball { q } => project_l1_ball(v, q),
            WeightSet::L2Ball { q } => {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n <= q {
                    v.to_vec()
                } else {
                    v.iter().map(|x| x * q / n).collect()
                }
            }
            WeightSet::SimplexL2 { q } => project_simplex_l2(v, q)?,
            WeightSet::ElasticNet { q, alpha } => project_elastic_net(v, q, alpha),
            WeightSet::Unconstrained => v.to_vec(),
        })
    }

    /// Sets whose relaxed simulation region is built from the simplex recipe.
    pub fn is_simplex_family(&self) -> bool {
        matches!(self, WeightSet::Simplex | WeightSet::SimplexL2 { .. })
    }
}

/// Euclidean projection onto the unit simplex `{w >= 0, sum(w) = 1}`.
pub fn project_simplex(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Dimension("cannot project an empty vector".into()));
    }
    Ok(project_simplex_sum(v, 1.0))
}

/// Sort-based projection onto `{w >= 0, sum(w) = s}` for `s >= 0`.
pub fn project_simplex_sum(v: &[f64], s: f64) -> Vec<f64> {
    if s <= 0.0 {
        return vec![0.0; v.len()];
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cumsum += uk;
        let t = (cumsum - s) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

fn project_l1_ball(v: &[f64], q: f64) -> Vec<f64> {
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 <= q {
        return v.to_vec();
    }
    let abs: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    let p = project_simplex_sum(&abs, q);
    v.iter().zip(p).map(|(&x, m)| m * x.signum()).collect()
}

fn project_simplex_l2(v: &[f64], q: f64) -> Result<Vec<f64>> {
    let n = v.len() as f64;
    if q < 1.0 / n.sqrt() - 1e-12 {
        return Err(Error::Config(format!(
            "simplex and L2 ball of radius {} do not intersect in dimension {}",
            q, n
        )));
    }
    let norm = |w: &[f64]| w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let w0 = project_simplex_sum(v, 1.0);
    if norm(&w0) <= q {
        return Ok(w0);
    }
    // w(mu) = P_simplex(v / (1 + mu)) has decreasing norm in mu.
    let at = |mu: f64| {
        let scaled: Vec<f64> = v.iter().map(|x| x / (1.0 + mu)).collect();
        project_simplex_sum(&scaled, 1.0)
    };
    let mut hi = 1.0;
    while norm(&at(hi)) > q && hi < 1e15 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if norm(&at(mid)) > q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(at(hi))
}

fn project_elastic_net(v: &[f64], q: f64, alpha: f64) -> Vec<f64> {
    let g = |w: &[f64]| {
        let l1: f64 = w.iter().map(|x| x.abs()).sum();
        let l2: f64 = w.iter().map(|x| x * x).sum();
        0.5 * (1.0 - alpha) * l2 + alpha * l1
    };
    if g(v) <= q {
        return v.to_vec();
    }
    let at = |mu: f64| -> Vec<f64> {
        v.iter()
            .map(|&x| {
                let soft = (x.abs() - mu * alpha).max(0.0) * x.signum();
                soft / (1.0 + mu * (1.0 - alpha))
            })
            .collect()
    };
    let mut hi = 1.0;
    while g(&at(hi)) > q && hi < 1e15 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(&at(mid)) > q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(hi)
}

/// Zeroes weights with magnitude at most `rho`. Returns the thresholded
/// weights and their L1 norm.
pub fn threshold_weights(w_hat: &[f64], rho: f64) -> (Vec<f64>, f64) {
    let w_star: Vec<f64> = w_hat.iter().map(|&w| if w.abs() > rho { w } else { 0.0 }).collect();
    let l1 = w_star.iter().map(|x| x.abs()).sum();
    (w_star, l1)
}

impl fmt::Display for ConstraintSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.weights {
            WeightSet::Simplex => write!(f, "simplex")?,
            WeightSet::L1Ball { q } => write!(f, "l1 Q={}", q)?,
            WeightSet::L2Ball { q } => write!(f, "l2 Q={}", q)?,
            WeightSet::SimplexL2 { q } => write!(f, "simplex-l2 Q={}", q)?,
            WeightSet::ElasticNet { q, alpha } => write!(f, "elastic-net Q={} alpha={}", q, alpha)?,
            WeightSet::Unconstrained => write!(f, "unconstrained")?,
        }
        if self.r_space == RSpace::Zero {
            write!(f, " r=zero")?;
        }
        Ok(())
    }
}

impl FromStr for ConstraintSpec {
    type Err = Error;

    /// Parses `simplex`, `l1 Q=1`, `l2 Q=0.5`, `simplex-l2 Q=0.6`,
    /// `elastic-net Q=1 alpha=0.5` or `unconstrained`, optionally followed by
    /// `r=zero` or `r=free`.
    fn from_str(s: &str) -> Result<Self> {
        let mut tokens = s.split_whitespace();
        let kind = tokens
            .next()
            .ok_or_else(|| Error::Config("empty constraint specification".into()))?
            .to_ascii_lowercase();
        let mut q = None;
        let mut alpha = None;
        let mut r_space = RSpace::Free;
        for tok in tokens {
            let (key, val) = tok
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value in constraint, got '{}'", tok)))?;
            let num = || {
                val.parse::<f64>()
                    .map_err(|_| Error::Config(format!("non-numeric constraint parameter '{}'", tok)))
            };
            match key.to_ascii_lowercase().as_str() {
                "q" => q = Some(num()?),
                "alpha" => alpha = Some(num()?),
                "r" => {
                    r_space = match val {
                        "zero" => RSpace::Zero,
                        "free" => RSpace::Free,
                        _ => return Err(Error::Config(format!("unknown r-space '{}'", val))),
                    }
                }
                _ => return Err(Error::Config(format!("unknown constraint parameter '{}'", key))),
            }
        }
        let need_q = || q.ok_or_else(|| Error::Config(format!("constraint '{}' requires Q=", kind)));
        let weights = match kind.as_str() {
            "simplex" => WeightSet::Simplex,
            "l1" => WeightSet::L1Ball { q: need_q()? },
            "l2" => WeightSet::L2Ball { q: need_q()? },
            "simplex-l2" => WeightSet::SimplexL2 { q: need_q()? },
            "elastic-net" => WeightSet::ElasticNet {
                q: need_q()?,
                alpha: alpha.ok_or_else(|| Error::Config("elastic-net requires alpha=".into()))?,
            },
            "unconstrained" | "ols" => WeightSet::Unconstrained,
            other => return Err(Error::Config(format!("unknown constraint '{}'", other))),
        };
        let spec = ConstraintSpec { weights, r_space };
        spec.validate()?;
        Ok(spec)
    }
}

/// Polyhedral region `{x : lower <= x <= upper, e'x = rhs}` with optional
/// single equality row. Infinite bounds are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyhedron {
    /// `null` in JSON stands for `-inf`.
    #[serde(with = "lower_bounds")]
    pub lower: Vec<f64>,
    /// `null` in JSON stands for `+inf`.
    #[serde(with = "upper_bounds")]
    pub upper: Vec<f64>,
    pub equality: Option<Equality>,
}

fn serialize_bounds<S: serde::Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    let opt: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
    opt.serialize(s)
}

fn deserialize_bounds<'de, D: serde::Deserializer<'de>>(d: D, missing: f64) -> std::result::Result<Vec<f64>, D::Error> {
    let opt: Vec<Option<f64>> = Vec::deserialize(d)?;
    Ok(opt.into_iter().map(|x| x.unwrap_or(missing)).collect())
}

mod lower_bounds {
    pub fn serialize<S: serde::Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        super::serialize_bounds(v, s)
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        super::deserialize_bounds(d, f64::NEG_INFINITY)
    }
}

mod upper_bounds {
    pub fn serialize<S: serde::Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        super::serialize_bounds(v, s)
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        super::deserialize_bounds(d, f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equality {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

impl Polyhedron {
    pub fn free(dim: usize) -> Self {
        Self { lower: vec![f64::NEG_INFINITY; dim], upper: vec![f64::INFINITY; dim], equality: None }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.upper.len() != d || self.equality.as_ref().is_some_and(|e| e.coeffs.len() != d) {
            return Err(Error::Dimension("polyhedron bounds and equality lengths differ".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l > u || l.is_nan() || u.is_nan()) {
            return Err(Error::Input("polyhedron has an empty coordinate interval".into()));
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        let bounds = x
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol);
        bounds
            && self.equality.as_ref().is_none_or(|e| {
                let lhs: f64 = e.coeffs.iter().zip(x).map(|(a, b)| a * b).sum();
                (lhs - e.rhs).abs() <= tol * (1.0 + e.rhs.abs())
            })
    }

    /// Coordinates that are bounded over the region: both bounds finite, or
    /// covered by an equality whose coefficients all have the same sign as the
    /// direction in which the coordinate is bounded.
    pub fn bounded_coordinates(&self) -> Vec<bool> {
        let d = self.dim();
        let mut bounded: Vec<bool> = (0..d).map(|j| self.lower[j].is_finite() && self.upper[j].is_finite()).collect();
        if let Some(eq) = &self.equality {
            // Every coordinate touched by the equality must be bounded below
            // (after signing by its coefficient) for the group to be compact.
            let touched: Vec<usize> = (0..d).filter(|&j| eq.coeffs[j] != 0.0).collect();
            let one_sided = touched.iter().all(|&j| {
                let c = eq.coeffs[j];
                (c > 0.0 && self.lower[j].is_finite()) || (c < 0.0 && self.upper[j].is_finite()) || bounded[j]
            });
            if one_sided && !touched.is_empty() {
                for &j in &touched {
                    bounded[j] = true;
                }
            }
        }
        bounded
    }

    /// Euclidean projection onto the region. With an equality row the
    /// projection is `clip(v - tau e)` for the `tau` solving the equality,
    /// found exactly among the breakpoints of the piecewise-linear map.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let clip = |x: f64, j: usize| x.max(self.lower[j]).min(self.upper[j]);
        let eq = match &self.equality {
            None => return v.iter().enumerate().map(|(j, &x)| clip(x, j)).collect(),
            Some(eq) => eq,
        };
        let e = &eq.coeffs;
        let at = |tau: f64| -> Vec<f64> { v.iter().enumerate().map(|(j, &x)| clip(x - tau * e[j], j)).collect() };
        let phi = |tau: f64| -> f64 { v.iter().enumerate().map(|(j, &x)| e[j] * clip(x - tau * e[j], j)).sum() };
        let mut knots: Vec<f64> = Vec::new();
        for j in 0..v.len() {
            if e[j] != 0.0 {
                for b in [self.lower[j], self.upper[j]] {
                    if b.is_finite() {
                        knots.push((v[j] - b) / e[j]);
                    }
                }
            }
        }
        knots.sort_by(|a, b| a.total_cmp(b));
        knots.dedup();
        // phi is nonincreasing and linear between knots
        let linear_root = |t0: f64, t1: f64| -> f64 {
            let (p0, p1) = (phi(t0), phi(t1));
            if p0 == p1 {
                t0
            } else {
                t0 + (eq.rhs - p0) * (t1 - t0) / (p1 - p0)
            }
        };
        let tau = if knots.is_empty() {
            linear_root(0.0, 1.0)
        } else if phi(knots[0]) <= eq.rhs {
            linear_root(knots[0] - 1.0, knots[0]).min(knots[0])
        } else if phi(knots[knots.len() - 1]) >= eq.rhs {
            let last = knots[knots.len() - 1];
            linear_root(last, last + 1.0).max(last)
        } else {
            // binary search for the bracketing pair
            let (mut lo, mut hi) = (0, knots.len() - 1);
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if phi(knots[mid]) > eq.rhs {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            linear_root(knots[lo], knots[hi]).clamp(knots[lo], knots[hi])
        };
        at(tau)
    }
}

/// Relaxed constraint set used in simulation, centered at the thresholded
/// estimate: `{D (beta - beta_star)}` over the base set with weights'
/// L1 norm pinned to that of the thresholded weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaStarSpec {
    pub base: ConstraintSpec,
    /// Thresholded `(w*', r')'`.
    pub beta_star: Vec<f64>,
    pub n_weights: usize,
    pub rho: f64,
    /// Diagonal of the scaling matrix `D`.
    pub scaling: Vec<f64>,
    pub l1_target: f64,
}

impl DeltaStarSpec {
    /// Thresholds `beta_hat` at `rho` and builds the relaxed set.
    ///
    /// If thresholding would remove every weight, `rho` falls back to half the
    /// largest weight magnitude (logged as a warning).
    pub fn new(base: ConstraintSpec, beta_hat: &[f64], n_weights: usize, rho: f64, scaling: &[f64]) -> Result<Self> {
        if beta_hat.len() != scaling.len() || n_weights > beta_hat.len() {
            return Err(Error::Dimension("beta and scaling lengths differ".into()));
        }
        if !(rho >= 0.0) {
            return Err(Error::Input(format!("threshold must be nonnegative, got {}", rho)));
        }
        let w_hat = &beta_hat[..n_weights];
        let (mut w_star, mut l1) = threshold_weights(w_hat, rho);
        let mut rho = rho;
        let max_abs = w_hat.iter().map(|x| x.abs()).fold(0.0, f64::max);
        if l1 == 0.0 && max_abs > 0.0 && base.weights.is_simplex_family() {
            let fallback = max_abs / 2.0;
            log::warn!(
                "threshold {:.4e} removes every weight; falling back to {:.4e}",
                rho,
                fallback
            );
            rho = fallback;
            (w_star, l1) = threshold_weights(w_hat, rho);
        }
        let mut beta_star = w_star;
        beta_star.extend_from_slice(&beta_hat[n_weights..]);
        Ok(Self { base, beta_star, n_weights, rho, scaling: scaling.to_vec(), l1_target: l1 })
    }

    /// The un-relaxed set centered at `beta0` (no thresholding).
    pub fn centered(base: ConstraintSpec, beta0: &[f64], n_weights: usize, scaling: &[f64]) -> Result<Self> {
        Self::new(base, beta0, n_weights, 0.0, scaling)
    }

    pub fn dim(&self) -> usize {
        self.beta_star.len()
    }

    /// The set in `delta` coordinates as a polyhedron.
    ///
    /// Simplex-family sets: `w >= 0` and `sum(w) = ||w*||_1`. Binding L1
    /// balls use the same recipe on sign-flipped weights. Non-binding sets
    /// and the L2/elastic-net families are relaxed to the whole space, which
    /// over-covers (experimental).
    pub fn region(&self) -> Polyhedron {
        let d = self.dim();
        let j = self.n_weights;
        let mut poly = Polyhedron::free(d);
        if self.base.r_space == RSpace::Zero {
            for k in j..d {
                let shift = -self.scaling[k] * self.beta_star[k];
                poly.lower[k] = shift;
                poly.upper[k] = shift;
            }
        }
        let w_star = &self.beta_star[..j];
        let signs: Option<Vec<f64>> = match self.base.weights {
            WeightSet::Simplex | WeightSet::SimplexL2 { .. } => Some(vec![1.0; j]),
            WeightSet::L1Ball { q } if self.l1_target >= q - 1e-8 => {
                Some(w_star.iter().map(|&w| if w < 0.0 { -1.0 } else { 1.0 }).collect())
            }
            _ => None,
        };
        if let Some(signs) = signs {
            let mut coeffs = vec![0.0; d];
            for k in 0..j {
                let edge = -self.scaling[k] * w_star[k];
                if signs[k] > 0.0 {
                    poly.lower[k] = edge;
                } else {
                    poly.upper[k] = edge;
                }
                coeffs[k] = signs[k] / self.scaling[k];
            }
            poly.equality = Some(Equality { coeffs, rhs: 0.0 });
        }
        poly
    }

    pub fn contains(&self, delta: &[f64], tol: f64) -> bool {
        self.region().contains(delta, tol)
    }
}
