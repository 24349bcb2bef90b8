//! Prediction intervals for the treatment effect and the counterfactual
//! outcome from in-sample and out-of-sample bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::insample::InSampleResult;
use crate::outsample::OutSampleResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Tau,
    Counterfactual,
}

/// A pair of bounds with the level it was computed at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBounds {
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
    pub method: String,
}

impl UncertaintyBounds {
    pub fn new(lower: f64, upper: f64, alpha: f64, method: impl Into<String>) -> Self {
        Self { lower, upper, alpha, method: method.into() }
    }

    /// No allowance at all.
    pub fn zero(method: impl Into<String>) -> Self {
        Self::new(0.0, 0.0, 0.0, method)
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha < 1.0) {
            return Err(Error::Usage(format!("{} level must lie in [0, 1), got {}", name, self.alpha)));
        }
        if self.lower.is_nan() || self.upper.is_nan() || self.lower > self.upper {
            return Err(Error::Usage(format!("{} bounds ({}, {}) are not ordered", name, self.lower, self.upper)));
        }
        if self.alpha == 0.0 && (self.lower != 0.0 || self.upper != 0.0) {
            return Err(Error::Usage(format!("{} has nonzero bounds at level 0", name)));
        }
        Ok(())
    }
}

impl From<&InSampleResult> for UncertaintyBounds {
    fn from(r: &InSampleResult) -> Self {
        Self::new(r.m1_l, r.m1_u, r.alpha1, "simulation")
    }
}

impl From<&OutSampleResult> for UncertaintyBounds {
    fn from(r: &OutSampleResult) -> Self {
        Self::new(r.m2_l, r.m2_u, r.alpha2, r.approach.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub in_sample: UncertaintyBounds,
    pub out_of_sample: UncertaintyBounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub target: Target,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    /// `lower - point` and `upper - point`, kept exactly.
    pub margins: (f64, f64),
    pub alpha_total: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub components: Components,
}

impl PredictionInterval {
    fn build(target: Target, point: f64, margins: (f64, f64), m1: &UncertaintyBounds, m2: &UncertaintyBounds) -> Self {
        Self {
            target,
            point,
            lower: point + margins.0,
            upper: point + margins.1,
            margins,
            alpha_total: m1.alpha + m2.alpha,
            alpha1: m1.alpha,
            alpha2: m2.alpha,
            components: Components { in_sample: m1.clone(), out_of_sample: m2.clone() },
        }
    }

    /// Width from the margins: `(M1_U - M1_L) + (M2_U - M2_L)` up to one rounding.
    pub fn width(&self) -> f64 {
        self.margins.1 - self.margins.0
    }

    pub fn level(&self) -> f64 {
        1.0 - self.alpha_total
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

fn check(m1: &UncertaintyBounds, m2: &UncertaintyBounds) -> Result<()> {
    m1.check("in-sample")?;
    m2.check("out-of-sample")?;
    if m1.alpha + m2.alpha >= 1.0 {
        return Err(Error::Usage(format!("alpha1 + alpha2 = {} must be below 1", m1.alpha + m2.alpha)));
    }
    Ok(())
}

/// `[tau_hat - M1_U - M2_U, tau_hat - M1_L - M2_L]`.
pub fn assemble_tau(tau_hat: f64, m1: &UncertaintyBounds, m2: &UncertaintyBounds) -> Result<PredictionInterval> {
    check(m1, m2)?;
    let lo = m1.lower + m2.lower;
    let hi = m1.upper + m2.upper;
    Ok(PredictionInterval::build(Target::Tau, tau_hat, (-hi, -lo), m1, m2))
}

/// `[y_hat0 + M1_L + M2_L, y_hat0 + M1_U + M2_U]`.
pub fn assemble_counterfactual(y_hat0: f64, m1: &UncertaintyBounds, m2: &UncertaintyBounds) -> Result<PredictionInterval> {
    check(m1, m2)?;
    let lo = m1.lower + m2.lower;
    let hi = m1.upper + m2.upper;
    Ok(PredictionInterval::build(Target::Counterfactual, y_hat0, (lo, hi), m1, m2))
}
