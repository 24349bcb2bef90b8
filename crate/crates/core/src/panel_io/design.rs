use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::dataset::PanelDataset;
use crate::constraint_sets::ConstraintSpec;
use crate::error::{Error, Result};
use crate::stats;

/// Dependence regime of the pre-treatment data; selects the scaling matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    Iid,
    WeaklyDependent,
    Cointegration,
}

impl Regime {
    /// Diagonal of `D` for `n_weights` weights and `n_controls` controls.
    pub fn scaling(&self, t0: usize, n_weights: usize, n_controls: usize) -> Vec<f64> {
        let root = (t0 as f64).sqrt();
        let first = match self {
            Regime::Cointegration => t0 as f64,
            _ => root,
        };
        let mut d = vec![first; n_weights];
        d.extend(std::iter::repeat_n(root, n_controls));
        d
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Iid => "iid",
            Regime::WeaklyDependent => "weakly_dependent",
            Regime::Cointegration => "cointegration",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "iid" => Ok(Regime::Iid),
            "weakly_dependent" | "dependent" => Ok(Regime::WeaklyDependent),
            "cointegration" | "cointegrated" => Ok(Regime::Cointegration),
            other => Err(Error::Config(format!("unknown regime '{}'", other))),
        }
    }
}

/// Per-equation controls. Only intercepts are supported; a single entry is
/// broadcast to every equation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlSpec {
    pub intercept: Vec<bool>,
}

impl ControlSpec {
    pub fn none() -> Self {
        Self { intercept: vec![false] }
    }

    pub fn intercepts() -> Self {
        Self { intercept: vec![true] }
    }

    fn resolve(&self, m: usize) -> Result<Vec<bool>> {
        match self.intercept.len() {
            0 => Ok(vec![false; m]),
            1 => Ok(vec![self.intercept[0]; m]),
            n if n == m => Ok(self.intercept.clone()),
            n => Err(Error::Config(format!(
                "intercept specification has {} entries for {} equations",
                n, m
            ))),
        }
    }
}

impl Default for ControlSpec {
    fn default() -> Self {
        Self::none()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DesignOptions {
    /// Divide each equation block by the pooled pre-period standard
    /// deviation of its feature.
    pub standardize: bool,
    /// Per-equation weights in the least-squares objective; empty means 1.
    pub equation_weights: Vec<f64>,
}

/// Stacked constrained least-squares problem `min ||A - B w - C r||^2`.
///
/// Row `t + l * T0` holds feature `l` at pre-period `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScDesign {
    pub a: DVector<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub z: DMatrix<f64>,
    /// Diagonal of `D`.
    pub scaling: Vec<f64>,
    pub constraint: ConstraintSpec,
    pub regime: Regime,
    pub t0: usize,
    pub feature_labels: Vec<String>,
    pub donor_ids: Vec<String>,
    pub controls_per_equation: Vec<usize>,
    /// Row scale factor applied to each equation block.
    pub block_factors: Vec<f64>,
}

impl ScDesign {
    /// Assembles a design from raw matrices. `controls_per_equation` gives the
    /// number of columns of `C` owned by each equation block, in order.
    pub fn from_matrices(
        a: DVector<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        t0: usize,
        controls_per_equation: Vec<usize>,
        regime: Regime,
        constraint: ConstraintSpec,
    ) -> Result<Self> {
        let m = controls_per_equation.len();
        if m == 0 || t0 == 0 {
            return Err(Error::Dimension("design needs T0 >= 1 and at least one equation".into()));
        }
        let rows = t0 * m;
        if a.len() != rows || b.nrows() != rows || c.nrows() != rows {
            return Err(Error::Dimension(format!(
                "A, B, C must have T0*M = {} rows (got {}, {}, {})",
                rows,
                a.len(),
                b.nrows(),
                c.nrows()
            )));
        }
        if b.ncols() == 0 {
            return Err(Error::Dimension("design needs at least one donor".into()));
        }
        let k: usize = controls_per_equation.iter().sum();
        if c.ncols() != k {
            return Err(Error::Dimension(format!("C has {} columns, expected {}", c.ncols(), k)));
        }
        // C must be block diagonal
        let mut col = 0;
        for (l, &kl) in controls_per_equation.iter().enumerate() {
            for j in col..col + kl {
                for row in 0..rows {
                    if row / t0 != l && c[(row, j)] != 0.0 {
                        return Err(Error::Input(format!(
                            "C is not block diagonal: column {} has a nonzero in equation {}",
                            j,
                            row / t0
                        )));
                    }
                }
            }
            col += kl;
        }
        if a.iter().chain(b.iter()).chain(c.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("design contains non-finite values".into()));
        }
        constraint.validate()?;
        let j = b.ncols();
        let z = {
            let mut z = DMatrix::zeros(rows, j + k);
            z.columns_mut(0, j).copy_from(&b);
            z.columns_mut(j, k).copy_from(&c);
            z
        };
        let scaling = regime.scaling(t0, j, k);
        Ok(Self {
            a,
            b,
            c,
            z,
            scaling,
            constraint,
            regime,
            t0,
            feature_labels: (0..m).map(|l| format!("feature{}", l + 1)).collect(),
            donor_ids: (0..j).map(|i| format!("donor{}", i + 1)).collect(),
            controls_per_equation,
            block_factors: vec![1.0; m],
        })
    }

    pub fn n_weights(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_controls(&self) -> usize {
        self.c.ncols()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn n_equations(&self) -> usize {
        self.controls_per_equation.len()
    }

    /// Column offset in `C` of the first control of equation `l`.
    pub fn control_offset(&self, l: usize) -> usize {
        self.controls_per_equation[..l].iter().sum()
    }

    /// Per-equation `(a_l, B_l, C_l)` with `C_l` restricted to the
    /// equation's own control columns.
    pub fn equation_blocks(&self) -> Vec<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        (0..self.n_equations())
            .map(|l| {
                let r0 = l * self.t0;
                let a = self.a.rows(r0, self.t0).into_owned();
                let b = self.b.rows(r0, self.t0).into_owned();
                let c = self
                    .c
                    .view((r0, self.control_offset(l)), (self.t0, self.controls_per_equation[l]))
                    .into_owned();
                (a, b, c)
            })
            .collect()
    }

    pub fn to_dump(&self) -> DesignDump {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
        };
        DesignDump {
            a: self.a.iter().cloned().collect(),
            b: rows(&self.b),
            c: rows(&self.c),
            scaling: self.scaling.clone(),
            t0: self.t0,
            controls_per_equation: self.controls_per_equation.clone(),
            regime: self.regime,
            constraint: self.constraint.to_string(),
            feature_labels: self.feature_labels.clone(),
            donor_ids: self.donor_ids.clone(),
            block_factors: self.block_factors.clone(),
        }
    }

    pub fn from_dump(dump: &DesignDump) -> Result<Self> {
        let n = dump.a.len();
        let to_matrix = |rows: &[Vec<f64>], name: &str, ncols: Option<usize>| -> Result<DMatrix<f64>> {
            if rows.len() != n {
                return Err(Error::Dimension(format!("{} has {} rows, A has {}", name, rows.len(), n)));
            }
            let cols = ncols.or_else(|| rows.first().map(|r| r.len())).unwrap_or(0);
            if rows.iter().any(|r| r.len() != cols) {
                return Err(Error::Dimension(format!("{} rows have unequal lengths", name)));
            }
            Ok(DMatrix::from_fn(n, cols, |i, j| rows[i][j]))
        };
        let k: usize = dump.controls_per_equation.iter().sum();
        let b = to_matrix(&dump.b, "B", None)?;
        let c = to_matrix(&dump.c, "C", Some(k))?;
        let constraint: ConstraintSpec = dump.constraint.parse()?;
        let mut design = Self::from_matrices(
            DVector::from_vec(dump.a.clone()),
            b,
            c,
            dump.t0,
            dump.controls_per_equation.clone(),
            dump.regime,
            constraint,
        )?;
        if !dump.scaling.is_empty() && dump.scaling != design.scaling {
            return Err(Error::Input("scaling in design file does not match its regime".into()));
        }
        if dump.feature_labels.len() == design.n_equations() {
            design.feature_labels = dump.feature_labels.clone();
        }
        if dump.donor_ids.len() == design.n_weights() {
            design.donor_ids = dump.donor_ids.clone();
        }
        if dump.block_factors.len() == design.n_equations() {
            design.block_factors = dump.block_factors.clone();
        }
        Ok(design)
    }
}

/// Serializable form of [`ScDesign`] with row-major matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignDump {
    pub a: Vec<f64>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    #[serde(default)]
    pub scaling: Vec<f64>,
    pub t0: usize,
    pub controls_per_equation: Vec<usize>,
    #[serde(default)]
    pub regime: Regime,
    pub constraint: String,
    #[serde(default)]
    pub feature_labels: Vec<String>,
    #[serde(default)]
    pub donor_ids: Vec<String>,
    #[serde(default)]
    pub block_factors: Vec<f64>,
}

/// Stacks the pre-treatment panel into a design.
pub fn build_design(
    panel: &PanelDataset,
    features: &[String],
    controls: &ControlSpec,
    regime: Regime,
    constraint: ConstraintSpec,
    options: &DesignOptions,
) -> Result<ScDesign> {
    if features.is_empty() {
        return Err(Error::Config("at least one feature is required".into()));
    }
    let idx: Vec<usize> = features
        .iter()
        .map(|f| {
            panel
                .feature_index(f)
                .ok_or_else(|| Error::Config(format!("feature '{}' not present in panel", f)))
        })
        .collect::<Result<_>>()?;
    let m = idx.len();
    let t0 = panel.t0();
    let j = panel.n_donors();
    let intercepts = controls.resolve(m)?;
    if !options.equation_weights.is_empty() && options.equation_weights.len() != m {
        return Err(Error::Config(format!(
            "{} equation weights given for {} equations",
            options.equation_weights.len(),
            m
        )));
    }
    if options.equation_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::Config("equation weights must be positive".into()));
    }
    let factors: Vec<f64> = (0..m)
        .map(|l| {
            let mut f = options.equation_weights.get(l).map_or(1.0, |w| w.sqrt());
            if options.standardize {
                let pooled: Vec<f64> = (0..=j)
                    .flat_map(|u| (0..t0).map(move |t| (u, t)))
                    .map(|(u, t)| panel.value(u, t, idx[l]))
                    .collect();
                let sd = stats::sample_sd(&pooled);
                if sd > 0.0 {
                    f /= sd;
                }
            }
            f
        })
        .collect();
    let controls_per_equation: Vec<usize> = intercepts.iter().map(|&i| i as usize).collect();
    let k: usize = controls_per_equation.iter().sum();
    let rows = t0 * m;
    let mut a = DVector::zeros(rows);
    let mut b = DMatrix::zeros(rows, j);
    let mut c = DMatrix::zeros(rows, k);
    let mut col = 0;
    for (l, &f) in idx.iter().enumerate() {
        for t in 0..t0 {
            let row = t + l * t0;
            a[row] = factors[l] * panel.value(0, t, f);
            for d in 0..j {
                b[(row, d)] = factors[l] * panel.value(d + 1, t, f);
            }
            if intercepts[l] {
                c[(row, col)] = factors[l];
            }
        }
        col += controls_per_equation[l];
    }
    let mut design = ScDesign::from_matrices(a, b, c, t0, controls_per_equation, regime, constraint)?;
    design.feature_labels = features.to_vec();
    design.donor_ids = panel.donor_ids().to_vec();
    design.block_factors = factors;
    Ok(design)
}

/// Predictor `p_T = (x_T', g_T')'` for one post-treatment period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorVector {
    pub x: Vec<f64>,
    pub g: Vec<f64>,
    pub period: i64,
    pub y1_observed: Option<f64>,
}

impl PredictorVector {
    pub fn p(&self) -> Vec<f64> {
        let mut p = self.x.clone();
        p.extend_from_slice(&self.g);
        p
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictorSpec {
    /// Feature whose post-period donor values form `x_T`; defaults to the
    /// first design feature.
    pub outcome_feature: Option<String>,
    pub x_override: Option<Vec<f64>>,
    pub g_override: Option<Vec<f64>>,
    /// Adds `c` times the pre-period sample standard deviation of the given
    /// donor's outcome to that donor's coordinate of `x_T`.
    pub shift: Option<(usize, f64)>,
}

pub fn build_predictor(
    panel: &PanelDataset,
    design: &ScDesign,
    period: i64,
    spec: &PredictorSpec,
) -> Result<PredictorVector> {
    let t = panel
        .period_index(period)
        .ok_or_else(|| Error::Range(format!("period {} not in panel", period)))?;
    if t < panel.t0() {
        return Err(Error::Range(format!("period {} is not a post-treatment period", period)));
    }
    let outcome = spec.outcome_feature.clone().unwrap_or_else(|| design.feature_labels[0].clone());
    let f = panel
        .feature_index(&outcome)
        .ok_or_else(|| Error::Config(format!("feature '{}' not present in panel", outcome)))?;
    let j = design.n_weights();
    if panel.n_donors() != j {
        return Err(Error::Dimension("panel and design donor counts differ".into()));
    }
    let mut x = match &spec.x_override {
        Some(x) if x.len() != j => {
            return Err(Error::Dimension(format!("x_T override has length {}, expected {}", x.len(), j)))
        }
        Some(x) => x.clone(),
        None => (0..j).map(|d| panel.value(d + 1, t, f)).collect(),
    };
    if let Some((donor, c)) = spec.shift {
        if donor >= j {
            return Err(Error::Range(format!("shift donor {} out of range", donor)));
        }
        let pre: Vec<f64> = panel.series(donor + 1, f)[..panel.t0()].to_vec();
        x[donor] += c * stats::sample_sd(&pre);
    }
    let k = design.n_controls();
    let g = match &spec.g_override {
        Some(g) if g.len() != k => {
            return Err(Error::Dimension(format!("g_T override has length {}, expected {}", g.len(), k)))
        }
        Some(g) => g.clone(),
        None => {
            let eq = design.feature_labels.iter().position(|l| *l == outcome);
            let mut g = vec![0.0; k];
            if let Some(l) = eq {
                let off = design.control_offset(l);
                for v in &mut g[off..off + design.controls_per_equation[l]] {
                    *v = 1.0;
                }
            }
            g
        }
    };
    Ok(PredictorVector { x, g, period, y1_observed: Some(panel.value(0, t, f)) })
}
