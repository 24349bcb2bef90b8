use std::path::{Path, PathBuf};

use serde::Serialize;
use synthpi_core::constraint_sets::ConstraintSpec;
use synthpi_core::insample::{self, InSampleOptions, InSampleResult, RhoPolicy, SigmaMethod};
use synthpi_core::intervals::{self, PredictionInterval, UncertaintyBounds};
use synthpi_core::montecarlo::{self, Conditioning, CoverageOptions, DGPSpec, Method};
use synthpi_core::nalgebra::DMatrix;
use synthpi_core::outsample::{self, Approach, ErrorData, OutSampleOptions, OutSampleResult};
use synthpi_core::panel_io::{
    self, ControlSpec, CsvFormat, DesignOptions, PanelDataset, PanelSchema, PredictorSpec, Regime, ScDesign,
};
use synthpi_core::qclp::{self, ConicProblem};
use synthpi_core::sc_fit::{self, FittedSC};

use crate::{CliError, DataArgs, FitArgs, McArgs, PiArgs, QclpArgs, SimulateArgs};

fn parse<T: std::str::FromStr<Err = synthpi_core::Error>>(s: &str) -> Result<T, CliError> {
    s.parse::<T>().map_err(|e| CliError::usage(e.to_string()))
}

fn write_text(path: Option<&PathBuf>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text)
            .map_err(|e| synthpi_core::Error::Io { path: p.display().to_string(), source: e }.into()),
        None => {
            print!("{}", text);
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| CliError { code: 1, message: e.to_string() })
}

struct Loaded {
    panel: PanelDataset,
    design: ScDesign,
    fit: FittedSC,
}

fn load(args: &DataArgs) -> Result<Loaded, CliError> {
    let mut schema = PanelSchema::new(args.treated.clone(), args.post_start);
    schema.unit_col = args.unit_col.clone();
    schema.period_col = args.period_col.clone();
    schema.feature_col = args.feature_col.clone();
    schema.value_col = args.value_col.clone();
    schema.format = match args.format.as_str() {
        "long" => CsvFormat::Long,
        "wide" => CsvFormat::Wide,
        other => return Err(CliError::usage(format!("unknown format '{}'", other))),
    };
    let panel = panel_io::load_panel(&args.input, &schema)?;
    let features = if args.features.is_empty() { panel.feature_labels().to_vec() } else { args.features.clone() };
    let controls = if args.intercept { ControlSpec::intercepts() } else { ControlSpec::none() };
    let constraint: ConstraintSpec = parse(&args.constraint)?;
    let regime: Regime = parse(&args.regime)?;
    let options = DesignOptions { standardize: args.standardize, equation_weights: vec![] };
    let design = panel_io::build_design(&panel, &features, &controls, regime, constraint, &options)?;
    let fit = sc_fit::fit(&design)?;
    Ok(Loaded { panel, design, fit })
}

#[derive(Serialize)]
struct DonorWeight {
    donor: String,
    weight: f64,
}

#[derive(Serialize)]
struct FitReport {
    constraint: String,
    regime: Regime,
    t0: usize,
    features: Vec<String>,
    weights: Vec<DonorWeight>,
    controls: Vec<f64>,
    objective: f64,
    iterations: usize,
    kkt_residual: f64,
    converged: bool,
    feasible: bool,
}

fn fit_report(l: &Loaded) -> FitReport {
    let fit = &l.fit;
    FitReport {
        constraint: l.design.constraint.to_string(),
        regime: l.design.regime,
        t0: l.design.t0,
        features: l.design.feature_labels.clone(),
        weights: l
            .design
            .donor_ids
            .iter()
            .zip(fit.weights())
            .map(|(d, w)| DonorWeight { donor: d.clone(), weight: *w })
            .collect(),
        controls: fit.controls().to_vec(),
        objective: fit.objective,
        iterations: fit.solver_report.iterations,
        kkt_residual: fit.solver_report.kkt_residual,
        converged: fit.solver_report.converged,
        feasible: l.design.constraint.contains(fit.weights(), fit.controls(), 1e-8),
    }
}

pub fn fit(args: &FitArgs) -> Result<(), CliError> {
    let loaded = load(&args.data)?;
    write_text(args.out.as_ref(), &to_json(&fit_report(&loaded))?)
}

#[derive(Serialize)]
struct InSampleSummary {
    rho: f64,
    sigma_method: String,
    sigma_min_eigenvalue: f64,
    sigma_clipped: bool,
    selected_donors: Vec<String>,
}

#[derive(Serialize)]
struct ApproachRecord {
    approach: String,
    #[serde(rename = "M2")]
    m2: OutSampleResult,
    counterfactual: PredictionInterval,
    tau: PredictionInterval,
}

#[derive(Serialize)]
struct SensitivityRecord {
    factor: f64,
    #[serde(rename = "M2")]
    m2: OutSampleResult,
    counterfactual: PredictionInterval,
    tau: PredictionInterval,
}

#[derive(Serialize)]
struct PeriodRecord {
    period: i64,
    y_hat: f64,
    y_observed: Option<f64>,
    tau_hat: Option<f64>,
    #[serde(rename = "M1")]
    m1: InSampleResult,
    in_sample_only: PredictionInterval,
    approaches: Vec<ApproachRecord>,
    sensitivity: Vec<SensitivityRecord>,
}

#[derive(Serialize)]
struct PiReport {
    seed: u64,
    alpha1: f64,
    alpha2: f64,
    draws: usize,
    mean_degree: usize,
    fit: FitReport,
    in_sample: InSampleSummary,
    periods: Vec<PeriodRecord>,
}

/// Pre-period outcome residuals and selected donor outcomes, in panel units.
fn error_regressors(l: &Loaded, selected: &[usize]) -> (Vec<f64>, DMatrix<f64>, usize) {
    let t0 = l.design.t0;
    let factor = l.design.block_factors.first().copied().unwrap_or(1.0);
    let e: Vec<f64> = l.fit.residuals[..t0].iter().map(|r| r / factor).collect();
    let f = l.panel.feature_index(&l.design.feature_labels[0]).unwrap_or(0);
    let x = DMatrix::from_fn(t0, selected.len(), |t, j| l.panel.value(selected[j] + 1, t, f));
    (e, x, f)
}

fn csv_row(out: &mut String, period: i64, section: &str, pi: &PredictionInterval) {
    let target = match pi.target {
        intervals::Target::Tau => "tau",
        intervals::Target::Counterfactual => "y0",
    };
    let c = &pi.components;
    out.push_str(&format!(
        "{},{},{},{},{},{},{},{},{},{},{}\n",
        period,
        section,
        target,
        pi.point,
        pi.lower,
        pi.upper,
        c.in_sample.lower,
        c.in_sample.upper,
        c.out_of_sample.lower,
        c.out_of_sample.upper,
        pi.level()
    ));
}

pub fn pi(args: &PiArgs, seed: u64) -> Result<(), CliError> {
    if !(args.alpha1 > 0.0 && args.alpha2 >= 0.0 && args.alpha1 + args.alpha2 < 1.0) {
        return Err(CliError::usage("need alpha1 > 0, alpha2 >= 0 and alpha1 + alpha2 < 1"));
    }
    if args.sensitivity && args.alpha2 == 0.0 {
        return Err(CliError::usage("sensitivity analysis needs alpha2 > 0"));
    }
    let approaches: Vec<Approach> = args.approaches.iter().map(|a| parse(a)).collect::<Result<_, _>>()?;
    let loaded = load(&args.data)?;
    let opts = InSampleOptions {
        sigma_method: parse::<SigmaMethod>(&args.sigma)?,
        mean_degree: args.mean_degree,
        rho: parse::<RhoPolicy>(&args.rho)?,
        alpha1: args.alpha1,
        draws: args.draws,
        seed,
    };
    let ps = loaded
        .panel
        .post_periods()
        .iter()
        .map(|&t| panel_io::build_predictor(&loaded.panel, &loaded.design, t, &PredictorSpec::default()))
        .collect::<synthpi_core::Result<Vec<_>>>()?;
    let (plan, m1s) = insample::run(&loaded.design, &loaded.fit, &ps, &opts)?;
    let (e, x, _) = error_regressors(&loaded, &plan.selected);
    let out_opts = OutSampleOptions { degree: args.mean_degree, bias_correct: true, sd_factor: args.sd_factor };
    let mut periods = Vec::with_capacity(ps.len());
    let mut csv = String::from("period,section,target,point,lower,upper,M1_L,M1_U,M2_L,M2_U,level\n");
    for (p, m1) in ps.iter().zip(m1s) {
        let y_hat = sc_fit::predict(&loaded.fit, p)?;
        let tau_hat = p.y1_observed.map(|y| y - y_hat);
        let x_t: Vec<f64> = plan.selected.iter().map(|&j| p.x[j]).collect();
        let data = ErrorData { e: &e, x: &x, x_t: &x_t, labels: &[] };
        let b1 = UncertaintyBounds::from(&m1);
        let in_only = intervals::assemble_counterfactual(y_hat, &b1, &UncertaintyBounds::zero("none"))?;
        csv_row(&mut csv, p.period, "in_sample", &in_only);
        let tau_point = tau_hat.unwrap_or(f64::NAN);
        let mut records = Vec::new();
        for &a in &approaches {
            let m2 = if args.alpha2 == 0.0 { OutSampleResult::zero(a) } else { outsample::bound(a, &data, args.alpha2, &out_opts)? };
            let b2 = UncertaintyBounds::from(&m2);
            let cf = intervals::assemble_counterfactual(y_hat, &b1, &b2)?;
            let tau = intervals::assemble_tau(tau_point, &b1, &b2)?;
            csv_row(&mut csv, p.period, &a.to_string(), &cf);
            csv_row(&mut csv, p.period, &a.to_string(), &tau);
            records.push(ApproachRecord { approach: a.to_string(), m2, counterfactual: cf, tau });
        }
        let mut sensitivity = Vec::new();
        if args.sensitivity {
            let model = outsample::fit_residual_model(&e, &x, &[], args.mean_degree, true)?;
            let grid = outsample::sensitivity_grid(model.mean_at(&x_t), model.sd_at(&x_t), args.alpha2, &args.sensitivity_factors)?;
            for (factor, m2) in grid {
                let b2 = UncertaintyBounds::from(&m2);
                let cf = intervals::assemble_counterfactual(y_hat, &b1, &b2)?;
                let tau = intervals::assemble_tau(tau_point, &b1, &b2)?;
                let section = format!("sens:{}", factor);
                csv_row(&mut csv, p.period, &section, &cf);
                csv_row(&mut csv, p.period, &section, &tau);
                sensitivity.push(SensitivityRecord { factor, m2, counterfactual: cf, tau });
            }
        }
        periods.push(PeriodRecord {
            period: p.period,
            y_hat,
            y_observed: p.y1_observed,
            tau_hat,
            m1,
            in_sample_only: in_only,
            approaches: records,
            sensitivity,
        });
    }
    let report = PiReport {
        seed,
        alpha1: args.alpha1,
        alpha2: args.alpha2,
        draws: args.draws,
        mean_degree: args.mean_degree,
        fit: fit_report(&loaded),
        in_sample: InSampleSummary {
            rho: plan.delta_star.rho,
            sigma_method: plan.sigma.method.to_string(),
            sigma_min_eigenvalue: plan.sigma.min_eigenvalue,
            sigma_clipped: plan.sigma.clipped,
            selected_donors: plan.selected.iter().map(|&j| loaded.design.donor_ids[j].clone()).collect(),
        },
        periods,
    };
    let json = to_json(&report)?;
    if args.out_json.is_none() && args.out_csv.is_none() {
        return write_text(None, &json);
    }
    if let Some(p) = &args.out_json {
        write_text(Some(p), &json)?;
    }
    if let Some(p) = &args.out_csv {
        write_text(Some(p), &csv)?;
    }
    Ok(())
}

pub fn mc(args: &McArgs, seed: u64) -> Result<(), CliError> {
    let methods: Vec<Method> = args.methods.iter().map(|m| parse(m)).collect::<Result<_, _>>()?;
    let conditioning: Conditioning = parse(&args.mode)?;
    let spec = DGPSpec { t0: args.t0, misspecified: args.misspec, conditioning, ..DGPSpec::with_rho(args.rho) };
    let opts = CoverageOptions {
        alpha1: args.alpha1,
        alpha2: args.alpha2,
        draws: args.draws,
        mean_degree: args.mean_degree,
        ..CoverageOptions::default()
    };
    let table = montecarlo::run_coverage(&spec, &methods, args.reps, seed, &opts)?;
    write_text(args.out.as_ref(), &table.to_csv())
}

pub fn qclp_solve(args: &QclpArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.problem)
        .map_err(|e| synthpi_core::Error::Io { path: args.problem.display().to_string(), source: e })?;
    let problem: ConicProblem = serde_json::from_str(&text)
        .map_err(|e| synthpi_core::Error::Data(format!("{}: {}", args.problem.display(), e)))?;
    let solution =
        if args.bisection { qclp::solve_bisection(&problem, args.tol)? } else { qclp::solve(&problem, args.tol)? };
    write_text(args.out.as_ref(), &to_json(&solution)?)
}

pub fn simulate(args: &SimulateArgs, seed: u64) -> Result<(), CliError> {
    let spec = DGPSpec { t0: args.t0, t1: args.t1, misspecified: args.misspec, ..DGPSpec::with_rho(args.rho) };
    let (panel, truth) = montecarlo::generate(&spec, seed)?;
    let panel = with_effect(&panel, args.effect)?;
    let out = args.out.as_deref().unwrap_or(Path::new("panel.csv"));
    panel.write_long_csv(out)?;
    if let Some(p) = &args.truth {
        write_text(Some(p), &to_json(&truth)?)?;
    }
    Ok(())
}

fn with_effect(panel: &PanelDataset, effect: f64) -> Result<PanelDataset, CliError> {
    let (n, t, m) = (panel.unit_ids().len(), panel.periods().len(), panel.n_features());
    let mut values = Vec::with_capacity(n * t * m);
    for u in 0..n {
        for s in 0..t {
            for f in 0..m {
                let bump = if u == 0 && s >= panel.t0() { effect } else { 0.0 };
                values.push(panel.value(u, s, f) + bump);
            }
        }
    }
    Ok(PanelDataset::new(
        panel.unit_ids().to_vec(),
        panel.periods().to_vec(),
        panel.feature_labels().to_vec(),
        values,
        panel.t0(),
    )?)
}
