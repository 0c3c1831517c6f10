use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use clonesim::fit::{fit as run_fit, FitControl, FitProblem, FitResult, FreeParam, IterationLog, Termination};
use clonesim::kernel::{CohortSelector, ModelParams};
use clonesim::scenarios::{
    build_experiment, division_profile, experiment_arms, fold_difference, recruitment_fraction,
    recruitment_fraction_at, recruitment_regression, run_many, run_with, Arm, Denominator, Experiment,
    ScenarioSpec, SimulationResult,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::table::{num, read_data, write_data, write_trajectory};

fn sink(config: &RunConfig) -> Result<Box<dyn Write>, CliError> {
    Ok(match &config.output.path {
        Some(path) => Box::new(BufWriter::new(File::create(path).map_err(|e| {
            CliError::Config(format!("cannot create {}: {e}", path.display()))
        })?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn dump(config: &RunConfig) -> Result<(), CliError> {
    let mut out = io::stdout().lock();
    out.write_all(config.to_toml()?.as_bytes())?;
    Ok(())
}

pub fn simulate(config: &RunConfig) -> Result<(), CliError> {
    let spec = config.scenario()?;
    let result = run_with(&spec, &config.run_options())?;
    let mut out = sink(config)?;
    write_trajectory(&mut out, &result, config.output.grid)?;
    out.flush()?;
    Ok(())
}

fn preset_specs(config: &RunConfig, experiment: Experiment, params: ModelParams) -> Result<Vec<(Arm, ScenarioSpec)>, CliError> {
    experiment_arms(experiment)
        .into_iter()
        .map(|arm| {
            let mut spec = build_experiment(experiment, arm)?.with_params(params);
            if let Some(dose) = config.scenario.antigen_dose {
                spec.antigen.dose = dose;
            }
            Ok((arm, spec))
        })
        .collect()
}

fn run_arms(config: &RunConfig, specs: &[(Arm, ScenarioSpec)]) -> Result<Vec<SimulationResult>, CliError> {
    let just_specs: Vec<ScenarioSpec> = specs.iter().map(|(_, s)| s.clone()).collect();
    run_many(&just_specs, &config.run_options())
        .into_iter()
        .map(|r| r.map_err(CliError::from))
        .collect()
}

pub fn report(config: &RunConfig) -> Result<(), CliError> {
    let experiment = config.experiment()?;
    let specs = preset_specs(config, experiment, config.params)?;
    let results = run_arms(config, &specs)?;
    let tracked = CohortSelector::One(0);

    let mut w = csv::Writer::from_writer(sink(config)?);
    w.write_record(["experiment", "arm", "quantity", "time_h", "value"])?;
    let tag = experiment.tag();
    let mut row = |arm: &str, quantity: &str, t: f64, v: f64| {
        w.write_record([tag, arm, quantity, &num(t), &num(v)])
    };

    match experiment {
        Experiment::One => {
            let mut pairs = Vec::new();
            for ((arm, spec), res) in specs.iter().zip(&results) {
                for &t in &spec.observation_times {
                    row(&arm.to_string(), "total", t, res.total_at(t, CohortSelector::All)?)?;
                }
                let pct = recruitment_fraction(res, tracked, Denominator::InitialNaive)?;
                row(&arm.to_string(), "recruitment", res.horizon(), pct)?;
                if let Arm::Precursors(n0) = arm {
                    pairs.push((*n0, pct));
                }
            }
            let by_dose: Vec<(f64, &SimulationResult)> = pairs.iter().map(|p| p.0).zip(&results).collect();
            let lo = pairs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let hi = pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            let label = format!("{hi}/{lo}");
            for &t in &specs[0].1.observation_times {
                row(&label, "fold_difference", t, fold_difference(&by_dose, t)?)?;
            }
            let reg = recruitment_regression(&pairs)?;
            let t = specs[0].1.horizon;
            row("all", "regression_slope", t, reg.slope)?;
            row("all", "regression_intercept", t, reg.intercept)?;
            row("all", "regression_r_squared", t, reg.r_squared)?;
        }
        _ => {
            for ((arm, spec), res) in specs.iter().zip(&results) {
                let a = arm.to_string();
                let t = spec.horizon;
                row(&a, "recruitment", t, recruitment_fraction_at(res, t, tracked, Denominator::SuppliedDose)?)?;
                for (i, share) in division_profile(res, t, tracked)?.iter().enumerate() {
                    row(&a, &format!("profile_division_{}", i + 1), t, *share)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct FitReport {
    summary: FitSummary,
    parameters: Vec<ParameterRow>,
    /// Full parameter set at the estimate.
    params: ModelParams,
    iterations: Vec<IterationLog>,
}

#[derive(Debug, Serialize)]
struct FitSummary {
    termination: Termination,
    converged: bool,
    iterations: usize,
    evaluations: usize,
    records: usize,
    initial_cost: f64,
    final_cost: f64,
    residual_norm: f64,
    gradient_norm: f64,
    solver_failed: bool,
    starts: usize,
}

#[derive(Debug, Serialize)]
struct ParameterRow {
    name: String,
    estimate: f64,
    initial: f64,
    lower_bound: f64,
    upper_bound: f64,
    ci95_lower: f64,
    ci95_upper: f64,
    ci_bounded: bool,
}

fn perturbed_starts(problem: &FitProblem, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::<f64>::new(0.0, 0.2).expect("valid spread");
    (0..count)
        .map(|_| {
            let guess: Vec<f64> = problem.initial.iter().map(|&x| x * normal.sample(&mut rng).exp()).collect();
            problem.clamp(&guess)
        })
        .collect()
}

pub fn fit(
    config: &RunConfig,
    data_path: &Path,
    free: Vec<FreeParam>,
    starts: usize,
    seed: u64,
    max_iterations: usize,
) -> Result<(), CliError> {
    let file = File::open(data_path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", data_path.display())))?;
    let data = read_data(file)?;
    let free = if free.is_empty() { FreeParam::ALL.to_vec() } else { free };
    let control = FitControl { max_iterations, step: config.solver.step, ..FitControl::default() };
    let problem = FitProblem::new(config.params, free, data)?.with_control(control);

    let mut best: FitResult = run_fit(&problem)?;
    for guess in perturbed_starts(&problem, starts, seed) {
        let candidate = run_fit(&problem.clone().with_initial(guess)?)?;
        if candidate.report.final_cost < best.report.final_cost {
            best = candidate;
        }
    }

    let report = FitReport {
        summary: FitSummary {
            termination: best.report.termination,
            converged: best.report.converged,
            iterations: best.report.iterations,
            evaluations: best.report.evaluations,
            records: best.residuals.len(),
            initial_cost: best.report.initial_cost,
            final_cost: best.report.final_cost,
            residual_norm: best.residual_norm,
            gradient_norm: best.report.gradient_norm,
            solver_failed: best.solver_failed,
            starts: starts + 1,
        },
        parameters: best
            .free
            .iter()
            .enumerate()
            .map(|(i, p)| ParameterRow {
                name: p.name().to_string(),
                estimate: best.estimates[i],
                initial: problem.initial[i],
                lower_bound: problem.bounds[i].0,
                upper_bound: problem.bounds[i].1,
                ci95_lower: best.intervals[i].lower,
                ci95_upper: best.intervals[i].upper,
                ci_bounded: best.intervals[i].bounded,
            })
            .collect(),
        params: best.params,
        iterations: best.report.log.clone(),
    };
    let text = toml::to_string(&report).map_err(|e| CliError::Config(e.to_string()))?;
    let mut out = sink(config)?;
    out.write_all(text.as_bytes())?;
    out.flush()?;
    if best.solver_failed {
        return Err(CliError::Solver("the model could not be integrated at the estimate".into()));
    }
    if !best.report.converged {
        return Err(CliError::NotConverged(format!("{:?}", best.report.termination)));
    }
    Ok(())
}

/// Axis of a sweep: `KEY=START:STOP:COUNT` (inclusive, evenly spaced) or
/// `KEY=V1,V2,...`.
pub fn parse_grid(spec: &str) -> Result<(String, Vec<f64>), CliError> {
    let bad = || CliError::Config(format!("malformed grid '{spec}'"));
    let (key, values) = spec.split_once('=').ok_or_else(bad)?;
    let parts: Vec<&str> = values.split(':').collect();
    let values = match parts.as_slice() {
        [start, stop, count] => {
            let start: f64 = start.trim().parse().map_err(|_| bad())?;
            let stop: f64 = stop.trim().parse().map_err(|_| bad())?;
            let count: usize = count.trim().parse().map_err(|_| bad())?;
            match count {
                0 => return Err(bad()),
                1 => vec![start],
                n => (0..n).map(|i| start + (stop - start) * i as f64 / (n - 1) as f64).collect(),
            }
        }
        [list] => list
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err(bad()),
    };
    Ok((key.trim().to_string(), values))
}

pub fn sweep(config: &RunConfig, grids: &[String]) -> Result<(), CliError> {
    let experiment = config.experiment()?;
    let axes = grids.iter().map(|g| parse_grid(g)).collect::<Result<Vec<_>, _>>()?;

    let mut points: Vec<Vec<f64>> = vec![Vec::new()];
    for (_, values) in &axes {
        points = points
            .into_iter()
            .flat_map(|p| values.iter().map(move |&v| [p.clone(), vec![v]].concat()))
            .collect();
    }

    let mut jobs = Vec::new();
    for point in &points {
        let mut c = config.clone();
        for ((key, _), v) in axes.iter().zip(point) {
            c.set_param(&format!("{key}={v}"))?;
        }
        for (arm, spec) in preset_specs(config, experiment, c.params)? {
            jobs.push((point.clone(), arm, spec));
        }
    }
    let specs: Vec<ScenarioSpec> = jobs.iter().map(|j| j.2.clone()).collect();
    let results = run_many(&specs, &config.run_options());

    let mut w = csv::Writer::from_writer(sink(config)?);
    let mut header: Vec<String> = axes.iter().map(|(k, _)| k.clone()).collect();
    header.extend(["arm", "time_h", "total", "recruitment"].map(String::from));
    w.write_record(&header)?;
    for ((point, arm, spec), result) in jobs.iter().zip(results) {
        let result = result?;
        for &t in &spec.observation_times {
            let mut row: Vec<String> = point.iter().map(|&v| num(v)).collect();
            row.push(arm.to_string());
            row.push(num(t));
            row.push(num(result.total_at(t, CohortSelector::One(0))?));
            let pct = recruitment_fraction_at(&result, t, CohortSelector::One(0), Denominator::Transferred)?;
            row.push(num(pct));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn synthesize(config: &RunConfig, noise: f64, seed: u64) -> Result<(), CliError> {
    let clean = clonesim::fit::synthesize_clean(&config.params, &config.run_options())?;
    let data = clonesim::fit::apply_noise(&clean, noise, seed)?;
    let mut out = sink(config)?;
    write_data(&mut out, &data)?;
    out.flush()?;
    Ok(())
}
