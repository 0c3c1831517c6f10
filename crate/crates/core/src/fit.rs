//! Simultaneous bounded least-squares estimation of kinetic parameters
//! against records from all three experiments.
//!
//! Residuals are `sqrt(1 / n_block) * weight * (model - datum)`, where a block
//! is one (experiment, observable kind) pair, so every block contributes on
//! the scale of its mean squared error. The minimiser is a projected
//! Levenberg-Marquardt iteration in parameter space scaled by the base values,
//! with forward-difference Jacobians.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::kernel::{CohortSelector, ModelParams};
use crate::scenarios::{
    build_experiment, division_profile, experiment_arms, recruitment_fraction_at, run_with, Arm, Denominator,
    Experiment, RunOptions, SimulationResult,
};

/// Residual assigned to every record of a scenario whose simulation failed.
pub const FAILURE_PENALTY: f64 = 1e6;

/// Divisions sampled by [`synthesize_data`] for each profile.
pub const SYNTHETIC_PROFILE_DIVISIONS: usize = 8;

/// Smallest percentage used as an error scale by [`synthesize_clean`].
pub const MIN_RELATIVE_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObservableKind {
    /// `log10` of the tracked cohort's total cells.
    LogCount,
    /// Recruitment percentage of the tracked cohort.
    Recruitment,
    /// Percentage of divided cells in one division peak (1-based).
    Profile { division: usize },
}

impl ObservableKind {
    fn block(&self) -> u8 {
        match self {
            ObservableKind::LogCount => 0,
            ObservableKind::Recruitment => 1,
            ObservableKind::Profile { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub experiment: Experiment,
    pub arm: Arm,
    pub kind: ObservableKind,
    /// Observation time (h).
    pub time: f64,
    pub value: f64,
    pub weight: f64,
}

fn arm_key(arm: &Arm) -> (u8, u64) {
    match arm {
        Arm::Precursors(n0) => (0, n0.to_bits()),
        Arm::Group(g) => (1, *g as u64),
    }
}

type ScenarioKey = (Experiment, (u8, u64));

fn scenario_key(r: &Record) -> ScenarioKey {
    (r.experiment, arm_key(&r.arm))
}

fn canonical_order(a: &Record, b: &Record) -> Ordering {
    a.experiment
        .cmp(&b.experiment)
        .then_with(|| match (a.arm, b.arm) {
            (Arm::Precursors(x), Arm::Precursors(y)) => x.total_cmp(&y),
            _ => arm_key(&a.arm).cmp(&arm_key(&b.arm)),
        })
        .then_with(|| a.kind.cmp(&b.kind))
        .then_with(|| a.time.total_cmp(&b.time))
        .then_with(|| a.value.total_cmp(&b.value))
        .then_with(|| a.weight.total_cmp(&b.weight))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataSet {
    pub records: Vec<Record>,
}

impl DataSet {
    pub fn new(records: Vec<Record>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::InvalidData("data set is empty".into()));
        }
        for (i, r) in self.records.iter().enumerate() {
            if !(r.weight.is_finite() && r.weight > 0.0) {
                return Err(Error::InvalidData(format!("record {i}: weight must be > 0")));
            }
            if !r.value.is_finite() || !r.time.is_finite() {
                return Err(Error::InvalidData(format!("record {i}: value and time must be finite")));
            }
            if let ObservableKind::Profile { division: 0 } = r.kind {
                return Err(Error::InvalidData(format!("record {i}: divisions are numbered from 1")));
            }
            let spec = build_experiment(r.experiment, r.arm)
                .map_err(|e| Error::InvalidData(format!("record {i}: {e}")))?;
            if r.time > spec.horizon || r.time < spec.start_time() {
                return Err(Error::InvalidData(format!(
                    "record {i}: time {} outside [{}, {}]",
                    r.time,
                    spec.start_time(),
                    spec.horizon
                )));
            }
        }
        Ok(())
    }

    /// Records sorted into a fixed order independent of input order.
    pub fn canonical(&self) -> DataSet {
        let mut records = self.records.clone();
        records.sort_by(canonical_order);
        DataSet { records }
    }

    pub fn extend(&mut self, other: &DataSet) {
        self.records.extend_from_slice(&other.records);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FreeParam {
    #[serde(rename = "r_e")]
    RE,
    #[serde(rename = "r_N")]
    RN,
    #[serde(rename = "g")]
    G,
    #[serde(rename = "d")]
    D,
    #[serde(rename = "tau")]
    Tau,
    #[serde(rename = "s")]
    S,
}

impl FreeParam {
    pub const ALL: [FreeParam; 6] = [FreeParam::RE, FreeParam::RN, FreeParam::G, FreeParam::D, FreeParam::Tau, FreeParam::S];

    pub fn name(&self) -> &'static str {
        match self {
            FreeParam::RE => "r_e",
            FreeParam::RN => "r_N",
            FreeParam::G => "g",
            FreeParam::D => "d",
            FreeParam::Tau => "tau",
            FreeParam::S => "s",
        }
    }

    pub fn get(&self, p: &ModelParams) -> f64 {
        match self {
            FreeParam::RE => p.r_e,
            FreeParam::RN => p.r_n,
            FreeParam::G => p.g,
            FreeParam::D => p.d,
            FreeParam::Tau => p.tau,
            FreeParam::S => p.s,
        }
    }

    pub fn set(&self, p: &mut ModelParams, v: f64) {
        match self {
            FreeParam::RE => p.r_e = v,
            FreeParam::RN => p.r_n = v,
            FreeParam::G => p.g = v,
            FreeParam::D => p.d = v,
            FreeParam::Tau => p.tau = v,
            FreeParam::S => p.s = v,
        }
    }

    /// `[1e-6, 10 x reference]`, with `g` further capped so that `g M < 1`.
    pub fn default_bounds(&self, reference: &ModelParams) -> (f64, f64) {
        let mut upper = 10.0 * self.get(reference).abs().max(1e-6);
        if *self == FreeParam::G {
            upper = upper.min((1.0 - 1e-9) / reference.m as f64);
        }
        (1e-6, upper)
    }
}

impl fmt::Display for FreeParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FreeParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FreeParam::ALL
            .iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .copied()
            .ok_or_else(|| Error::InvalidParams(format!("'{s}' is not a fittable parameter")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitControl {
    pub max_iterations: usize,
    /// Scaled projected-gradient tolerance.
    pub gtol: f64,
    /// Relative step tolerance.
    pub xtol: f64,
    /// Relative cost-reduction tolerance.
    pub ftol: f64,
    pub initial_damping: f64,
    pub central_differences: bool,
    /// Solver step; defaults to `tau / 64` of the base parameters, held fixed
    /// during the fit so that the discretisation does not move with `tau`.
    pub step: Option<f64>,
}

impl Default for FitControl {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gtol: 1e-10,
            xtol: 1e-8,
            ftol: 1e-10,
            initial_damping: 1e-3,
            central_differences: false,
            step: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitProblem {
    pub free: Vec<FreeParam>,
    pub bounds: Vec<(f64, f64)>,
    pub initial: Vec<f64>,
    /// Values of the fixed parameters (and the scale of the free ones).
    pub base: ModelParams,
    /// Records in canonical order.
    pub data: DataSet,
    pub control: FitControl,
}

impl FitProblem {
    /// Free parameters start at their base values with default bounds.
    pub fn new(base: ModelParams, free: Vec<FreeParam>, data: DataSet) -> Result<Self> {
        base.validate()?;
        data.validate()?;
        let mut seen = free.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != free.len() {
            return Err(Error::InvalidParams("free parameters must be distinct".into()));
        }
        for r in &data.records {
            if let ObservableKind::Profile { division } = r.kind {
                if division > base.k {
                    return Err(Error::InvalidData(format!("division {division} exceeds K = {}", base.k)));
                }
            }
        }
        let bounds = free.iter().map(|p| p.default_bounds(&base)).collect();
        let initial = free.iter().map(|p| p.get(&base)).collect();
        let problem = Self { free, bounds, initial, base, data: data.canonical(), control: FitControl::default() };
        problem.check()?;
        Ok(problem)
    }

    pub fn with_initial(mut self, initial: Vec<f64>) -> Result<Self> {
        self.initial = initial;
        self.check()?;
        Ok(self)
    }

    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Result<Self> {
        self.bounds = bounds;
        self.check()?;
        Ok(self)
    }

    pub fn with_control(mut self, control: FitControl) -> Self {
        self.control = control;
        self
    }

    /// Clamp a guess into the bounds.
    pub fn clamp(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().zip(&self.bounds).map(|(&v, &(lo, hi))| v.clamp(lo, hi)).collect()
    }

    fn check(&self) -> Result<()> {
        if self.bounds.len() != self.free.len() || self.initial.len() != self.free.len() {
            return Err(Error::InvalidParams("bounds and initial guess must match the free parameters".into()));
        }
        for ((p, &(lo, hi)), &x) in self.free.iter().zip(&self.bounds).zip(&self.initial) {
            if lo.is_nan() || hi.is_nan() || lo >= hi {
                return Err(Error::InvalidParams(format!("{p}: lower bound must be below upper bound")));
            }
            if !(lo..=hi).contains(&x) {
                return Err(Error::InvalidParams(format!("{p}: initial value {x} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Full parameter set for a candidate vector.
    pub fn params_at(&self, theta: &[f64]) -> ModelParams {
        let mut p = self.base;
        for (f, &v) in self.free.iter().zip(theta) {
            f.set(&mut p, v);
        }
        p
    }

    fn solver_step(&self, params: &ModelParams) -> f64 {
        let h = self.control.step.unwrap_or(self.base.tau / crate::scenarios::STEPS_PER_TAU);
        h.min(params.tau.min(params.sigma))
    }

    fn scales(&self) -> Vec<f64> {
        self.free
            .iter()
            .zip(&self.initial)
            .map(|(p, &x0)| {
                let b = p.get(&self.base).abs();
                if b > 0.0 {
                    b
                } else {
                    x0.abs().max(1.0)
                }
            })
            .collect()
    }

    /// `sqrt(1 / n_block)` for each record.
    pub fn block_factors(&self) -> Vec<f64> {
        let mut counts: BTreeMap<(Experiment, u8), usize> = BTreeMap::new();
        for r in &self.data.records {
            *counts.entry((r.experiment, r.kind.block())).or_default() += 1;
        }
        self.data
            .records
            .iter()
            .map(|r| (1.0 / counts[&(r.experiment, r.kind.block())] as f64).sqrt())
            .collect()
    }
}

/// Residual vector and whether any scenario failed to integrate.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub values: Vec<f64>,
    pub solver_failed: bool,
}

impl Residuals {
    pub fn cost(&self) -> f64 {
        0.5 * self.values.iter().map(|r| r * r).sum::<f64>()
    }
}

fn observe(result: &SimulationResult, r: &Record) -> Result<f64> {
    let tracked = CohortSelector::One(0);
    match r.kind {
        ObservableKind::LogCount => Ok(result.total_at(r.time, tracked)?.log10()),
        ObservableKind::Recruitment => recruitment_fraction_at(result, r.time, tracked, Denominator::Transferred),
        ObservableKind::Profile { division } => {
            let profile = division_profile(result, r.time, tracked)?;
            Ok(profile[division - 1])
        }
    }
}

/// Weighted residuals, one per record of the problem in its canonical order.
///
/// Each (experiment, arm) scenario is simulated once. Scenarios run on the
/// rayon pool and the vector is assembled by record index.
pub fn residuals(theta: &[f64], problem: &FitProblem) -> Result<Residuals> {
    if theta.len() != problem.free.len() {
        return Err(Error::InvalidParams("candidate length differs from the free parameter count".into()));
    }
    if theta.iter().zip(&problem.bounds).any(|(&v, &(lo, hi))| !(lo..=hi).contains(&v)) {
        return Err(Error::InvalidParams("candidate lies outside the bounds".into()));
    }
    let params = problem.params_at(theta);
    let options = RunOptions { step: Some(problem.solver_step(&params)), verify: None };

    let mut groups: BTreeMap<ScenarioKey, (Arm, Vec<usize>)> = BTreeMap::new();
    for (i, r) in problem.data.records.iter().enumerate() {
        groups.entry(scenario_key(r)).or_insert_with(|| (r.arm, Vec::new())).1.push(i);
    }
    let jobs: Vec<(Experiment, Arm, Vec<usize>)> = groups.into_iter().map(|((e, _), (a, idx))| (e, a, idx)).collect();

    let outcomes: Vec<Option<Vec<(usize, f64)>>> = jobs
        .par_iter()
        .map(|(experiment, arm, idx)| {
            let spec = build_experiment(*experiment, *arm).ok()?.with_params(params);
            let sim = run_with(&spec, &options).ok()?;
            idx.iter()
                .map(|&i| {
                    let model = observe(&sim, &problem.data.records[i]).ok()?;
                    model.is_finite().then_some((i, model))
                })
                .collect()
        })
        .collect();

    let factors = problem.block_factors();
    let mut values = vec![0.0; problem.data.len()];
    let mut solver_failed = false;
    for ((_, _, idx), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Some(models) => {
                for (i, model) in models {
                    let r = &problem.data.records[i];
                    values[i] = factors[i] * r.weight * (model - r.value);
                }
            }
            None => {
                solver_failed = true;
                for &i in idx {
                    values[i] = FAILURE_PENALTY;
                }
            }
        }
    }
    Ok(Residuals { values, solver_failed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    NoFreeParameters,
    Gradient,
    StepSize,
    CostReduction,
    ZeroResidual,
    MaxIterations,
    /// The damping grew without producing an acceptable step.
    Stalled,
}

impl Termination {
    pub fn converged(&self) -> bool {
        !matches!(self, Termination::MaxIterations | Termination::Stalled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub cost: f64,
    pub gradient_norm: f64,
    pub damping: f64,
    pub accepted: bool,
    pub active_bounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub termination: Termination,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub gradient_norm: f64,
    pub log: Vec<IterationLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub half_width: f64,
    /// False when the Jacobian is rank deficient and no finite bound exists.
    pub bounded: bool,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    fn unbounded() -> Self {
        Self { lower: f64::NEG_INFINITY, upper: f64::INFINITY, half_width: f64::INFINITY, bounded: false }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub free: Vec<FreeParam>,
    pub estimates: Vec<f64>,
    pub params: ModelParams,
    pub residuals: Vec<f64>,
    pub residual_norm: f64,
    pub solver_failed: bool,
    /// Sensitivities `d r / d theta` at the estimate, one column per free parameter.
    pub jacobian: DMatrix<f64>,
    pub scales: Vec<f64>,
    /// Block balancing factor of each residual.
    pub balance: Vec<f64>,
    /// 95% intervals.
    pub intervals: Vec<Interval>,
    pub report: ConvergenceReport,
}

impl FitResult {
    pub fn dof(&self) -> isize {
        self.residuals.len() as isize - self.free.len() as isize
    }
}

fn jacobian(problem: &FitProblem, theta: &[f64], base: &[f64], evaluations: &mut usize) -> Result<DMatrix<f64>> {
    let n = base.len();
    let mut j = DMatrix::zeros(n, theta.len());
    for (col, &x) in theta.iter().enumerate() {
        let (lo, hi) = problem.bounds[col];
        let h = 1e-6 * (1.0 + x.abs());
        let column: Vec<f64> = if problem.control.central_differences && x - h >= lo && x + h <= hi {
            let mut plus = theta.to_vec();
            let mut minus = theta.to_vec();
            plus[col] += h;
            minus[col] -= h;
            let rp = residuals(&plus, problem)?.values;
            let rm = residuals(&minus, problem)?.values;
            *evaluations += 2;
            rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        } else {
            let signed = if x + h <= hi { h } else { -h };
            let mut probe = theta.to_vec();
            probe[col] += signed;
            let rp = residuals(&probe, problem)?.values;
            *evaluations += 1;
            rp.iter().zip(base).map(|(a, b)| (a - b) / signed).collect()
        };
        j.set_column(col, &DVector::from_vec(column));
    }
    Ok(j)
}

/// Bounded Levenberg-Marquardt minimisation of `0.5 |r|^2`.
///
/// Works in variables scaled by the base values. Parameters sitting on a
/// bound with the gradient pointing outward are frozen for that iteration;
/// trial points are projected back into the box.
pub fn fit(problem: &FitProblem) -> Result<FitResult> {
    let ctl = &problem.control;
    let p = problem.free.len();
    let scales = problem.scales();
    let mut theta = problem.initial.clone();
    let mut evaluations = 1;
    let mut res = residuals(&theta, problem)?;
    let initial_cost = res.cost();
    let mut log = Vec::new();

    if p == 0 {
        return finish(problem, theta, res, DMatrix::zeros(problem.data.len(), 0), scales, Termination::NoFreeParameters, 0, evaluations, initial_cost, log);
    }

    let mut j = jacobian(problem, &theta, &res.values, &mut evaluations)?;
    let mut damping = None;
    let mut nu = 2.0;
    let mut iterations = 0;

    let termination = loop {
        let cost = res.cost();
        if cost == 0.0 {
            break Termination::ZeroResidual;
        }
        let js = scaled(&j, &scales);
        let r = DVector::from_column_slice(&res.values);
        let grad = js.transpose() * &r;
        let a = js.transpose() * &js;

        let u: Vec<f64> = theta.iter().zip(&scales).map(|(x, s)| x / s).collect();
        let active: Vec<bool> = (0..p)
            .map(|i| {
                let (lo, hi) = problem.bounds[i];
                (theta[i] <= lo && grad[i] > 0.0) || (theta[i] >= hi && grad[i] < 0.0)
            })
            .collect();
        let gnorm = (0..p).filter(|&i| !active[i]).map(|i| grad[i].abs()).fold(0.0, f64::max);
        let lambda = *damping.get_or_insert_with(|| ctl.initial_damping * (0..p).map(|i| a[(i, i)]).fold(0.0, f64::max));

        if gnorm <= ctl.gtol {
            log.push(IterationLog { iteration: iterations, cost, gradient_norm: gnorm, damping: lambda, accepted: false, active_bounds: active.iter().filter(|&&b| b).count() });
            break Termination::Gradient;
        }
        if iterations >= ctl.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;

        let free_idx: Vec<usize> = (0..p).filter(|&i| !active[i]).collect();
        let m = free_idx.len();
        let mut lhs = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        for (a_i, &i) in free_idx.iter().enumerate() {
            rhs[a_i] = -grad[i];
            for (a_k, &k) in free_idx.iter().enumerate() {
                lhs[(a_i, a_k)] = a[(i, k)];
            }
            lhs[(a_i, a_i)] += lambda * a[(i, i)].max(1e-12);
        }
        let delta = match lhs.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => lhs.svd(true, true).solve(&rhs, 1e-14).map_err(|e| Error::Degenerate(e.to_string()))?,
        };

        let mut trial = theta.clone();
        for (a_i, &i) in free_idx.iter().enumerate() {
            let (lo, hi) = problem.bounds[i];
            trial[i] = ((u[i] + delta[a_i]) * scales[i]).clamp(lo, hi);
        }
        let step = DVector::from_iterator(p, (0..p).map(|i| (trial[i] - theta[i]) / scales[i]));
        let predicted = -(step.dot(&grad) + 0.5 * step.dot(&(&a * &step)));
        let step_norm = step.norm();
        let u_norm = DVector::from_vec(u).norm();

        let candidate = residuals(&trial, problem)?;
        evaluations += 1;
        let new_cost = candidate.cost();
        let rho = if predicted > 0.0 { (cost - new_cost) / predicted } else { -1.0 };
        let accepted = rho > 0.0 && new_cost < cost && !candidate.solver_failed;
        log.push(IterationLog { iteration: iterations, cost, gradient_norm: gnorm, damping: lambda, accepted, active_bounds: p - m });
        log::debug!("iteration {iterations}: cost {cost:.6e} -> {new_cost:.6e}, lambda {lambda:.3e}, accepted {accepted}");

        if accepted {
            theta = trial;
            res = candidate;
            damping = Some(lambda * (1.0 / 3.0f64).max(1.0 - (2.0 * rho - 1.0).powi(3)));
            nu = 2.0;
            if step_norm <= ctl.xtol * (u_norm + ctl.xtol) {
                j = jacobian(problem, &theta, &res.values, &mut evaluations)?;
                break Termination::StepSize;
            }
            let reduction = (cost - new_cost) / cost;
            j = jacobian(problem, &theta, &res.values, &mut evaluations)?;
            if reduction <= ctl.ftol {
                break Termination::CostReduction;
            }
        } else {
            if step_norm <= ctl.xtol * (u_norm + ctl.xtol) {
                break Termination::StepSize;
            }
            damping = Some(lambda * nu);
            nu *= 2.0;
            if lambda * nu > 1e16 * (1.0 + cost) {
                break Termination::Stalled;
            }
        }
    };

    finish(problem, theta, res, j, scales, termination, iterations, evaluations, initial_cost, log)
}

fn scaled(j: &DMatrix<f64>, scales: &[f64]) -> DMatrix<f64> {
    let mut js = j.clone();
    for (c, s) in scales.iter().enumerate() {
        js.column_mut(c).scale_mut(*s);
    }
    js
}

#[allow(clippy::too_many_arguments)]
fn finish(
    problem: &FitProblem,
    theta: Vec<f64>,
    res: Residuals,
    jacobian: DMatrix<f64>,
    scales: Vec<f64>,
    termination: Termination,
    iterations: usize,
    evaluations: usize,
    initial_cost: f64,
    log: Vec<IterationLog>,
) -> Result<FitResult> {
    let js = scaled(&jacobian, &scales);
    let r = DVector::from_column_slice(&res.values);
    let gradient_norm = (js.transpose() * &r).amax();
    let final_cost = res.cost();
    let mut result = FitResult {
        free: problem.free.clone(),
        params: problem.params_at(&theta),
        estimates: theta,
        residual_norm: r.norm(),
        solver_failed: res.solver_failed,
        residuals: res.values,
        jacobian,
        scales,
        balance: problem.block_factors(),
        intervals: Vec::new(),
        report: ConvergenceReport {
            converged: termination.converged(),
            termination,
            iterations,
            evaluations,
            initial_cost,
            final_cost,
            gradient_norm,
            log,
        },
    };
    result.intervals = confidence_intervals(&result, 0.95)?;
    Ok(result)
}

/// Linearised intervals `theta +- t_{(1+level)/2, n-p} * sd`.
///
/// Record weights are read as inverse error scales, so `r_i / b_i` (with
/// `b_i` the block balancing factor) share one variance, estimated as
/// `s^2 = sum (r_i / b_i)^2 / (n - p)`. The covariance is
/// `s^2 (J^T J)^-1 J^T B^2 J (J^T J)^-1`, which is `s^2 (J^T J)^-1` when
/// every block has the same size.
///
/// A rank-deficient Jacobian, or no residual degrees of freedom, gives
/// unbounded intervals.
pub fn confidence_intervals(result: &FitResult, level: f64) -> Result<Vec<Interval>> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::InvalidParams(format!("confidence level must lie in [0, 1), got {level}")));
    }
    let p = result.free.len();
    if p == 0 {
        return Ok(Vec::new());
    }
    let dof = result.dof();
    if level == 0.0 {
        return Ok(result
            .estimates
            .iter()
            .map(|&x| Interval { lower: x, upper: x, half_width: 0.0, bounded: true })
            .collect());
    }
    if dof <= 0 {
        return Ok(vec![Interval::unbounded(); p]);
    }
    let js = scaled(&result.jacobian, &result.scales);
    let svd = js.clone().svd(false, true);
    let smax = svd.singular_values.max();
    let tol = smax * (js.nrows().max(p) as f64) * f64::EPSILON;
    if smax == 0.0 || svd.singular_values.iter().any(|&s| s <= tol) {
        return Ok(vec![Interval::unbounded(); p]);
    }
    let v_t = svd.v_t.expect("requested V^T");
    // (J^T J)^-1 = V diag(1 / sv^2) V^T
    let inv_sq = DVector::from_iterator(p, svd.singular_values.iter().map(|s| 1.0 / (s * s)));
    let bread = v_t.transpose() * DMatrix::from_diagonal(&inv_sq) * &v_t;
    let mut weighted = js.clone();
    for (i, b) in result.balance.iter().enumerate() {
        weighted.row_mut(i).scale_mut(*b);
    }
    let meat = weighted.transpose() * &weighted;
    let cov = &bread * meat * &bread;

    let s2 = result
        .residuals
        .iter()
        .zip(&result.balance)
        .map(|(r, b)| (r / b).powi(2))
        .sum::<f64>()
        / dof as f64;
    let quantile = StudentsT::new(0.0, 1.0, dof as f64)
        .map_err(|e| Error::Degenerate(e.to_string()))?
        .inverse_cdf(0.5 * (1.0 + level));
    Ok((0..p)
        .map(|i| {
            let sd = (s2 * cov[(i, i)].max(0.0)).sqrt() * result.scales[i];
            let hw = quantile * sd;
            let x = result.estimates[i];
            Interval { lower: x - hw, upper: x + hw, half_width: hw, bounded: true }
        })
        .collect())
}

/// Noise-free observables at `params`: Experiment 1 log-counts on days 0, 7
/// and 42 for each arm; Experiment 2 and 3 recruitment and profile shares of
/// divisions 1 to 8 at each group's horizon.
///
/// Weights are inverse relative error scales matching [`apply_noise`]:
/// `ln 10` for log-counts and `1 / value` for percentages.
pub fn synthesize_clean(params: &ModelParams, options: &RunOptions) -> Result<DataSet> {
    let mut jobs = Vec::new();
    for experiment in Experiment::ALL {
        for arm in experiment_arms(experiment) {
            jobs.push((experiment, arm));
        }
    }
    let per_job: Vec<Result<Vec<Record>>> = jobs
        .par_iter()
        .map(|&(experiment, arm)| {
            let spec = build_experiment(experiment, arm)?.with_params(*params);
            let sim = run_with(&spec, options)?;
            let mut kinds = Vec::new();
            let mut times = Vec::new();
            if experiment == Experiment::One {
                for &t in &spec.observation_times {
                    kinds.push(ObservableKind::LogCount);
                    times.push(t);
                }
            } else {
                kinds.push(ObservableKind::Recruitment);
                times.push(spec.horizon);
                for division in 1..=SYNTHETIC_PROFILE_DIVISIONS.min(params.k) {
                    kinds.push(ObservableKind::Profile { division });
                    times.push(spec.horizon);
                }
            }
            kinds
                .into_iter()
                .zip(times)
                .map(|(kind, time)| {
                    let mut r = Record { experiment, arm, kind, time, value: 0.0, weight: 1.0 };
                    r.value = observe(&sim, &r)?;
                    r.weight = match kind {
                        ObservableKind::LogCount => std::f64::consts::LN_10,
                        _ => 1.0 / r.value.abs().max(MIN_RELATIVE_SCALE),
                    };
                    Ok(r)
                })
                .collect()
        })
        .collect();
    let mut data = DataSet::default();
    for records in per_job {
        data.records.extend(records?);
    }
    Ok(data)
}

/// Multiply each underlying observable by `exp(noise * z)`, `z ~ N(0, 1)`.
/// Log-count records are perturbed on the count scale.
pub fn apply_noise(data: &DataSet, noise: f64, seed: u64) -> Result<DataSet> {
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::InvalidParams(format!("noise level must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let records = data
        .records
        .iter()
        .map(|r| {
            let z: f64 = normal.sample(&mut rng);
            let value = match r.kind {
                ObservableKind::LogCount => r.value + noise * z / std::f64::consts::LN_10,
                _ => r.value * (noise * z).exp(),
            };
            Record { value, ..*r }
        })
        .collect();
    Ok(DataSet { records })
}

/// Synthetic data set at `params` with multiplicative lognormal noise,
/// deterministic per seed.
pub fn synthesize_data(params: &ModelParams, noise: f64, seed: u64) -> Result<DataSet> {
    apply_noise(&synthesize_clean(params, &RunOptions::default())?, noise, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::Group;
    use approx::assert_relative_eq;

    fn single(value: f64) -> DataSet {
        DataSet::new(vec![Record {
            experiment: Experiment::One,
            arm: Arm::Precursors(8.5),
            kind: ObservableKind::LogCount,
            time: 168.0,
            value,
            weight: 1.0,
        }])
    }

    #[test]
    fn single_record_residual_is_log_misfit() {
        let params = ModelParams::default();
        let problem = FitProblem::new(params, vec![], single(1.0)).unwrap();
        let r = residuals(&[], &problem).unwrap();
        let spec = crate::scenarios::build_experiment1(8.5).unwrap();
        let sim = crate::scenarios::run(&spec).unwrap();
        let total = sim.total_at(168.0, CohortSelector::All).unwrap();
        assert_relative_eq!(r.values[0], total.log10() - 1.0, max_relative = 1e-12);
        assert!(!r.solver_failed);
    }

    #[test]
    fn zero_free_parameters_returns_fixed_values() {
        let params = ModelParams::default();
        let problem = FitProblem::new(params, vec![], single(1.0)).unwrap();
        let result = fit(&problem).unwrap();
        assert_eq!(result.params, params);
        assert_eq!(result.report.termination, Termination::NoFreeParameters);
        assert_relative_eq!(result.residual_norm, result.residuals[0].abs());
    }

    #[test]
    fn data_validation() {
        assert!(DataSet::default().validate().is_err());
        let mut d = single(1.0);
        d.records[0].weight = 0.0;
        assert!(d.validate().is_err());
        let mut d = single(1.0);
        d.records[0].time = 2000.0;
        assert!(d.validate().is_err());
        let mut d = single(1.0);
        d.records[0].arm = Arm::Group(Group::I);
        assert!(d.validate().is_err());
    }

    #[test]
    fn default_bounds() {
        let p = ModelParams::default();
        assert_eq!(FreeParam::RE.default_bounds(&p), (1e-6, 10.0 * 1.5412));
        let (_, g_hi) = FreeParam::G.default_bounds(&p);
        assert!(g_hi * (p.m as f64) < 1.0);
        assert!(g_hi > p.g);
    }

    #[test]
    fn initial_guess_outside_bounds_is_rejected() {
        let problem = FitProblem::new(ModelParams::default(), vec![FreeParam::S], single(1.0)).unwrap();
        assert!(problem.clone().with_initial(vec![1.0]).is_err());
        assert!(problem.with_bounds(vec![(1.0, 0.5)]).is_err());
    }

    #[test]
    fn free_param_names() {
        for p in FreeParam::ALL {
            assert_eq!(p.name().parse::<FreeParam>().unwrap(), p);
        }
        assert!("K".parse::<FreeParam>().is_err());
    }

    #[test]
    fn canonical_order_ignores_input_order() {
        let a = single(1.0).records[0];
        let mut b = a;
        b.arm = Arm::Precursors(0.1);
        let mut c = a;
        c.kind = ObservableKind::Profile { division: 2 };
        c.experiment = Experiment::Two;
        c.arm = Arm::Group(Group::II);
        let x = DataSet::new(vec![a, b, c]).canonical();
        let y = DataSet::new(vec![c, a, b]).canonical();
        assert_eq!(x, y);
        assert_eq!(x.records[0].arm, Arm::Precursors(0.1));
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let d = DataSet::new(vec![single(1.0).records[0]; 5]);
        assert_eq!(apply_noise(&d, 0.05, 7).unwrap(), apply_noise(&d, 0.05, 7).unwrap());
        assert_ne!(apply_noise(&d, 0.05, 7).unwrap(), apply_noise(&d, 0.05, 8).unwrap());
        assert_eq!(apply_noise(&d, 0.0, 7).unwrap(), d);
    }

    #[test]
    fn level_zero_interval_is_degenerate() {
        let data = synthesize_data(&ModelParams::default(), 0.05, 1).unwrap();
        let problem = FitProblem::new(ModelParams::default(), vec![FreeParam::S], data).unwrap();
        let result = fit(&problem).unwrap();
        let iv = confidence_intervals(&result, 0.0).unwrap();
        assert_eq!(iv[0].lower, result.estimates[0]);
        assert_eq!(iv[0].upper, result.estimates[0]);
        assert!(confidence_intervals(&result, 1.0).is_err());
    }
}
