//! The three transfer experiments, their execution and derived observables.
//!
//! Experiment 1 varies the precursor density `N(0)` under a fixed antigen
//! dose. Experiments 2 and 3 deliver a labelled cohort late into an ongoing
//! response and vary the arrival time of a competing cohort. Cohort 0 is
//! always the tracked (labelled) cohort.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dde::{integrate, DenseTrajectory, StepControl, ZeroHistory};
use crate::error::{Error, Result};
use crate::kernel::{
    total_t_cells, AntigenSupplySpec, CloneModel, CohortSelector, ModelParams, NaiveSupplySpec, Supplies,
    SystemState,
};

/// Precursor densities of the four Experiment 1 arms (cells per 10^5 leukocytes).
pub const EXPERIMENT1_PRECURSORS: [f64; 4] = [0.1, 1.3, 8.5, 94.7];

/// Cells per injection in Experiments 2 and 3.
pub const TRANSFER_DOSE: f64 = 17.0;

pub const HOURS_PER_DAY: f64 = 24.0;

/// Default step as a fraction of `tau`.
pub const STEPS_PER_TAU: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    #[serde(rename = "experiment1")]
    One,
    #[serde(rename = "experiment2")]
    Two,
    #[serde(rename = "experiment3")]
    Three,
}

impl Experiment {
    pub const ALL: [Experiment; 3] = [Experiment::One, Experiment::Two, Experiment::Three];

    pub fn tag(&self) -> &'static str {
        match self {
            Experiment::One => "experiment1",
            Experiment::Two => "experiment2",
            Experiment::Three => "experiment3",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "experiment1" | "exp1" | "1" => Ok(Experiment::One),
            "experiment2" | "exp2" | "2" => Ok(Experiment::Two),
            "experiment3" | "exp3" | "3" => Ok(Experiment::Three),
            other => Err(Error::UnknownExperiment(other.to_string())),
        }
    }
}

/// Competing-cohort arrangement of Experiments 2 and 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "i")]
    I,
    #[serde(rename = "ii")]
    II,
    #[serde(rename = "iii")]
    III,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::I, Group::II, Group::III];

    pub fn tag(&self) -> &'static str {
        match self {
            Group::I => "i",
            Group::II => "ii",
            Group::III => "iii",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "i" | "1" => Ok(Group::I),
            "ii" | "2" => Ok(Group::II),
            "iii" | "3" => Ok(Group::III),
            other => Err(Error::UnknownGroup(other.to_string())),
        }
    }
}

/// How a cohort enters the node: present at `t = 0`, or delivered by a supply pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CohortSource {
    Initial { n0: f64 },
    Supply(NaiveSupplySpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub label: String,
    pub source: CohortSource,
}

impl CohortSpec {
    pub fn initial(label: &str, n0: f64) -> Self {
        Self { label: label.to_string(), source: CohortSource::Initial { n0 } }
    }

    pub fn supplied(label: &str, dose: f64, t_c: f64) -> Self {
        Self { label: label.to_string(), source: CohortSource::Supply(NaiveSupplySpec::new(dose, t_c)) }
    }

    /// Cells transferred: `N(0)` or the supplied dose.
    pub fn transferred(&self) -> f64 {
        match self.source {
            CohortSource::Initial { n0 } => n0,
            CohortSource::Supply(s) => s.total(),
        }
    }

    pub fn initial_naive(&self) -> f64 {
        match self.source {
            CohortSource::Initial { n0 } => n0,
            CohortSource::Supply(_) => 0.0,
        }
    }

    pub fn supply(&self) -> NaiveSupplySpec {
        match self.source {
            CohortSource::Initial { .. } => NaiveSupplySpec::disabled(),
            CohortSource::Supply(s) => s,
        }
    }
}

/// One experimental arm: cohorts, antigen schedule, horizon and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub cohorts: Vec<CohortSpec>,
    pub antigen: AntigenSupplySpec,
    /// End of the simulation (h).
    pub horizon: f64,
    pub observation_times: Vec<f64>,
    #[serde(default)]
    pub params: ModelParams,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.antigen.validate()?;
        if self.cohorts.is_empty() {
            return Err(Error::InvalidScenario("at least one cohort is required".into()));
        }
        for c in &self.cohorts {
            match c.source {
                CohortSource::Initial { n0 } if !(n0.is_finite() && n0 >= 0.0) => {
                    return Err(Error::InvalidScenario(format!("cohort '{}': N(0) must be >= 0", c.label)));
                }
                CohortSource::Supply(s) => s.validate()?,
                _ => {}
            }
        }
        let start = self.start_time();
        let has_initial = self.cohorts.iter().any(|c| matches!(c.source, CohortSource::Initial { .. }));
        if has_initial && start < 0.0 {
            return Err(Error::InvalidScenario(
                "cohorts with an initial density need the integration to start at t = 0".into(),
            ));
        }
        if !(self.horizon.is_finite() && self.horizon > start) {
            return Err(Error::InvalidScenario(format!(
                "horizon {} must lie after the start time {start}",
                self.horizon
            )));
        }
        if let Some(&t) = self.observation_times.iter().find(|&&t| !(t.is_finite() && t <= self.horizon)) {
            return Err(Error::InvalidScenario(format!("observation time {t} lies beyond the horizon")));
        }
        Ok(())
    }

    /// Integration start: `min(0, t_k, earliest naive arrival - 8 spreads)`.
    /// Everything is zero before any supply acts, so starting early keeps the
    /// zero history exact.
    pub fn start_time(&self) -> f64 {
        let mut start = 0.0f64.min(self.antigen.t_k);
        for c in &self.cohorts {
            if let CohortSource::Supply(s) = c.source {
                if s.enabled {
                    start = start.min(s.peak_time() - 8.0 * s.spread);
                }
            }
        }
        start
    }

    pub fn supplies(&self) -> Supplies {
        Supplies { antigen: self.antigen, naive: self.cohorts.iter().map(CohortSpec::supply).collect() }
    }

    pub fn cohort_index(&self, label: &str) -> Option<usize> {
        self.cohorts.iter().position(|c| c.label == label)
    }

    pub fn with_params(mut self, params: ModelParams) -> Self {
        self.params = params;
        self
    }

    pub fn default_step(&self) -> f64 {
        self.params.tau / STEPS_PER_TAU
    }
}

/// Experiment 1 arm: precursors present at `t = 0`, antigen injected at `t = 0`,
/// observed on days 0, 7 and 42.
pub fn build_experiment1(n0: f64) -> Result<ScenarioSpec> {
    if !(n0.is_finite() && n0 > 0.0) {
        return Err(Error::InvalidScenario(format!("precursor density must be > 0, got {n0}")));
    }
    Ok(ScenarioSpec {
        name: format!("experiment1/n0={n0}"),
        cohorts: vec![CohortSpec::initial("transferred", n0)],
        antigen: AntigenSupplySpec::new(0.0),
        horizon: 42.0 * HOURS_PER_DAY,
        observation_times: vec![0.0, 7.0 * HOURS_PER_DAY, 42.0 * HOURS_PER_DAY],
        params: ModelParams::default(),
    })
}

fn late_transfer(experiment: Experiment, group: Group, labelled_tc: f64, competing: [Option<f64>; 3], horizon: f64) -> ScenarioSpec {
    let mut cohorts = vec![CohortSpec::supplied("labelled", TRANSFER_DOSE, labelled_tc)];
    let slot = match group {
        Group::I => competing[0],
        Group::II => competing[1],
        Group::III => competing[2],
    };
    if let Some(t_c) = slot {
        cohorts.push(CohortSpec::supplied("competing", TRANSFER_DOSE, t_c));
    }
    let mut observation_times: Vec<f64> = (0..)
        .map(|d| d as f64 * HOURS_PER_DAY)
        .take_while(|&t| t < horizon)
        .collect();
    observation_times.push(horizon);
    ScenarioSpec {
        name: format!("{experiment}/{group}"),
        cohorts,
        antigen: AntigenSupplySpec::new(-12.0),
        horizon,
        observation_times,
        params: ModelParams::default(),
    }
}

/// Experiment 2: labelled cohort injected at 24 h; competing cohort absent (i),
/// simultaneous (ii) or a day earlier (iii). Harvest at day 3.5.
pub fn build_experiment2(group: Group) -> ScenarioSpec {
    late_transfer(Experiment::Two, group, 24.0, [None, Some(24.0), Some(0.0)], 3.5 * HOURS_PER_DAY)
}

/// Experiment 3: labelled cohort injected at 72 h; competing cohort absent (i),
/// at 48 h (ii) or at 0 h (iii). Harvest at day 5.5.
pub fn build_experiment3(group: Group) -> ScenarioSpec {
    late_transfer(Experiment::Three, group, 72.0, [None, Some(48.0), Some(0.0)], 5.5 * HOURS_PER_DAY)
}

/// Arm selector shared by the fitter and the CLI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Arm {
    Precursors(f64),
    Group(Group),
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Precursors(n0) => write!(f, "{n0}"),
            Arm::Group(g) => write!(f, "{g}"),
        }
    }
}

impl Arm {
    pub fn parse(experiment: Experiment, s: &str) -> Result<Self> {
        match experiment {
            Experiment::One => s
                .trim()
                .parse::<f64>()
                .map(Arm::Precursors)
                .map_err(|_| Error::InvalidScenario(format!("'{s}' is not a precursor density"))),
            _ => s.parse().map(Arm::Group),
        }
    }
}

pub fn build_experiment(experiment: Experiment, arm: Arm) -> Result<ScenarioSpec> {
    match (experiment, arm) {
        (Experiment::One, Arm::Precursors(n0)) => build_experiment1(n0),
        (Experiment::Two, Arm::Group(g)) => Ok(build_experiment2(g)),
        (Experiment::Three, Arm::Group(g)) => Ok(build_experiment3(g)),
        (e, a) => Err(Error::InvalidScenario(format!("arm '{a}' does not belong to {e}"))),
    }
}

/// All arms of one experiment in canonical order.
pub fn experiment_arms(experiment: Experiment) -> Vec<Arm> {
    match experiment {
        Experiment::One => EXPERIMENT1_PRECURSORS.iter().map(|&n| Arm::Precursors(n)).collect(),
        _ => Group::ALL.iter().map(|&g| Arm::Group(g)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOptions {
    /// Solver step; defaults to `tau / 64`.
    pub step: Option<f64>,
    /// Step-halving check with this relative tolerance.
    pub verify: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub spec: ScenarioSpec,
    pub trajectory: DenseTrajectory,
}

impl SimulationResult {
    pub fn horizon(&self) -> f64 {
        self.spec.horizon
    }

    pub fn state_at(&self, t: f64) -> Result<SystemState> {
        let layout = crate::kernel::StateLayout::new(self.spec.cohorts.len(), self.spec.params.k);
        SystemState::from_values(layout, self.trajectory.evaluate(t)?)
    }

    pub fn antigen_at(&self, t: f64) -> Result<f64> {
        Ok(self.state_at(t)?.antigen())
    }

    pub fn total_at(&self, t: f64, cohort: CohortSelector) -> Result<f64> {
        total_t_cells(&self.state_at(t)?, cohort)
    }
}

pub fn run(spec: &ScenarioSpec) -> Result<SimulationResult> {
    run_with(spec, &RunOptions::default())
}

/// Integrate the scenario from zero history. Initial densities apply at the
/// start time, which is `t = 0` whenever such cohorts exist.
pub fn run_with(spec: &ScenarioSpec, options: &RunOptions) -> Result<SimulationResult> {
    spec.validate()?;
    let model = CloneModel::new(spec.params, spec.supplies())?;
    let layout = model.layout();
    let t0 = spec.start_time();

    let mut initial = SystemState::zeros(layout);
    for (c, cohort) in spec.cohorts.iter().enumerate() {
        initial.set_naive(c, cohort.initial_naive());
    }

    let mut control = StepControl::new(options.step.unwrap_or_else(|| spec.default_step()))
        .with_breakpoints(vec![0.0, spec.antigen.arrival_time()]);
    if let Some(tol) = options.verify {
        control = control.verified(tol);
    }
    let trajectory = integrate(&model, Arc::new(ZeroHistory), Some(initial.values()), (t0, spec.horizon), &control)?;
    Ok(SimulationResult { spec: spec.clone(), trajectory })
}

/// Run independent scenarios on the rayon pool; output order follows input order.
pub fn run_many(specs: &[ScenarioSpec], options: &RunOptions) -> Vec<Result<SimulationResult>> {
    specs.par_iter().map(|s| run_with(s, options)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Denominator {
    /// Cells transferred into the cohort (`N(0)` or the supplied dose).
    Transferred,
    InitialNaive,
    SuppliedDose,
    Value(f64),
}

fn cohort_indices(result: &SimulationResult, cohort: CohortSelector) -> Result<Vec<usize>> {
    let count = result.spec.cohorts.len();
    match cohort {
        CohortSelector::One(c) if c < count => Ok(vec![c]),
        CohortSelector::One(c) => Err(Error::UnknownCohort { index: c, count }),
        CohortSelector::All => Ok((0..count).collect()),
    }
}

/// Percentage of transferred naive cells recruited into division by the horizon.
pub fn recruitment_fraction(result: &SimulationResult, cohort: CohortSelector, denominator: Denominator) -> Result<f64> {
    recruitment_fraction_at(result, result.horizon(), cohort, denominator)
}

/// `(1 - N(t) / denominator) * 100`.
pub fn recruitment_fraction_at(result: &SimulationResult, t: f64, cohort: CohortSelector, denominator: Denominator) -> Result<f64> {
    let idx = cohort_indices(result, cohort)?;
    let state = result.state_at(t)?;
    let naive: f64 = idx.iter().map(|&c| state.naive(c)).sum();
    let cohorts = &result.spec.cohorts;
    let denom = match denominator {
        Denominator::Transferred => idx.iter().map(|&c| cohorts[c].transferred()).sum(),
        Denominator::InitialNaive => idx.iter().map(|&c| cohorts[c].initial_naive()).sum(),
        Denominator::SuppliedDose => idx.iter().map(|&c| cohorts[c].supply().total()).sum(),
        Denominator::Value(v) => v,
    };
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::ZeroDenominator("recruitment fraction"));
    }
    Ok((1.0 - naive / denom) * 100.0)
}

/// Percentage of divided cells in each division peak `1..=K`.
///
/// Peak `i` holds `T_i + D_i`: cells in transit are counted at the division
/// they have completed. Undivided cells (`N`, `D_N`) are excluded. Negative
/// solver round-off is treated as an empty peak.
pub fn division_profile(result: &SimulationResult, t: f64, cohort: CohortSelector) -> Result<Vec<f64>> {
    let idx = cohort_indices(result, cohort)?;
    let state = result.state_at(t)?;
    let k = result.spec.params.k;
    let mut peaks = vec![0.0; k];
    for &c in &idx {
        for (i, v) in state.activated(c).iter().enumerate() {
            peaks[i] += v;
        }
        for (i, v) in state.transit(c).iter().enumerate() {
            peaks[i] += v;
        }
    }
    for p in peaks.iter_mut() {
        *p = p.max(0.0);
    }
    let total: f64 = peaks.iter().sum();
    if total <= 0.0 {
        return Err(Error::NoDividedCells { t });
    }
    Ok(peaks.into_iter().map(|p| 100.0 * p / total).collect())
}

/// Division number (1-based) holding the largest share.
pub fn profile_mode(profile: &[f64]) -> Option<usize> {
    profile
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i + 1)
}

/// Highest division number whose share is at least `threshold` percent.
pub fn profile_reach(profile: &[f64], threshold: f64) -> Option<usize> {
    profile.iter().rposition(|&v| v >= threshold).map(|i| i + 1)
}

/// Ratio of total cells in the largest-dose arm to the smallest-dose arm at `t`.
pub fn fold_difference(arms: &[(f64, &SimulationResult)], t: f64) -> Result<f64> {
    if arms.len() < 2 {
        return Err(Error::Degenerate("fold difference needs at least two arms".into()));
    }
    let largest = arms.iter().max_by(|a, b| a.0.total_cmp(&b.0)).expect("non-empty");
    let smallest = arms.iter().min_by(|a, b| a.0.total_cmp(&b.0)).expect("non-empty");
    let num = largest.1.total_at(t, CohortSelector::All)?;
    let den = smallest.1.total_at(t, CohortSelector::All)?;
    if den == 0.0 {
        return Err(Error::ZeroDenominator("fold difference"));
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regression {
    /// Percentage points per decade of dose.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of recruitment % against `log10(dose)`.
pub fn recruitment_regression(arms: &[(f64, f64)]) -> Result<Regression> {
    if arms.len() < 3 {
        return Err(Error::Degenerate("regression needs at least three arms".into()));
    }
    if arms.iter().any(|&(dose, pct)| !(dose > 0.0 && dose.is_finite() && pct.is_finite())) {
        return Err(Error::Degenerate("doses must be positive and values finite".into()));
    }
    let n = arms.len() as f64;
    let xs: Vec<f64> = arms.iter().map(|&(d, _)| d.log10()).collect();
    let ys: Vec<f64> = arms.iter().map(|&(_, y)| y).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 1e-12 * (1.0 + mx * mx) {
        return Err(Error::Degenerate("all doses are identical".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(Regression { slope, intercept, r_squared })
}

/// Activated plus transit cells of each cohort at `t` (naive cells excluded).
pub fn cohort_activated_totals(result: &SimulationResult, t: f64) -> Result<Vec<f64>> {
    let state = result.state_at(t)?;
    Ok((0..result.spec.cohorts.len()).map(|c| state.activated_total(c)).collect())
}
