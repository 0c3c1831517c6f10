//! Method-of-steps integration of systems with constant delays.
//!
//! The solver advances a fixed-step classical Runge–Kutta scheme whose step never
//! exceeds the smallest delay, so every delayed lookup lands either in the
//! history or in an already accepted step. Accepted steps carry cubic Hermite
//! interpolants built from the node values and node slopes; the same
//! interpolants serve delayed lookups during integration and dense queries
//! afterwards.
//!
//! ```
//! use std::sync::Arc;
//! use clonesim::dde::{integrate, DelaySet, DelaySystem, Lagged, StepControl};
//!
//! // y'(t) = -y(t - 1) with y = 1 on t <= 0.
//! struct Retarded(DelaySet);
//! impl DelaySystem for Retarded {
//!     fn dimension(&self) -> usize { 1 }
//!     fn delays(&self) -> &DelaySet { &self.0 }
//!     fn derivative(&self, _t: f64, _y: &[f64], lagged: Lagged<'_>, out: &mut [f64]) {
//!         out[0] = -lagged.get(0)[0];
//!     }
//! }
//!
//! let sys = Retarded(DelaySet::new(vec![1.0]).unwrap());
//! let history = Arc::new(|_t: f64, out: &mut [f64]| out[0] = 1.0);
//! let traj = integrate(&sys, history, None, (0.0, 2.0), &StepControl::new(0.125)).unwrap();
//! assert!((traj.evaluate(2.0).unwrap()[0] + 0.5).abs() < 1e-12);
//! ```

use std::sync::Arc;

use crate::error::{Error, Result};

/// Strictly positive, pairwise distinct constant lags.
#[derive(Debug, Clone, PartialEq)]
pub struct DelaySet(Vec<f64>);

impl DelaySet {
    pub fn new(delays: Vec<f64>) -> Result<Self> {
        if delays.is_empty() {
            return Err(Error::InvalidParams("delay set is empty".into()));
        }
        for (i, &d) in delays.iter().enumerate() {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::InvalidParams(format!("delay {d} must be positive")));
            }
            if delays[..i].contains(&d) {
                return Err(Error::InvalidParams(format!("delay {d} listed twice")));
            }
        }
        Ok(Self(delays))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Delayed states handed to [`DelaySystem::derivative`], one per lag in
/// [`DelaySystem::delays`] order.
#[derive(Clone, Copy)]
pub struct Lagged<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> Lagged<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Self {
        debug_assert_eq!(data.len() % dim, 0);
        Self { data, dim }
    }

    /// State at `t - delays[j]`.
    pub fn get(&self, j: usize) -> &'a [f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }
}

pub trait DelaySystem {
    fn dimension(&self) -> usize;
    fn delays(&self) -> &DelaySet;
    fn derivative(&self, t: f64, state: &[f64], lagged: Lagged<'_>, out: &mut [f64]);
}

/// State for `t` before the integration start.
pub trait History: Send + Sync {
    fn fill(&self, t: f64, out: &mut [f64]);
}

impl<F> History for F
where
    F: Fn(f64, &mut [f64]) + Send + Sync,
{
    fn fill(&self, t: f64, out: &mut [f64]) {
        self(t, out)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroHistory;

impl History for ZeroHistory {
    fn fill(&self, _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
}

#[derive(Debug, Clone)]
pub struct ConstantHistory(pub Vec<f64>);

impl History for ConstantHistory {
    fn fill(&self, _t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepControl {
    /// Nominal step `h`; must not exceed the smallest delay.
    pub step: f64,
    /// Relative tolerance of the step-halving (Richardson) check.
    pub rel_tol: f64,
    /// Absolute floor added to `|y|` in the Richardson comparison.
    pub abs_tol: f64,
    /// Re-solve at `h/2` and compare before returning.
    pub verify: bool,
    /// Number of extra halvings attempted when the check fails.
    pub max_refinements: usize,
    /// Times the mesh must hit exactly (steps are shortened to land on them).
    pub breakpoints: Vec<f64>,
}

impl StepControl {
    pub fn new(step: f64) -> Self {
        Self {
            step,
            rel_tol: 1e-4,
            abs_tol: 1e-6,
            verify: false,
            max_refinements: 3,
            breakpoints: Vec::new(),
        }
    }

    pub fn verified(mut self, rel_tol: f64) -> Self {
        self.verify = true;
        self.rel_tol = rel_tol;
        self
    }

    pub fn with_breakpoints(mut self, breakpoints: Vec<f64>) -> Self {
        self.breakpoints = breakpoints;
        self
    }
}

/// Diagnostics of a finished integration.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationReport {
    /// Nominal step of the returned trajectory.
    pub step: f64,
    pub steps: usize,
    /// Halvings performed by the Richardson check.
    pub refinements: usize,
    /// Mixed relative difference `|y_h - y_{h/2}| / (|y_{h/2}| + abs_tol)` of the
    /// last comparison, when verification ran.
    pub richardson_error: Option<f64>,
    pub verified: bool,
    /// Largest `lookup time - step start` seen; never positive.
    pub max_lookup_lead: f64,
}

/// Continuous solution on `[t0, t1]` with history passthrough before `t0`.
#[derive(Clone)]
pub struct DenseTrajectory {
    dim: usize,
    mesh: Vec<f64>,
    states: Vec<f64>,
    slopes: Vec<f64>,
    history: Arc<dyn History>,
    report: IntegrationReport,
}

impl std::fmt::Debug for DenseTrajectory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenseTrajectory")
            .field("dim", &self.dim)
            .field("t0", &self.t0())
            .field("t1", &self.t1())
            .field("nodes", &self.mesh.len())
            .field("report", &self.report)
            .finish()
    }
}

impl DenseTrajectory {
    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn t0(&self) -> f64 {
        self.mesh[0]
    }

    pub fn t1(&self) -> f64 {
        *self.mesh.last().expect("mesh has at least two nodes")
    }

    /// Accepted step endpoints, starting with `t0`.
    pub fn mesh(&self) -> &[f64] {
        &self.mesh
    }

    pub fn node_state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn report(&self) -> &IntegrationReport {
        &self.report
    }

    pub fn evaluate(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.evaluate_into(t, &mut out)?;
        Ok(out)
    }

    pub fn evaluate_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let t1 = self.t1();
        if t > t1 || t.is_nan() {
            return Err(Error::BeyondHorizon { t, t1 });
        }
        interpolate(&self.mesh, &self.states, &self.slopes, self.dim, self.history.as_ref(), t, out);
        Ok(())
    }
}

/// Hermite evaluation on the first `mesh.len()` nodes; history before `mesh[0]`.
fn interpolate(mesh: &[f64], states: &[f64], slopes: &[f64], dim: usize, history: &dyn History, t: f64, out: &mut [f64]) {
    if t < mesh[0] {
        history.fill(t, out);
        return;
    }
    let last = mesh.len() - 1;
    let k = mesh.partition_point(|&m| m <= t).saturating_sub(1);
    if mesh[k] == t || k == last {
        out.copy_from_slice(&states[k * dim..(k + 1) * dim]);
        return;
    }
    let (ta, tb) = (mesh[k], mesh[k + 1]);
    let h = tb - ta;
    let th = (t - ta) / h;
    let om = 1.0 - th;
    let h10 = th * om * om * h;
    let h01 = th * th * (3.0 - 2.0 * th);
    let h11 = th * th * (th - 1.0) * h;
    let y0 = &states[k * dim..(k + 1) * dim];
    let y1 = &states[(k + 1) * dim..(k + 2) * dim];
    let f0 = &slopes[k * dim..(k + 1) * dim];
    let f1 = &slopes[(k + 1) * dim..(k + 2) * dim];
    for i in 0..dim {
        out[i] = y0[i] + h01 * (y1[i] - y0[i]) + h10 * f0[i] + h11 * f1[i];
    }
}

/// Node times: the uniform grid `t0 + k h` merged with interior breakpoints.
fn build_mesh(t0: f64, t1: f64, h: f64, breakpoints: &[f64]) -> Vec<f64> {
    let n = ((t1 - t0) / h - 1e-9).ceil().max(1.0) as usize;
    let mut nodes: Vec<f64> = (0..n).map(|k| t0 + k as f64 * h).collect();
    nodes.push(t1);
    let snap = 1e-6 * h;
    for &b in breakpoints {
        if b <= t0 + snap || b >= t1 - snap {
            continue;
        }
        let k = nodes.partition_point(|&m| m < b);
        if (nodes[k] - b).abs() <= snap {
            nodes[k] = b;
        } else if (b - nodes[k - 1]).abs() <= snap {
            nodes[k - 1] = b;
        } else {
            nodes.insert(k, b);
        }
    }
    nodes
}

/// Integrate `system` over `span` by the method of steps.
///
/// `initial` overrides the state at `t0`; otherwise it is `history(t0)`.
/// With `control.verify` the problem is re-solved at half the step and, if the
/// two solutions disagree by more than `control.rel_tol`, halved again up to
/// `control.max_refinements` times. The finest solution is returned.
pub fn integrate<S>(
    system: &S,
    history: Arc<dyn History>,
    initial: Option<&[f64]>,
    span: (f64, f64),
    control: &StepControl,
) -> Result<DenseTrajectory>
where
    S: DelaySystem + ?Sized,
{
    let (t0, t1) = span;
    if !(t0.is_finite() && t1.is_finite()) || t1 <= t0 {
        return Err(Error::InvertedSpan { t0, t1 });
    }
    let min_delay = system.delays().min();
    if !(control.step > 0.0 && control.step.is_finite()) || control.step > min_delay {
        return Err(Error::StepTooLarge { step: control.step, min_delay });
    }
    if let Some(y0) = initial {
        if y0.len() != system.dimension() {
            return Err(Error::InvalidScenario(format!(
                "initial state has {} entries, system has {}",
                y0.len(),
                system.dimension()
            )));
        }
    }

    let mut coarse = solve_fixed(system, history.clone(), initial, t0, t1, control.step, &control.breakpoints)?;
    if !control.verify {
        return Ok(coarse);
    }
    let mut step = control.step;
    let mut refinements = 0;
    loop {
        step *= 0.5;
        let fine = solve_fixed(system, history.clone(), initial, t0, t1, step, &control.breakpoints)?;
        let err = richardson_difference(&coarse, &fine, control.abs_tol);
        let accepted = err <= control.rel_tol;
        coarse = fine;
        coarse.report.refinements = refinements;
        coarse.report.richardson_error = Some(err);
        coarse.report.verified = accepted;
        if accepted {
            return Ok(coarse);
        }
        if refinements == control.max_refinements {
            log::warn!(
                "step-halving check not met after {refinements} refinements (difference {err:.3e}, tolerance {:.1e})",
                control.rel_tol
            );
            return Ok(coarse);
        }
        refinements += 1;
    }
}

fn richardson_difference(coarse: &DenseTrajectory, fine: &DenseTrajectory, abs_tol: f64) -> f64 {
    let mut buf = vec![0.0; coarse.dim];
    let mut worst: f64 = 0.0;
    for (k, &t) in coarse.mesh.iter().enumerate() {
        fine.evaluate_into(t, &mut buf).expect("same span");
        for (a, b) in coarse.node_state(k).iter().zip(&buf) {
            worst = worst.max((a - b).abs() / (b.abs() + abs_tol));
        }
    }
    worst
}

fn solve_fixed<S>(
    system: &S,
    history: Arc<dyn History>,
    initial: Option<&[f64]>,
    t0: f64,
    t1: f64,
    h: f64,
    breakpoints: &[f64],
) -> Result<DenseTrajectory>
where
    S: DelaySystem + ?Sized,
{
    let dim = system.dimension();
    let delays = system.delays().as_slice().to_vec();
    let mesh_plan = build_mesh(t0, t1, h, breakpoints);
    let nodes = mesh_plan.len();

    let mut mesh = Vec::with_capacity(nodes);
    let mut states = Vec::with_capacity(nodes * dim);
    let mut slopes = Vec::with_capacity(nodes * dim);

    let mut y = vec![0.0; dim];
    match initial {
        Some(y0) => y.copy_from_slice(y0),
        None => history.fill(t0, &mut y),
    }

    let mut lag_buf = vec![0.0; delays.len() * dim];
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    let mut max_lead = f64::NEG_INFINITY;

    // Evaluates f(t, state) with lags read from the accepted prefix of the mesh.
    let eval = |t: f64,
                    state: &[f64],
                    front: f64,
                    mesh: &[f64],
                    states: &[f64],
                    slopes: &[f64],
                    out: &mut [f64],
                    lag_buf: &mut [f64],
                    max_lead: &mut f64|
     -> Result<()> {
        for (j, &lag) in delays.iter().enumerate() {
            let tl = t - lag;
            *max_lead = max_lead.max(tl - front);
            let slot = &mut lag_buf[j * dim..(j + 1) * dim];
            if mesh.is_empty() || tl < mesh[0] {
                history.fill(tl, slot);
            } else {
                debug_assert!(tl <= front + 1e-9 * h.max(1.0), "lookup ahead of the solver front");
                interpolate(mesh, states, slopes, dim, history.as_ref(), tl, slot);
            }
        }
        system.derivative(t, state, Lagged::new(lag_buf, dim), out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t });
        }
        Ok(())
    };

    eval(t0, &y, t0, &mesh, &states, &slopes, &mut k1, &mut lag_buf, &mut max_lead)?;
    mesh.push(t0);
    states.extend_from_slice(&y);
    slopes.extend_from_slice(&k1);

    for n in 0..nodes - 1 {
        let t = mesh_plan[n];
        let step = mesh_plan[n + 1] - t;
        let half = 0.5 * step;
        k1.copy_from_slice(&slopes[n * dim..(n + 1) * dim]);

        for i in 0..dim {
            tmp[i] = y[i] + half * k1[i];
        }
        eval(t + half, &tmp, t, &mesh, &states, &slopes, &mut k2, &mut lag_buf, &mut max_lead)?;
        for i in 0..dim {
            tmp[i] = y[i] + half * k2[i];
        }
        eval(t + half, &tmp, t, &mesh, &states, &slopes, &mut k3, &mut lag_buf, &mut max_lead)?;
        for i in 0..dim {
            tmp[i] = y[i] + step * k3[i];
        }
        let t_next = mesh_plan[n + 1];
        eval(t_next, &tmp, t, &mesh, &states, &slopes, &mut k4, &mut lag_buf, &mut max_lead)?;
        for i in 0..dim {
            y[i] += step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t: t_next });
        }

        // Node slope at the new point; its lags reach back no further than `t`.
        eval(t_next, &y, t, &mesh, &states, &slopes, &mut k1, &mut lag_buf, &mut max_lead)?;
        mesh.push(t_next);
        states.extend_from_slice(&y);
        slopes.extend_from_slice(&k1);
    }

    Ok(DenseTrajectory {
        dim,
        mesh,
        states,
        slopes,
        history,
        report: IntegrationReport {
            step: h,
            steps: nodes - 1,
            refinements: 0,
            richardson_error: None,
            verified: false,
            max_lookup_lead: max_lead,
        },
    })
}
