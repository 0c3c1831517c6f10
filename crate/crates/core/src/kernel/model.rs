use crate::dde::{DelaySet, DelaySystem, Lagged};
use crate::error::{Error, Result};

use super::params::ModelParams;
use super::state::{StateLayout, SystemState};
use super::supply::{AntigenSupplySpec, NaiveSupplySpec};

/// Antigen pulse plus one naive influx per cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct Supplies {
    pub antigen: AntigenSupplySpec,
    pub naive: Vec<NaiveSupplySpec>,
}

/// The multi-cohort delay model, ready to integrate.
///
/// Lags are ordered `[sigma, tau]`. Per cohort `c`:
///
/// * `A' = f_A - (sum_c s_N N_c + s sum_c sum_i T_{c,i}) A - d_A A`
/// * `N' = f_N - r_N N A`
/// * `T_1' = 2 r_N N(t-sigma) A(t-sigma) - r_1 T_1 A - d T_1`
/// * `T_i' = 2 r_{i-1} e^{-d tau} T_{i-1}(t-tau) A(t-tau) - r_i T_i A - d T_i`
/// * `D_N' = r_N N A - r_N N(t-sigma) A(t-sigma)`
/// * `D_i' = r_i T_i A - r_i e^{-d tau} T_i(t-tau) A(t-tau) - d D_i`
///
/// `T_K` has no division outflow; its only sink is clearance.
#[derive(Debug, Clone)]
pub struct CloneModel {
    params: ModelParams,
    supplies: Supplies,
    layout: StateLayout,
    rates: Vec<f64>,
    survival: f64,
    delays: DelaySet,
}

impl CloneModel {
    pub fn new(params: ModelParams, supplies: Supplies) -> Result<Self> {
        params.validate()?;
        supplies.antigen.validate()?;
        if supplies.naive.is_empty() {
            return Err(Error::InvalidScenario("at least one cohort is required".into()));
        }
        for s in &supplies.naive {
            s.validate()?;
        }
        if params.sigma == params.tau {
            return Err(Error::InvalidParams("sigma and tau must differ".into()));
        }
        let layout = StateLayout::new(supplies.naive.len(), params.k);
        Ok(Self {
            rates: params.proliferation_rates()?,
            survival: params.transit_survival(),
            delays: DelaySet::new(vec![params.sigma, params.tau])?,
            params,
            supplies,
            layout,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn supplies(&self) -> &Supplies {
        &self.supplies
    }

    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    /// Derivative from raw slices; `lag_sigma` and `lag_tau` are the states at
    /// `t - sigma` and `t - tau`.
    pub fn derivative_into(&self, t: f64, now: &[f64], lag_sigma: &[f64], lag_tau: &[f64], out: &mut [f64]) {
        let p = &self.params;
        let layout = self.layout;
        let k = layout.divisions();
        let a = now[StateLayout::ANTIGEN];
        let a_sigma = lag_sigma[StateLayout::ANTIGEN];
        let a_tau = lag_tau[StateLayout::ANTIGEN];

        let mut grazing = 0.0;
        for (c, supply) in self.supplies.naive.iter().enumerate() {
            let n_idx = layout.naive(c);
            let t_rng = layout.activated(c);
            let d_rng = layout.transit(c);
            let dn_idx = layout.naive_transit(c);

            let n = now[n_idx];
            let tc = &now[t_rng.clone()];
            let tc_tau = &lag_tau[t_rng.clone()];
            let activation = p.r_n * n * a;
            let arrival = p.r_n * lag_sigma[n_idx] * a_sigma;

            grazing += p.s_n * n + p.s * tc.iter().sum::<f64>();

            out[n_idx] = supply.rate(t) - activation;
            out[dn_idx] = activation - arrival;

            let dt = &mut out[t_rng];
            for i in 0..k {
                let outflow = if i + 1 < k { self.rates[i] * tc[i] * a } else { 0.0 };
                let inflow = if i == 0 {
                    2.0 * arrival
                } else {
                    2.0 * self.rates[i - 1] * self.survival * tc_tau[i - 1] * a_tau
                };
                dt[i] = inflow - outflow - p.d * tc[i];
            }

            let dd = &mut out[d_rng.clone()];
            let transit = &now[d_rng];
            for i in 0..k - 1 {
                dd[i] = self.rates[i] * tc[i] * a - self.rates[i] * self.survival * tc_tau[i] * a_tau - p.d * transit[i];
            }
        }
        out[StateLayout::ANTIGEN] = self.supplies.antigen.rate(t) - grazing * a - p.d_a * a;
    }

    pub fn derivative_state(&self, t: f64, now: &SystemState, lag_sigma: &SystemState, lag_tau: &SystemState) -> Result<SystemState> {
        for s in [now, lag_sigma, lag_tau] {
            if s.layout() != self.layout {
                return Err(Error::InvalidScenario("state layout does not match the model".into()));
            }
        }
        let mut out = SystemState::zeros(self.layout);
        self.derivative_into(t, now.values(), lag_sigma.values(), lag_tau.values(), out.values_mut());
        if out.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t });
        }
        Ok(out)
    }
}

impl DelaySystem for CloneModel {
    fn dimension(&self) -> usize {
        self.layout.len()
    }

    fn delays(&self) -> &DelaySet {
        &self.delays
    }

    fn derivative(&self, t: f64, state: &[f64], lagged: Lagged<'_>, out: &mut [f64]) {
        self.derivative_into(t, state, lagged.get(0), lagged.get(1), out);
    }
}

/// Model right-hand side at `t` given the current and delayed states.
pub fn rhs(
    t: f64,
    now: &SystemState,
    lag_sigma: &SystemState,
    lag_tau: &SystemState,
    supplies: &Supplies,
    params: &ModelParams,
) -> Result<SystemState> {
    CloneModel::new(*params, supplies.clone())?.derivative_state(t, now, lag_sigma, lag_tau)
}
