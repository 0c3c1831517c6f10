use std::ops::Range;

use crate::error::{Error, Result};

/// Index map of the flat state vector.
///
/// Slot 0 holds antigen. Each cohort then owns a contiguous block of `2K + 1`
/// slots: naive `N`, activated `T_1..T_K`, first-division transit `D_N` and
/// later-division transit `D_1..D_{K-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    cohorts: usize,
    divisions: usize,
}

impl StateLayout {
    pub fn new(cohorts: usize, divisions: usize) -> Self {
        assert!(cohorts >= 1, "at least one cohort");
        assert!(divisions >= 1, "at least one division compartment");
        Self { cohorts, divisions }
    }

    pub fn cohorts(&self) -> usize {
        self.cohorts
    }

    /// Truncation depth `K`.
    pub fn divisions(&self) -> usize {
        self.divisions
    }

    pub fn block_len(&self) -> usize {
        2 * self.divisions + 1
    }

    pub fn len(&self) -> usize {
        1 + self.cohorts * self.block_len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub const ANTIGEN: usize = 0;

    pub fn cohort(&self, c: usize) -> Range<usize> {
        let start = 1 + c * self.block_len();
        start..start + self.block_len()
    }

    pub fn naive(&self, c: usize) -> usize {
        1 + c * self.block_len()
    }

    /// Slots of `T_1..=T_K`.
    pub fn activated(&self, c: usize) -> Range<usize> {
        let n = self.naive(c);
        n + 1..n + 1 + self.divisions
    }

    pub fn naive_transit(&self, c: usize) -> usize {
        self.naive(c) + self.divisions + 1
    }

    /// Slots of `D_1..=D_{K-1}`.
    pub fn transit(&self, c: usize) -> Range<usize> {
        let start = self.naive_transit(c) + 1;
        start..start + self.divisions - 1
    }

    pub fn check_cohort(&self, c: usize) -> Result<()> {
        if c < self.cohorts {
            Ok(())
        } else {
            Err(Error::UnknownCohort { index: c, count: self.cohorts })
        }
    }
}

/// Which cohort(s) an observable refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CohortSelector {
    One(usize),
    All,
}

/// Antigen level plus per-cohort naive, activated and transit populations.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    layout: StateLayout,
    values: Vec<f64>,
}

impl SystemState {
    pub fn zeros(layout: StateLayout) -> Self {
        Self { layout, values: vec![0.0; layout.len()] }
    }

    pub fn from_values(layout: StateLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::InvalidScenario(format!(
                "state has {} entries, layout expects {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn antigen(&self) -> f64 {
        self.values[StateLayout::ANTIGEN]
    }

    pub fn set_antigen(&mut self, a: f64) {
        self.values[StateLayout::ANTIGEN] = a;
    }

    pub fn naive(&self, c: usize) -> f64 {
        self.values[self.layout.naive(c)]
    }

    pub fn set_naive(&mut self, c: usize, n: f64) {
        let i = self.layout.naive(c);
        self.values[i] = n;
    }

    pub fn activated(&self, c: usize) -> &[f64] {
        &self.values[self.layout.activated(c)]
    }

    pub fn activated_mut(&mut self, c: usize) -> &mut [f64] {
        let r = self.layout.activated(c);
        &mut self.values[r]
    }

    pub fn naive_transit(&self, c: usize) -> f64 {
        self.values[self.layout.naive_transit(c)]
    }

    pub fn set_naive_transit(&mut self, c: usize, v: f64) {
        let i = self.layout.naive_transit(c);
        self.values[i] = v;
    }

    pub fn transit(&self, c: usize) -> &[f64] {
        &self.values[self.layout.transit(c)]
    }

    pub fn transit_mut(&mut self, c: usize) -> &mut [f64] {
        let r = self.layout.transit(c);
        &mut self.values[r]
    }

    /// Activated plus transit cells of one cohort (everything but `N`).
    pub fn activated_total(&self, c: usize) -> f64 {
        self.activated(c).iter().sum::<f64>() + self.naive_transit(c) + self.transit(c).iter().sum::<f64>()
    }
}

/// `N + sum T_i + D_N + sum D_i` for one cohort, or summed over all cohorts.
/// A cell in transit counts once.
pub fn total_t_cells(state: &SystemState, cohort: CohortSelector) -> Result<f64> {
    let layout = state.layout();
    match cohort {
        CohortSelector::One(c) => {
            layout.check_cohort(c)?;
            Ok(state.values[layout.cohort(c)].iter().sum())
        }
        CohortSelector::All => Ok(state.values[1..].iter().sum()),
    }
}
