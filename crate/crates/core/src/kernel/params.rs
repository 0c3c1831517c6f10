use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rate constants, delays and schedule parameters of the clonal expansion model.
///
/// Time is in hours, cell densities in cells per 10^5 leukocytes and antigen
/// in units of the injected dose. The serialized keys keep the conventional
/// symbols (`r_N`, `s_N`, `d_A`, `M`, `K`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    /// Maximum proliferation coefficient (1/h).
    pub r_e: f64,
    /// Naive activation coefficient (1/h).
    #[serde(rename = "r_N")]
    pub r_n: f64,
    /// Per-division proliferation decrement.
    pub g: f64,
    /// Division count at which the proliferation rate plateaus.
    #[serde(rename = "M")]
    pub m: usize,
    /// Clearance rate of activated cells (1/h).
    pub d: f64,
    /// Antigen downregulation by activated cells.
    pub s: f64,
    /// Antigen downregulation by naive cells.
    #[serde(rename = "s_N")]
    pub s_n: f64,
    /// Activation-to-first-division delay (h).
    pub sigma: f64,
    /// Delay of every subsequent division (h).
    pub tau: f64,
    /// Antigen decay rate (1/h).
    #[serde(rename = "d_A")]
    pub d_a: f64,
    /// Number of tracked division compartments.
    #[serde(rename = "K")]
    pub k: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            r_e: 1.5412,
            r_n: 0.0497,
            g: 0.0994,
            m: 10,
            d: 0.0009,
            s: 0.0009,
            s_n: 0.0,
            sigma: 24.0,
            tau: 3.9796,
            d_a: 0.01,
            k: 20,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("r_e", self.r_e),
            ("r_N", self.r_n),
            ("g", self.g),
            ("d", self.d),
            ("s", self.s),
            ("s_N", self.s_n),
            ("d_A", self.d_a),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParams(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [("sigma", self.sigma), ("tau", self.tau)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidParams(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.m < 1 {
            return Err(Error::InvalidParams("M must be at least 1".into()));
        }
        if self.k < self.m {
            return Err(Error::InvalidParams(format!(
                "K = {} must be at least M = {}",
                self.k, self.m
            )));
        }
        if self.g * self.m as f64 >= 1.0 {
            return Err(Error::InvalidParams(format!(
                "g * M = {} must stay below 1",
                self.g * self.m as f64
            )));
        }
        Ok(())
    }

    /// Proliferation rate of cells that have completed `division` divisions.
    pub fn proliferation_rate(&self, division: usize) -> Result<f64> {
        proliferation_rate(division, self)
    }

    /// `r_1..=r_K`, indexed from zero.
    pub fn proliferation_rates(&self) -> Result<Vec<f64>> {
        (1..=self.k).map(|i| proliferation_rate(i, self)).collect()
    }

    /// Fraction of cells surviving one subsequent-division delay, `exp(-d tau)`.
    pub fn transit_survival(&self) -> f64 {
        (-self.d * self.tau).exp()
    }
}

/// Linearly decreasing proliferation schedule with a plateau from division `M` on:
/// `r_e (1 - g (i - 1))` for `i < M`, `r_e (1 - g M)` otherwise.
pub fn proliferation_rate(division: usize, params: &ModelParams) -> Result<f64> {
    if division < 1 {
        return Err(Error::InvalidParams("division index starts at 1".into()));
    }
    let gm = params.g * params.m as f64;
    if gm >= 1.0 || params.g < 0.0 {
        return Err(Error::InvalidParams(format!("g * M = {gm} must lie in [0, 1)")));
    }
    let factor = if division < params.m {
        1.0 - params.g * (division - 1) as f64
    } else {
        1.0 - gm
    };
    Ok(params.r_e * factor)
}
