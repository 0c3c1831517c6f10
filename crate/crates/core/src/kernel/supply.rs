use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Gaussian influx of transferred naive cells into the lymph node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NaiveSupplySpec {
    /// Total cells delivered (cells per 10^5 leukocytes).
    pub dose: f64,
    /// Injection time (h).
    pub t_c: f64,
    /// Lag from injection to peak arrival (h).
    #[serde(default = "NaiveSupplySpec::default_offset")]
    pub offset: f64,
    /// Standard deviation of the arrival profile (h).
    #[serde(default = "NaiveSupplySpec::default_spread")]
    pub spread: f64,
    #[serde(default = "enabled_default")]
    pub enabled: bool,
}

fn enabled_default() -> bool {
    true
}

impl NaiveSupplySpec {
    fn default_offset() -> f64 {
        3.0
    }

    fn default_spread() -> f64 {
        0.75
    }

    pub fn new(dose: f64, t_c: f64) -> Self {
        Self {
            dose,
            t_c,
            offset: Self::default_offset(),
            spread: Self::default_spread(),
            enabled: true,
        }
    }

    pub fn disabled() -> Self {
        Self {
            dose: 0.0,
            t_c: 0.0,
            offset: Self::default_offset(),
            spread: Self::default_spread(),
            enabled: false,
        }
    }

    pub fn peak_time(&self) -> f64 {
        self.t_c + self.offset
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if !(self.dose.is_finite() && self.dose >= 0.0) {
            return Err(Error::InvalidScenario(format!("naive dose must be >= 0, got {}", self.dose)));
        }
        if !(self.spread.is_finite() && self.spread > 0.0) {
            return Err(Error::InvalidScenario(format!("naive spread must be > 0, got {}", self.spread)));
        }
        if !(self.t_c.is_finite() && self.offset.is_finite()) {
            return Err(Error::InvalidScenario("naive supply timing must be finite".into()));
        }
        Ok(())
    }

    pub fn rate(&self, t: f64) -> f64 {
        naive_supply_rate(t, self)
    }

    /// Cells delivered up to time `t`.
    pub fn cumulative(&self, t: f64) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        let z = (t - self.peak_time()) / self.spread;
        self.dose * 0.5 * erfc(-z / std::f64::consts::SQRT_2)
    }

    /// Total cells delivered over all time (zero when disabled).
    pub fn total(&self) -> f64 {
        if self.enabled {
            self.dose
        } else {
            0.0
        }
    }
}

/// Dose-scaled normal density centred `offset` hours after injection.
pub fn naive_supply_rate(t: f64, spec: &NaiveSupplySpec) -> f64 {
    if !spec.enabled || spec.dose == 0.0 {
        return 0.0;
    }
    let z = (t - spec.peak_time()) / spec.spread;
    spec.dose * (-0.5 * z * z).exp() / (spec.spread * (2.0 * PI).sqrt())
}

/// One-sided stable (Lévy) antigen arrival pulse.
///
/// With stability index 1/2 and skewness 1 the stable density has the closed form
/// `sqrt(gamma / 2 pi) exp(-gamma / 2x) / x^{3/2}` for `x = t - (t_k + onset) > 0`.
/// Other index/skewness pairs are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AntigenSupplySpec {
    #[serde(default = "AntigenSupplySpec::default_dose")]
    pub dose: f64,
    /// Injection time (h).
    pub t_k: f64,
    /// Lag between injection and arrival in the node (h).
    #[serde(default = "AntigenSupplySpec::default_onset")]
    pub onset: f64,
    #[serde(default = "AntigenSupplySpec::default_alpha")]
    pub alpha: f64,
    #[serde(default = "AntigenSupplySpec::default_beta")]
    pub beta: f64,
    #[serde(default = "AntigenSupplySpec::default_gamma")]
    pub gamma: f64,
}

impl AntigenSupplySpec {
    fn default_dose() -> f64 {
        1.0
    }
    fn default_onset() -> f64 {
        12.0
    }
    fn default_alpha() -> f64 {
        0.5
    }
    fn default_beta() -> f64 {
        1.0
    }
    fn default_gamma() -> f64 {
        1.0
    }

    pub fn new(t_k: f64) -> Self {
        Self {
            dose: Self::default_dose(),
            t_k,
            onset: Self::default_onset(),
            alpha: Self::default_alpha(),
            beta: Self::default_beta(),
            gamma: Self::default_gamma(),
        }
    }

    pub fn with_dose(mut self, dose: f64) -> Self {
        self.dose = dose;
        self
    }

    /// Start of the support of the pulse, `t_k + onset`.
    pub fn arrival_time(&self) -> f64 {
        self.t_k + self.onset
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha != 0.5 || self.beta != 1.0 {
            return Err(Error::InvalidScenario(format!(
                "antigen pulse supports only alpha = 0.5, beta = 1 (got alpha = {}, beta = {})",
                self.alpha, self.beta
            )));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::InvalidScenario(format!("antigen scale must be > 0, got {}", self.gamma)));
        }
        if !(self.dose.is_finite() && self.dose >= 0.0) {
            return Err(Error::InvalidScenario(format!("antigen dose must be >= 0, got {}", self.dose)));
        }
        if !(self.t_k.is_finite() && self.onset.is_finite()) {
            return Err(Error::InvalidScenario("antigen timing must be finite".into()));
        }
        Ok(())
    }

    pub fn rate(&self, t: f64) -> f64 {
        antigen_supply_rate(t, self)
    }

    /// Antigen delivered up to time `t`: `dose * erfc(sqrt(gamma / 2x))`.
    pub fn cumulative(&self, t: f64) -> f64 {
        let x = t - self.arrival_time();
        if x <= 0.0 {
            return 0.0;
        }
        self.dose * erfc((self.gamma / (2.0 * x)).sqrt())
    }
}

pub fn antigen_supply_rate(t: f64, spec: &AntigenSupplySpec) -> f64 {
    let x = t - spec.arrival_time();
    if x <= 0.0 || spec.dose == 0.0 {
        return 0.0;
    }
    let c = spec.gamma;
    spec.dose * (c / (2.0 * PI)).sqrt() * (-c / (2.0 * x)).exp() / (x * x.sqrt())
}
