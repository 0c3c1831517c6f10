//! Simulation and parameter estimation for a delay-differential model of
//! antigen-regulated CD4+ T cell clonal expansion.
//!
//! * [`kernel`]: parameters, supply pulses, state layout and the model right-hand side.
//! * [`dde`]: a fixed-step method-of-steps integrator with dense output.
//! * [`scenarios`]: the three transfer experiments and their observables.
//! * [`fit`]: bounded least-squares estimation with linearized confidence intervals.
//!
//! ```
//! use clonesim::scenarios::{build_experiment2, recruitment_fraction, run, Denominator, Group};
//! use clonesim::kernel::CohortSelector;
//!
//! let result = run(&build_experiment2(Group::I)).unwrap();
//! let pct = recruitment_fraction(&result, CohortSelector::One(0), Denominator::SuppliedDose).unwrap();
//! assert!((pct - 76.0).abs() < 5.0);
//! ```

pub mod dde;
pub mod error;
pub mod fit;
pub mod kernel;
pub mod scenarios;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/supplies.md")]
    mod supplies {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
