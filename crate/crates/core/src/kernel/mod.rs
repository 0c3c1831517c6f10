//! Domain types and the right-hand side of the clonal expansion model.

mod model;
mod params;
mod state;
mod supply;

pub use model::{rhs, CloneModel, Supplies};
pub use params::{proliferation_rate, ModelParams};
pub use state::{total_t_cells, CohortSelector, StateLayout, SystemState};
pub use supply::{antigen_supply_rate, naive_supply_rate, AntigenSupplySpec, NaiveSupplySpec};
