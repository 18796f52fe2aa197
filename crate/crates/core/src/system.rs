//! A network, its demand and the storage units attached to it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{self, DemandProfile, MarketOutcome, Network, NodalInjections};
use crate::solver::SolverSettings;
use crate::storage::{StorageSchedule, StorageUnit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct System {
    pub network: Network,
    pub demand: DemandProfile,
    pub units: Vec<StorageUnit>,
}

impl System {
    pub fn new(network: Network, demand: DemandProfile, units: Vec<StorageUnit>) -> Result<Self> {
        let sys = System {
            network,
            demand,
            units,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.demand.validate(&self.network)?;
        for (i, u) in self.units.iter().enumerate() {
            u.validate(self.network.horizon, self.network.n_buses, &format!("units[{i}]"))?;
        }
        for (i, u) in self.units.iter().enumerate() {
            if self.units[..i].iter().any(|v| v.id == u.id) {
                return Err(Error::validation(format!("units[{i}].id"), format!("duplicate id {}", u.id)));
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.network.horizon
    }

    pub fn unit_index(&self, id: &str) -> Option<usize> {
        self.units.iter().position(|u| u.id == id)
    }

    pub fn zero_schedules(&self) -> Vec<StorageSchedule> {
        vec![StorageSchedule::zeros(self.horizon()); self.units.len()]
    }

    pub fn injections(&self, schedules: &[StorageSchedule]) -> Result<NodalInjections> {
        NodalInjections::from_schedules(self.network.n_buses, self.horizon(), &self.units, schedules)
    }

    pub fn storage_cost(&self, schedules: &[StorageSchedule]) -> f64 {
        self.units
            .iter()
            .zip(schedules)
            .map(|(u, s)| u.degradation_cost(s))
            .sum()
    }

    /// Market outcome with storage acting on `schedules`.
    pub fn clear(&self, schedules: &[StorageSchedule], settings: &SolverSettings) -> Result<MarketOutcome> {
        let inj = self.injections(schedules)?;
        market::clear_market(
            &self.network,
            &self.demand,
            &inj,
            self.storage_cost(schedules),
            settings,
        )
    }

    pub fn system_cost(&self, schedules: &[StorageSchedule], settings: &SolverSettings) -> Result<f64> {
        Ok(self.clear(schedules, settings)?.system_cost)
    }

    /// `S(q, 0)`.
    pub fn baseline_cost(&self, settings: &SolverSettings) -> Result<f64> {
        self.system_cost(&self.zero_schedules(), settings)
    }
}
