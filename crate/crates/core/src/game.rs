//! Leader-follower pricing game between the aggregator and its storage units.
//!
//! The aggregator picks a price schedule per unit, each unit answers with its
//! unique best response, and the aggregator collects the LMP value of the
//! resulting injections minus what it pays the units. The outer problem is
//! solved by a multistart compass search over prices with exact inner
//! responses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::SolverSettings;
use crate::storage::{self, PriceSchedule, StorageSchedule, StorageUnit};
use crate::system::System;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    /// Upper bound `M` on every price.
    pub price_bound: f64,
    pub managed_units: Vec<String>,
}

impl AggregatorConfig {
    /// Manages every unit of `system`.
    pub fn all(system: &System, price_bound: f64) -> Self {
        AggregatorConfig {
            price_bound,
            managed_units: system.units.iter().map(|u| u.id.clone()).collect(),
        }
    }

    pub fn validate(&self, system: &System) -> Result<()> {
        if !(self.price_bound > 0.0 && self.price_bound.is_finite()) {
            return Err(Error::validation("aggregator.price_bound", "must be positive and finite"));
        }
        if self.managed_units.is_empty() {
            return Err(Error::validation("aggregator.managed_units", "must not be empty"));
        }
        for (k, id) in self.managed_units.iter().enumerate() {
            if system.unit_index(id).is_none() {
                return Err(Error::validation(
                    format!("aggregator.managed_units[{k}]"),
                    format!("unknown unit {id}"),
                ));
            }
            if self.managed_units[..k].contains(id) {
                return Err(Error::validation(
                    format!("aggregator.managed_units[{k}]"),
                    format!("duplicate unit {id}"),
                ));
            }
        }
        Ok(())
    }

    /// Indices into `system.units` of the managed units, in system order.
    pub fn managed_indices(&self, system: &System) -> Vec<usize> {
        (0..system.units.len())
            .filter(|&i| self.managed_units.contains(&system.units[i].id))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    /// Final compass step; the search stops once the step falls below it.
    pub grid_resolution: f64,
    /// Random starts on top of the LMP warm start and the zero start.
    pub multistart: usize,
    /// Budget of leader-objective evaluations across all starts.
    pub max_evaluations: usize,
    pub seed: u64,
    pub solver: SolverSettings,
}

impl Default for SearchSettings {
    fn default() -> Self {
        SearchSettings {
            grid_resolution: 1e-7,
            multistart: 6,
            max_evaluations: 1_000_000,
            seed: 0,
            solver: SolverSettings::default(),
        }
    }
}

impl SearchSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.grid_resolution > 0.0) {
            return Err(Error::validation("search.grid_resolution", "must be positive"));
        }
        if self.max_evaluations == 0 {
            return Err(Error::validation("search.max_evaluations", "must be at least 1"));
        }
        self.solver.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeTag {
    /// Followers best-respond and the leader's prices are search-optimal.
    Equilibrium,
    /// Best point found before the search budget ran out.
    NonEquilibrium,
    /// An agreed point of the repeated game.
    Cooperative,
    /// Schedules chosen jointly by the coalition; no follower structure.
    Coalition,
}

/// Prices, schedules and profits for every unit of a system (unmanaged units
/// sit idle at zero prices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameOutcome {
    pub tag: OutcomeTag,
    pub prices: Vec<PriceSchedule>,
    pub schedules: Vec<StorageSchedule>,
    pub agg_profit: f64,
    pub su_profits: Vec<f64>,
    /// `[bus][t]`
    pub lmps_at_outcome: Vec<Vec<f64>>,
}

impl GameOutcome {
    /// Evaluates every profit at the given prices and schedules.
    pub fn evaluate(
        system: &System,
        tag: OutcomeTag,
        prices: Vec<PriceSchedule>,
        schedules: Vec<StorageSchedule>,
        settings: &SolverSettings,
    ) -> Result<Self> {
        let market = system.clear(&schedules, settings)?;
        let agg_profit = agg_profit_at_lmps(system, &market.lmps, &prices, &schedules);
        let su_profits = system
            .units
            .iter()
            .zip(&schedules)
            .zip(&prices)
            .map(|((u, s), p)| storage::su_profit(u, s, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(GameOutcome {
            tag,
            prices,
            schedules,
            agg_profit,
            su_profits,
            lmps_at_outcome: market.lmps,
        })
    }
}

fn agg_profit_at_lmps(
    system: &System,
    lmps: &[Vec<f64>],
    prices: &[PriceSchedule],
    schedules: &[StorageSchedule],
) -> f64 {
    system
        .units
        .iter()
        .zip(schedules)
        .zip(prices)
        .map(|((u, s), p)| {
            s.net()
                .iter()
                .enumerate()
                .map(|(t, d)| (lmps[u.bus][t] - p.tau[t]) * d)
                .sum::<f64>()
        })
        .sum()
}

/// Aggregator profit `sum_i sum_t (lambda_t[bus_i] - tau_it) d_it`, with LMPs
/// cleared at the injections the schedules imply.
pub fn agg_profit(
    system: &System,
    prices: &[PriceSchedule],
    schedules: &[StorageSchedule],
    settings: &SolverSettings,
) -> Result<f64> {
    if prices.len() != system.units.len() || schedules.len() != system.units.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} units, {} price schedules, {} schedules",
            system.units.len(),
            prices.len(),
            schedules.len()
        )));
    }
    if prices.iter().any(|p| p.tau.len() != system.horizon()) {
        return Err(Error::DimensionMismatch("price horizon".into()));
    }
    let market = system.clear(schedules, settings)?;
    Ok(agg_profit_at_lmps(system, &market.lmps, prices, schedules))
}

/// Leader problem restricted to the prices of `free` units, everything else held fixed.
struct LeaderProblem<'a> {
    system: &'a System,
    free: &'a [usize],
    base_prices: &'a [PriceSchedule],
    base_schedules: &'a [StorageSchedule],
    bound: f64,
    solver: &'a SolverSettings,
}

impl LeaderProblem<'_> {
    fn dim(&self) -> usize {
        self.free.len() * self.system.horizon()
    }

    fn split(&self, x: &[f64]) -> Result<(Vec<PriceSchedule>, Vec<StorageSchedule>)> {
        let horizon = self.system.horizon();
        let mut prices = self.base_prices.to_vec();
        let mut schedules = self.base_schedules.to_vec();
        for (k, &i) in self.free.iter().enumerate() {
            prices[i] = PriceSchedule {
                tau: x[k * horizon..(k + 1) * horizon].to_vec(),
            };
            schedules[i] = storage::su_best_response(&self.system.units[i], &prices[i], self.solver)?;
        }
        Ok((prices, schedules))
    }

    /// Leader profit; infeasible dispatch scores minus infinity.
    fn value(&self, x: &[f64]) -> Result<f64> {
        let (prices, schedules) = self.split(x)?;
        match agg_profit(self.system, &prices, &schedules, self.solver) {
            Ok(v) => Ok(v),
            Err(Error::InfeasibleDispatch { .. }) => Ok(f64::NEG_INFINITY),
            Err(e) => Err(e),
        }
    }

    fn clamp(&self, v: f64) -> f64 {
        v.clamp(0.0, self.bound)
    }
}

struct SearchResult {
    point: Vec<f64>,
    value: f64,
    evaluations: usize,
    exhausted: bool,
}

/// Compass search with step halving, polling `+-step` on every coordinate and
/// moving to the best strict improvement.
fn compass_search(
    problem: &LeaderProblem<'_>,
    start: Vec<f64>,
    initial_step: f64,
    min_step: f64,
    budget: usize,
    fixed: &[bool],
) -> Result<SearchResult> {
    let n = problem.dim();
    let mut x: Vec<f64> = start.into_iter().map(|v| problem.clamp(v)).collect();
    let mut fx = problem.value(&x)?;
    let mut evals = 1;
    let mut step = initial_step;
    while step >= min_step {
        let mut best: Option<(Vec<f64>, f64)> = None;
        for k in 0..n {
            if fixed[k] {
                continue;
            }
            for dir in [-1.0, 1.0] {
                let v = problem.clamp(x[k] + dir * step);
                if v == x[k] {
                    continue;
                }
                if evals >= budget {
                    return Ok(SearchResult {
                        point: x,
                        value: fx,
                        evaluations: evals,
                        exhausted: true,
                    });
                }
                let mut y = x.clone();
                y[k] = v;
                let fy = problem.value(&y)?;
                evals += 1;
                let threshold = best.as_ref().map_or(fx, |b| b.1);
                if fy > threshold + 1e-15 * (1.0 + threshold.abs()) {
                    best = Some((y, fy));
                }
            }
        }
        match best {
            Some((y, fy)) => {
                x = y;
                fx = fy;
            }
            None => step *= 0.5,
        }
    }
    Ok(SearchResult {
        point: x,
        value: fx,
        evaluations: evals,
        exhausted: false,
    })
}

fn same_value(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + a.abs().max(b.abs()))
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if (x - y).abs() > 1e-9 {
            return x < y;
        }
    }
    false
}

struct LeaderResult {
    point: Vec<f64>,
    evaluations: usize,
    exhausted: bool,
}

/// Multistart leader search followed by a greedy pass that moves each price,
/// in order, to zero whenever the remaining prices can recover the optimum.
fn search_leader(
    problem: &LeaderProblem<'_>,
    warm_start: Vec<f64>,
    search: &SearchSettings,
) -> Result<LeaderResult> {
    search.validate()?;
    let n = problem.dim();
    if n == 0 {
        return Ok(LeaderResult {
            point: vec![],
            evaluations: 1,
            exhausted: false,
        });
    }
    let mut starts = vec![warm_start, vec![0.0; n]];
    let mut rng = ChaCha8Rng::seed_from_u64(search.seed);
    for _ in 0..search.multistart {
        starts.push((0..n).map(|_| rng.gen_range(0.0..=problem.bound)).collect());
    }
    let per_start = (search.max_evaluations / (starts.len() + 1)).max(1);
    let initial_step = problem.bound / 8.0;
    let free = vec![false; n];
    let results = starts
        .into_par_iter()
        .map(|s| compass_search(problem, s, initial_step, search.grid_resolution, per_start, &free))
        .collect::<Result<Vec<_>>>()?;
    let mut exhausted = results.iter().any(|r| r.exhausted);
    let mut evaluations: usize = results.iter().map(|r| r.evaluations).sum();
    let mut best = &results[0];
    for r in &results[1..] {
        if r.value > best.value && !same_value(r.value, best.value)
            || same_value(r.value, best.value) && lex_less(&r.point, &best.point)
        {
            best = r;
        }
    }
    let (mut x, mut fx) = (best.point.clone(), best.value);
    let snap_budget = (search.max_evaluations.saturating_sub(evaluations) / n.max(1)).max(1);
    for k in 0..n {
        if x[k] == 0.0 {
            continue;
        }
        let mut y = x.clone();
        y[k] = 0.0;
        let mut locked = vec![false; n];
        locked[..=k].iter_mut().for_each(|l| *l = true);
        let r = compass_search(problem, y, initial_step, search.grid_resolution, snap_budget, &locked)?;
        evaluations += r.evaluations;
        exhausted |= r.exhausted;
        if r.value >= fx || same_value(r.value, fx) {
            x = r.point;
            fx = fx.max(r.value);
        }
    }
    Ok(LeaderResult {
        point: x,
        evaluations,
        exhausted,
    })
}

fn lmp_warm_start(system: &System, free: &[usize], bound: f64, solver: &SolverSettings) -> Result<Vec<f64>> {
    let market = system.clear(&system.zero_schedules(), solver)?;
    Ok(free
        .iter()
        .flat_map(|&i| market.lmps[system.units[i].bus].iter().map(|v| v.clamp(0.0, bound)))
        .collect())
}

fn run_leader(
    system: &System,
    config: &AggregatorConfig,
    free: &[usize],
    base_prices: &[PriceSchedule],
    base_schedules: &[StorageSchedule],
    search: &SearchSettings,
) -> Result<GameOutcome> {
    let problem = LeaderProblem {
        system,
        free,
        base_prices,
        base_schedules,
        bound: config.price_bound,
        solver: &search.solver,
    };
    let warm = lmp_warm_start(system, free, config.price_bound, &search.solver)?;
    let result = search_leader(&problem, warm, search)?;
    let (prices, schedules) = problem.split(&result.point)?;
    let exhausted = result.exhausted;
    let tag = if exhausted {
        OutcomeTag::NonEquilibrium
    } else {
        OutcomeTag::Equilibrium
    };
    let outcome = GameOutcome::evaluate(system, tag, prices, schedules, &search.solver)?;
    if exhausted {
        return Err(Error::SearchBudgetExceeded {
            evaluations: result.evaluations,
            best: Box::new(outcome),
        });
    }
    Ok(outcome)
}

/// Single-shot game: the aggregator prices every managed unit at once.
pub fn solve_stackelberg(
    system: &System,
    config: &AggregatorConfig,
    search: &SearchSettings,
) -> Result<GameOutcome> {
    config.validate(system)?;
    let free = config.managed_indices(system);
    let horizon = system.horizon();
    let base_prices = vec![PriceSchedule::zeros(horizon); system.units.len()];
    let base_schedules = system.zero_schedules();
    run_leader(system, config, &free, &base_prices, &base_schedules, search)
}

/// Game between the aggregator and unit `unit` alone, every other unit held at
/// `fixed_prices` / `fixed_schedules`.
pub fn defection_equilibrium(
    system: &System,
    config: &AggregatorConfig,
    fixed_prices: &[PriceSchedule],
    fixed_schedules: &[StorageSchedule],
    unit: usize,
    search: &SearchSettings,
) -> Result<GameOutcome> {
    config.validate(system)?;
    if unit >= system.units.len() || !config.managed_indices(system).contains(&unit) {
        return Err(Error::validation("unit", format!("{unit} is not a managed unit")));
    }
    if fixed_prices.len() != system.units.len() || fixed_schedules.len() != system.units.len() {
        return Err(Error::DimensionMismatch("fixed outcome size".into()));
    }
    run_leader(system, config, &[unit], fixed_prices, fixed_schedules, search)
}

/// Two-period helpers: with charge `x` in the first period and discharge
/// `eta x` in the second (`eta` the round-trip efficiency), prices enter only
/// through the spread `tau_1 - eta tau_2`.
pub mod scalar {
    use super::*;

    pub fn spread(unit: &StorageUnit, prices: &PriceSchedule) -> f64 {
        prices.tau[0] - unit.round_trip_efficiency() * prices.tau[1]
    }

    /// Lexicographically smallest nonnegative prices with the given spread.
    pub fn prices_for_spread(unit: &StorageUnit, spread: f64) -> PriceSchedule {
        if spread <= 0.0 {
            PriceSchedule {
                tau: vec![0.0, -spread / unit.round_trip_efficiency()],
            }
        } else {
            PriceSchedule {
                tau: vec![spread, 0.0],
            }
        }
    }

    /// Charge `x` first, discharge `eta x` second.
    pub fn schedule_for_charge(unit: &StorageUnit, x: f64) -> StorageSchedule {
        StorageSchedule {
            d_plus: vec![0.0, unit.round_trip_efficiency() * x],
            d_minus: vec![x, 0.0],
        }
    }

    pub fn charge_of(schedule: &StorageSchedule) -> f64 {
        schedule.d_minus[0] - schedule.d_plus[0]
    }

    pub fn is_scalarizable(system: &System) -> bool {
        system.horizon() == 2 && system.units.len() == 1 && system.units[0].soc_init == system.units[0].soc_min
    }
}
