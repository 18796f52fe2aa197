//! Splitting the maximum coalition profit by bilateral Nash bargaining.
//!
//! With the schedules pinned at the profit-maximizing `d*`, the prices of unit
//! `i` matter only through the payment `s = tau_i' d_i*`: the unit earns
//! `s - c_i` and the aggregator `A - s`. A payment is sustainable when some
//! price schedule realizing it keeps the unit's cooperation margin
//! nonnegative; the margin is concave in `s`, so the sustainable payments
//! form an interval and the Nash product is maximized by clamping its
//! unconstrained maximizer into that interval.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coalition::{CoalitionObjective, ScheduleProgram};
use crate::cooperation::{validate_discount, Disagreement, MARGIN_TOLERANCE};
use crate::error::{Error, Result};
use crate::game::{self, scalar, AggregatorConfig, GameOutcome, OutcomeTag, SearchSettings};
use crate::solver::{self, ConvexProgram, Sensitivity, SmoothObjective, SolverError, SolverSettings};
use crate::storage::{self, PriceSchedule, StorageSchedule, StorageUnit};
use crate::system::System;
use crate::welfare;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateOptimum {
    /// Every unit of the system; unmanaged units idle.
    pub schedules: Vec<StorageSchedule>,
    /// `sum_t lambda_t' d_t - c(d)` at the cleared LMPs.
    pub profit: f64,
    pub lmp_revenue: f64,
    pub kkt_residual: f64,
}

fn clean_schedule(s: &StorageSchedule) -> StorageSchedule {
    let c = |v: &f64| if v.abs() < 1e-12 { 0.0 } else { *v };
    StorageSchedule {
        d_plus: s.d_plus.iter().map(c).collect(),
        d_minus: s.d_minus.iter().map(c).collect(),
    }
}

/// Joint schedules of the managed units maximizing the coalition profit with
/// LMPs responding to the injections.
pub fn max_aggregate_profit(
    system: &System,
    config: &AggregatorConfig,
    search: &SearchSettings,
) -> Result<AggregateOptimum> {
    config.validate(system)?;
    let free = config.managed_indices(system);
    let program = ScheduleProgram::new(system, free.clone(), CoalitionObjective::AggregateProfit, search.solver);
    let mut starts = vec![system.zero_schedules()];
    if let Ok(so) = welfare::social_optimum(system, &search.solver) {
        let mut s = system.zero_schedules();
        for &i in &free {
            s[i] = so.schedules[i].clone();
        }
        starts.push(s.iter().map(|x| x.scaled(0.5)).collect());
        starts.push(s);
    }
    let (schedules, sol) = program.optimize(&starts)?;
    let schedules: Vec<StorageSchedule> = schedules.iter().map(clean_schedule).collect();
    let market = system.clear(&schedules, &search.solver)?;
    let revenue = market.storage_revenue(&system.injections(&schedules)?);
    Ok(AggregateOptimum {
        profit: revenue - market.storage_cost,
        lmp_revenue: revenue,
        schedules,
        kkt_residual: sol.kkt_residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BargainingProblem {
    pub d_star: Vec<StorageSchedule>,
    pub pi_star: f64,
    pub managed: Vec<usize>,
    /// Per managed unit, valid while the other units are paid `reference_prices`.
    pub disagreement: Vec<Disagreement>,
    pub reference_prices: Vec<PriceSchedule>,
    pub discount: f64,
    pub price_bound: f64,
}

impl BargainingProblem {
    /// Aggregate optimum plus one defection equilibrium per managed unit,
    /// the other units held at `d*` and paid their LMPs.
    pub fn build(system: &System, config: &AggregatorConfig, discount: f64, search: &SearchSettings) -> Result<Self> {
        validate_discount(discount)?;
        let opt = max_aggregate_profit(system, config, search)?;
        let market = system.clear(&opt.schedules, &search.solver)?;
        let managed = config.managed_indices(system);
        let reference_prices: Vec<PriceSchedule> = system
            .units
            .iter()
            .enumerate()
            .map(|(i, u)| PriceSchedule {
                tau: if managed.contains(&i) {
                    market.lmps[u.bus].iter().map(|l| l.clamp(0.0, config.price_bound)).collect()
                } else {
                    vec![0.0; system.horizon()]
                },
            })
            .collect();
        let disagreement = managed
            .iter()
            .map(|&i| {
                game::defection_equilibrium(system, config, &reference_prices, &opt.schedules, i, search).map(|o| {
                    Disagreement {
                        agg: o.agg_profit,
                        su: o.su_profits[i],
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BargainingProblem {
            d_star: opt.schedules,
            pi_star: opt.profit,
            managed,
            disagreement,
            reference_prices,
            discount,
            price_bound: config.price_bound,
        })
    }

    fn slot(&self, unit: usize) -> Result<usize> {
        self.managed
            .iter()
            .position(|&i| i == unit)
            .ok_or_else(|| Error::validation("unit", format!("{unit} is not a managed unit")))
    }

    /// Disagreement profits of `unit` when the other units are paid `prices`;
    /// only the aggregator's payments to the others change.
    pub fn disagreement_at(&self, unit: usize, prices: &[PriceSchedule]) -> Result<Disagreement> {
        let base = self.disagreement[self.slot(unit)?];
        let shift: f64 = (0..self.d_star.len())
            .filter(|&j| j != unit)
            .map(|j| self.reference_prices[j].payment(&self.d_star[j]) - prices[j].payment(&self.d_star[j]))
            .sum();
        Ok(Disagreement {
            agg: base.agg + shift,
            su: base.su,
        })
    }
}

/// Value of the unit's best response, `max_d tau' d - c(d)`, as a function of
/// its prices. Convex, with gradient the best-response net injection.
struct DeviationValue<'a> {
    unit: &'a StorageUnit,
    solver: SolverSettings,
}

impl DeviationValue<'_> {
    fn prices(x: &DVector<f64>) -> PriceSchedule {
        PriceSchedule {
            tau: x.iter().copied().collect(),
        }
    }
}

fn to_solver(e: Error) -> SolverError {
    SolverError::Evaluation(e.to_string())
}

impl SmoothObjective for DeviationValue<'_> {
    fn value(&self, x: &DVector<f64>) -> Result<f64, SolverError> {
        let p = Self::prices(x);
        let br = storage::su_best_response(self.unit, &p, &self.solver).map_err(to_solver)?;
        storage::su_profit(self.unit, &br, &p).map_err(to_solver)
    }

    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
        let br = storage::su_best_response(self.unit, &Self::prices(x), &self.solver).map_err(to_solver)?;
        Ok(DVector::from_vec(br.net()))
    }

    fn hessian(&self, x: &DVector<f64>) -> Result<Option<DMatrix<f64>>, SolverError> {
        let p = Self::prices(x);
        let t_len = x.len();
        let program = storage::best_response_program(self.unit, &p);
        let (_, sol) = storage::su_best_response_solution(self.unit, &p, &self.solver).map_err(to_solver)?;
        let sens = Sensitivity::new(&program, &sol)?;
        let mut h = DMatrix::zeros(t_len, t_len);
        for t in 0..t_len {
            let mut d_lin = DVector::zeros(2 * t_len);
            d_lin[t] = -1.0;
            d_lin[t_len + t] = 1.0;
            let der = sens.apply(&d_lin, &DVector::zeros(program.b_eq.len()), &DVector::zeros(program.h_ineq.len()));
            for r in 0..t_len {
                h[(r, t)] = der.point[r] - der.point[t_len + r];
            }
        }
        // the value is piecewise quadratic and flat wherever the response sits
        // at a vertex; a small metric term keeps the Newton model strictly convex
        let reg = DMatrix::identity(t_len, t_len) * 1e-4;
        Ok(Some((&h + h.transpose()) * 0.5 + reg))
    }
}

/// Bargaining between the aggregator and one unit over the payment `s`.
struct PaymentSlice<'a> {
    unit: &'a StorageUnit,
    net: Vec<f64>,
    cost: f64,
    /// Aggregator profit before paying this unit.
    available: f64,
    dis: Disagreement,
    delta: f64,
    bound: f64,
    solver: SolverSettings,
    /// Charge `x` when the schedule is a two-period charge-discharge cycle.
    scalar_charge: Option<f64>,
}

impl<'a> PaymentSlice<'a> {
    fn new(
        system: &'a System,
        problem: &BargainingProblem,
        unit: usize,
        prices: &[PriceSchedule],
        schedule: &StorageSchedule,
        solver: &SolverSettings,
    ) -> Result<Self> {
        let mut schedules = problem.d_star.clone();
        schedules[unit] = schedule.clone();
        let market = system.clear(&schedules, solver)?;
        let revenue = market.storage_revenue(&system.injections(&schedules)?);
        let others: f64 = (0..schedules.len())
            .filter(|&j| j != unit)
            .map(|j| prices[j].payment(&schedules[j]))
            .sum();
        let u = &system.units[unit];
        let net = schedule.net();
        let scalar_charge = (scalar::is_scalarizable(system)
            && net[0] < -1e-12
            && (net[1] + u.round_trip_efficiency() * net[0]).abs() <= 1e-12)
            .then(|| -net[0]);
        Ok(PaymentSlice {
            unit: u,
            cost: u.degradation_cost(schedule),
            net,
            available: revenue - others,
            dis: problem.disagreement_at(unit, prices)?,
            delta: problem.discount,
            bound: problem.price_bound,
            solver: *solver,
            scalar_charge,
        })
    }

    fn s_range(&self) -> (f64, f64) {
        self.net.iter().fold((0.0, 0.0), |(lo, hi), n| {
            (lo + (self.bound * n).min(0.0), hi + (self.bound * n).max(0.0))
        })
    }

    /// Smallest best-response value over prices paying `s`, and the minimizing prices.
    fn deviation(&self, s: f64) -> Result<(f64, PriceSchedule)> {
        let (lo, hi) = self.s_range();
        let s = s.clamp(lo, hi);
        if let Some(x) = self.scalar_charge {
            let p = scalar::prices_for_spread(self.unit, -s / x);
            let br = storage::su_best_response(self.unit, &p, &self.solver)?;
            return Ok((storage::su_profit(self.unit, &br, &p)?, p));
        }
        let t_len = self.net.len();
        let f = DeviationValue {
            unit: self.unit,
            solver: self.solver,
        };
        let g = DMatrix::from_fn(2 * t_len, t_len, |r, c| {
            if r == c {
                1.0
            } else if r == c + t_len {
                -1.0
            } else {
                0.0
            }
        });
        let h = DVector::from_fn(2 * t_len, |r, _| if r < t_len { self.bound } else { 0.0 });
        let mut program = ConvexProgram::smooth(t_len, &f).with_inequalities(g, h);
        if self.net.iter().any(|n| n.abs() > 1e-12) {
            program = program.with_equalities(
                DMatrix::from_row_slice(1, t_len, &self.net),
                DVector::from_element(1, s),
            );
        }
        let sol = solver::solve(&program, &self.solver)?;
        let p = PriceSchedule {
            tau: sol.point.iter().map(|v| v.clamp(0.0, self.bound)).collect(),
        };
        Ok((sol.objective_value, p))
    }

    /// Best unit cooperation margin over prices paying `s`.
    fn alpha_s(&self, s: f64) -> Result<f64> {
        let (v, _) = self.deviation(s)?;
        Ok(s - self.cost - (1.0 - self.delta) * v - self.delta * self.dis.su)
    }

    /// Payments keeping both players individually rational and the aggregator cooperative.
    fn rational_range(&self) -> (f64, f64) {
        let (lo, hi) = self.s_range();
        (lo.max(self.cost + self.dis.su), hi.min(self.available - self.dis.agg))
    }

    /// Payments on which the unit cooperates, within `[lo, hi]`.
    fn su_interval(&self, lo: f64, hi: f64) -> Result<Option<(f64, f64)>> {
        if hi < lo - 1e-12 {
            return Ok(None);
        }
        let ok = |a: f64| a >= -MARGIN_TOLERANCE;
        if hi - lo <= 1e-12 {
            return Ok(ok(self.alpha_s(lo)?).then_some((lo, lo.max(hi))));
        }
        // golden-section search for the peak of the concave margin
        let ratio = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (lo, hi);
        let mut c = b - ratio * (b - a);
        let mut d = a + ratio * (b - a);
        let (mut fc, mut fd) = (self.alpha_s(c)?, self.alpha_s(d)?);
        while b - a > 1e-11 * (1.0 + lo.abs().max(hi.abs())) {
            if fc >= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - ratio * (b - a);
                fc = self.alpha_s(c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + ratio * (b - a);
                fd = self.alpha_s(d)?;
            }
        }
        let mut peak = 0.5 * (a + b);
        let mut fpeak = self.alpha_s(peak)?;
        for (p, fp) in [(lo, self.alpha_s(lo)?), (hi, self.alpha_s(hi)?)] {
            if fp > fpeak {
                peak = p;
                fpeak = fp;
            }
        }
        if !ok(fpeak) {
            return Ok(None);
        }
        if fpeak < 0.0 {
            return Ok(Some((peak, peak)));
        }
        let edge = |inside: f64, outside: f64| -> Result<f64> {
            if self.alpha_s(outside)? >= 0.0 {
                return Ok(outside);
            }
            let (mut good, mut bad) = (inside, outside);
            while (good - bad).abs() > 1e-12 {
                let mid = 0.5 * (good + bad);
                if self.alpha_s(mid)? >= 0.0 {
                    good = mid;
                } else {
                    bad = mid;
                }
            }
            Ok(good)
        };
        Ok(Some((edge(peak, lo)?, edge(peak, hi)?)))
    }

    /// Sustainable and individually rational payments.
    fn feasible_interval(&self) -> Result<Option<(f64, f64)>> {
        let (lo, hi) = self.rational_range();
        self.su_interval(lo, hi)
    }

    fn split(&self, s: f64) -> (f64, f64) {
        (s - self.cost, self.available - s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BargainingSlice {
    pub unit: String,
    /// `tau_i' d_i*`
    pub payment: f64,
    pub pi_s: f64,
    /// Aggregator profit with every unit paid its current agreed prices.
    pub pi_a: f64,
    pub nash_product: f64,
    /// False when a cooperation or rationality bound moved the split.
    pub interior: bool,
    pub disagreement: Disagreement,
    /// Range of sustainable payments, when it was needed.
    pub payment_interval: Option<(f64, f64)>,
}

/// Nash bargaining solution for `unit` with every other unit paid `prices`.
pub fn nash_bargain(
    system: &System,
    problem: &BargainingProblem,
    unit: usize,
    prices: &[PriceSchedule],
    solver: &SolverSettings,
) -> Result<(BargainingSlice, PriceSchedule)> {
    problem.slot(unit)?;
    let slice = PaymentSlice::new(system, problem, unit, prices, &problem.d_star[unit], solver)?;
    solve_slice(&slice, unit, &system.units[unit].id)
}

fn solve_slice(slice: &PaymentSlice<'_>, unit: usize, id: &str) -> Result<(BargainingSlice, PriceSchedule)> {
    let (lo, hi) = slice.rational_range();
    let s_free = 0.5 * (slice.cost + slice.dis.su + slice.available - slice.dis.agg);
    let interior = lo <= s_free + 1e-12 && s_free <= hi + 1e-12 && slice.alpha_s(s_free)? >= -MARGIN_TOLERANCE;
    let (s, interval) = if interior {
        (s_free, None)
    } else {
        let (a, b) = slice.feasible_interval()?.ok_or(Error::EmptyBargainingSet { unit })?;
        (s_free.clamp(a, b), Some((a, b)))
    };
    let (_, prices) = slice.deviation(s)?;
    let (pi_s, pi_a) = slice.split(s);
    Ok((
        BargainingSlice {
            unit: id.to_string(),
            payment: s,
            pi_s,
            pi_a,
            nash_product: (pi_s - slice.dis.su) * (pi_a - slice.dis.agg),
            interior,
            disagreement: slice.dis,
            payment_interval: interval,
        },
        prices,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BargainingOutcome {
    pub agreed_prices: Vec<PriceSchedule>,
    pub agreed_schedules: Vec<StorageSchedule>,
    pub agg_profit: f64,
    pub su_profits: Vec<f64>,
    pub pi_star: f64,
    pub slices: Vec<BargainingSlice>,
    pub sweeps: usize,
    /// `tau_1 - eta tau_2` for a single two-period unit.
    pub spread: Option<f64>,
}

impl BargainingOutcome {
    pub fn to_game_outcome(&self, system: &System, solver: &SolverSettings) -> Result<GameOutcome> {
        GameOutcome::evaluate(
            system,
            OutcomeTag::Cooperative,
            self.agreed_prices.clone(),
            self.agreed_schedules.clone(),
            solver,
        )
    }
}

pub const MAX_SWEEPS: usize = 100;
pub const SWEEP_TOLERANCE: f64 = 1e-8;

/// Bilateral bargaining with each managed unit in turn, others held at their
/// latest agreement, until no payment moves by more than `SWEEP_TOLERANCE`.
pub fn bargain(system: &System, problem: &BargainingProblem, solver: &SolverSettings) -> Result<BargainingOutcome> {
    let mut prices = problem.reference_prices.clone();
    let mut payments: Vec<f64> = (0..prices.len()).map(|j| prices[j].payment(&problem.d_star[j])).collect();
    let mut slices = Vec::new();
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut change: f64 = 0.0;
        slices.clear();
        for &i in &problem.managed {
            let (slice, p) = nash_bargain(system, problem, i, &prices, solver)?;
            change = change.max((slice.payment - payments[i]).abs());
            payments[i] = slice.payment;
            prices[i] = p;
            slices.push(slice);
        }
        if change < SWEEP_TOLERANCE {
            break;
        }
    }
    let su_profits = system
        .units
        .iter()
        .zip(&problem.d_star)
        .zip(&prices)
        .map(|((u, s), p)| storage::su_profit(u, s, p))
        .collect::<Result<Vec<_>>>()?;
    let agg_profit = game::agg_profit(system, &prices, &problem.d_star, solver)?;
    // report every slice against the final agreement
    for (slice, &i) in slices.iter_mut().zip(&problem.managed) {
        slice.pi_a = agg_profit;
        slice.pi_s = su_profits[i];
        slice.disagreement = problem.disagreement_at(i, &prices)?;
        slice.nash_product = (slice.pi_s - slice.disagreement.su) * (slice.pi_a - slice.disagreement.agg);
    }
    let spread = scalar::is_scalarizable(system).then(|| scalar::spread(&system.units[0], &prices[0]));
    Ok(BargainingOutcome {
        agreed_prices: prices,
        agreed_schedules: problem.d_star.clone(),
        agg_profit,
        su_profits,
        pi_star: problem.pi_star,
        slices,
        sweeps,
        spread,
    })
}

/// Index of the point with the largest Nash product among those weakly
/// improving on `dis` in both coordinates; points are `(pi_s, pi_a)`.
pub fn nash_select(points: &[(f64, f64)], dis: Disagreement) -> Option<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, (s, a))| *s >= dis.su && *a >= dis.agg)
        .map(|(k, (s, a))| (k, (s - dis.su) * (a - dis.agg)))
        .fold(None, |best: Option<(usize, f64)>, (k, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((k, v)),
        })
        .map(|(k, _)| k)
}

/// Payments the unit accepts (cooperation margin nonnegative) at schedule
/// `d_i*`, as unit profits, ignoring the aggregator's side.
pub fn su_profit_bounds(
    system: &System,
    problem: &BargainingProblem,
    unit: usize,
    prices: &[PriceSchedule],
    solver: &SolverSettings,
) -> Result<Option<(f64, f64)>> {
    let slice = PaymentSlice::new(system, problem, unit, prices, &problem.d_star[unit], solver)?;
    let (lo, hi) = slice.s_range();
    Ok(slice.su_interval(lo, hi)?.map(|(a, b)| (a - slice.cost, b - slice.cost)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub pi_s: f64,
    pub pi_a: f64,
    pub on_pareto_line: bool,
    pub on_symmetry_line: bool,
}

/// Largest `theta` with `theta d` feasible for the unit, searched in `[1, 100]`.
fn max_scale(unit: &StorageUnit, schedule: &StorageSchedule) -> f64 {
    if !storage::feasibility_check(unit, &schedule.scaled(100.0)).is_empty() {
        let (mut good, mut bad) = (1.0, 100.0);
        while bad - good > 1e-10 {
            let mid = 0.5 * (good + bad);
            if storage::feasibility_check(unit, &schedule.scaled(mid)).is_empty() {
                good = mid;
            } else {
                bad = mid;
            }
        }
        good
    } else {
        100.0
    }
}

/// Profit pairs of unit `unit`'s bargaining problem: the edges of the
/// sustainable set along scaled copies of `d_i*`, the Pareto line at `d_i*`,
/// the symmetry line from the disagreement point, and the solution.
pub fn bargaining_frontier(
    system: &System,
    problem: &BargainingProblem,
    outcome: &BargainingOutcome,
    unit: usize,
    n_points: usize,
    solver: &SolverSettings,
) -> Result<Vec<FrontierPoint>> {
    let slot = problem.slot(unit)?;
    let prices = &outcome.agreed_prices;
    let n = n_points.max(2);
    let d_i = &problem.d_star[unit];
    let slice = PaymentSlice::new(system, problem, unit, prices, d_i, solver)?;
    let mut rows = Vec::new();

    let theta_max = if d_i.net().iter().all(|v| v.abs() < 1e-12) {
        0.0
    } else {
        max_scale(&system.units[unit], d_i)
    };
    let thetas: Vec<f64> = (1..=n)
        .map(|k| theta_max * k as f64 / n as f64)
        .filter(|t| (t - 1.0).abs() > 1e-12)
        .collect();
    let edges: Vec<Vec<FrontierPoint>> = thetas
        .par_iter()
        .map(|&theta| {
            let s = PaymentSlice::new(system, problem, unit, prices, &d_i.scaled(theta), solver)?;
            let (lo, hi) = s.rational_range();
            Ok(s.su_interval(lo, hi)?
                .map(|(a, b)| {
                    [a, b]
                        .iter()
                        .map(|&p| {
                            let (pi_s, pi_a) = s.split(p);
                            FrontierPoint {
                                pi_s,
                                pi_a,
                                on_pareto_line: false,
                                on_symmetry_line: false,
                            }
                        })
                        .collect()
                })
                .unwrap_or_default())
        })
        .collect::<Result<_>>()?;
    rows.extend(edges.into_iter().flatten());

    if let Some((a, b)) = slice.feasible_interval()? {
        for k in 0..n {
            let (pi_s, pi_a) = slice.split(a + (b - a) * k as f64 / (n - 1) as f64);
            rows.push(FrontierPoint {
                pi_s,
                pi_a,
                on_pareto_line: true,
                on_symmetry_line: false,
            });
        }
    }
    let dis = slice.dis;
    let sol = &outcome.slices[slot];
    let (pi_s, pi_a) = slice.split(sol.payment);
    for k in 0..n - 1 {
        let f = k as f64 / (n - 1) as f64;
        rows.push(FrontierPoint {
            pi_s: dis.su + f * (pi_s - dis.su),
            pi_a: dis.agg + f * (pi_a - dis.agg),
            on_pareto_line: false,
            on_symmetry_line: true,
        });
    }
    rows.push(FrontierPoint {
        pi_s,
        pi_a,
        on_pareto_line: true,
        on_symmetry_line: sol.interior,
    });
    Ok(rows)
}

pub fn write_frontier_csv<W: Write>(points: &[FrontierPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pi_s", "pi_a", "on_pareto_line", "on_symmetry_line"])?;
    for p in points {
        w.write_record([
            format!("{:.10}", p.pi_s),
            format!("{:.10}", p.pi_a),
            p.on_pareto_line.to_string(),
            p.on_symmetry_line.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cooperation::{margins_given, scalar_agreement, RepeatedGameConfig};
    use crate::market::{DemandProfile, Network};
    use crate::storage::fixtures::example_unit;
    use crate::system::fixtures::example_system;
    use approx::assert_abs_diff_eq;
    use std::sync::OnceLock;

    const X_STAR: f64 = 4.75 / 5.7075;

    fn settings() -> SolverSettings {
        SolverSettings::default()
    }

    fn example() -> &'static (System, BargainingProblem, BargainingOutcome) {
        static CELL: OnceLock<(System, BargainingProblem, BargainingOutcome)> = OnceLock::new();
        CELL.get_or_init(|| {
            let sys = example_system();
            let cfg = AggregatorConfig::all(&sys, 10.0);
            let prob = BargainingProblem::build(&sys, &cfg, 0.98, &SearchSettings::default()).unwrap();
            let out = bargain(&sys, &prob, &settings()).unwrap();
            (sys, prob, out)
        })
    }

    fn pi(x: f64) -> f64 {
        4.75 * x - 2.85375 * x * x
    }

    #[test]
    fn aggregate_optimum_running_example() {
        let sys = example_system();
        let opt = max_aggregate_profit(&sys, &AggregatorConfig::all(&sys, 10.0), &SearchSettings::default()).unwrap();
        let x = scalar::charge_of(&opt.schedules[0]);
        assert_abs_diff_eq!(x, X_STAR, epsilon = 1e-6);
        assert_abs_diff_eq!(opt.profit, 1.976563, epsilon = 1e-5);
        assert!(opt.kkt_residual <= 1e-8);
        let grid = (0..=10_000).map(|k| k as f64 * 1e-4).max_by(|a, b| pi(*a).total_cmp(&pi(*b))).unwrap();
        assert!((x - grid).abs() <= 1e-3);
    }

    #[test]
    fn flat_prices_leave_nothing_to_arbitrage() {
        let net = Network::single_bus(vec![2.0, 2.0], vec![0.0, 0.0]);
        let sys = System::new(net, DemandProfile { q: vec![vec![1.0, 1.0]] }, vec![example_unit()]).unwrap();
        let opt = max_aggregate_profit(&sys, &AggregatorConfig::all(&sys, 10.0), &SearchSettings::default()).unwrap();
        assert!(opt.schedules[0].net().iter().all(|v| v.abs() < 1e-9));
        assert!(opt.profit.abs() < 1e-9);
    }

    #[test]
    fn running_example_bargain() {
        let (_, prob, out) = example();
        assert_abs_diff_eq!(prob.disagreement[0].agg, 4.75f64.powi(2) / 15.22, epsilon = 1e-6);
        let dtau = out.spread.unwrap();
        assert_abs_diff_eq!(dtau, -1.3112, epsilon = 1e-3);
        assert_abs_diff_eq!(out.su_profits[0], 0.43238, epsilon = 1e-4);
        assert_abs_diff_eq!(out.agg_profit, 1.54419, epsilon = 1e-4);
        assert_abs_diff_eq!(out.agg_profit + out.su_profits[0], prob.pi_star, epsilon = 1e-6);
        let s = &out.slices[0];
        assert!(s.interior);
        // symmetric split of the surplus
        assert_abs_diff_eq!(s.pi_s - s.disagreement.su, s.pi_a - s.disagreement.agg, epsilon = 1e-9);
        assert_eq!(out.agreed_schedules, prob.d_star);
    }

    #[test]
    fn agreement_is_sustainable() {
        let (sys, prob, out) = example();
        let cfg = AggregatorConfig::all(sys, 10.0);
        let rep = RepeatedGameConfig {
            discount: 0.98,
            agreed_prices: out.agreed_prices.clone(),
            agreed_schedules: out.agreed_schedules.clone(),
        };
        let r = margins_given(sys, &cfg, &rep, &prob.disagreement, &settings()).unwrap();
        assert!(r.cooperative);
    }

    #[test]
    fn grid_oracle_on_spread() {
        let (_, prob, out) = example();
        let dis = prob.disagreement[0];
        let c = 0.95125 * X_STAR * X_STAR;
        let avail = pi(X_STAR) + c;
        let best = (0..=20_000)
            .map(|k| -2.0 + k as f64 * 1e-4)
            .filter(|d| {
                let pi_s = -d * X_STAR - c;
                let alpha_s = pi_s - 0.02 * d * d / 3.805 - 0.98 * dis.su;
                alpha_s >= 0.0 && avail + d * X_STAR >= dis.agg
            })
            .max_by(|a, b| {
                let f = |d: f64| (-d * X_STAR - c - dis.su) * (avail + d * X_STAR - dis.agg);
                f(*a).total_cmp(&f(*b))
            })
            .unwrap();
        assert!((best - out.spread.unwrap()).abs() <= 1e-3);
    }

    #[test]
    fn pareto_and_irrelevant_alternatives() {
        let (sys, prob, out) = example();
        let slice = PaymentSlice::new(sys, prob, 0, &out.agreed_prices, &prob.d_star[0], &settings()).unwrap();
        let (a, b) = slice.feasible_interval().unwrap().unwrap();
        let mut pts: Vec<(f64, f64)> = (0..=400).map(|k| slice.split(a + (b - a) * k as f64 / 400.0)).collect();
        pts.push((out.su_profits[0], out.agg_profit));
        let sol = (out.su_profits[0], out.agg_profit);
        assert!(!pts.iter().any(|p| p.0 > sol.0 + 1e-9 && p.1 > sol.1 + 1e-9));
        let k = nash_select(&pts, slice.dis).unwrap();
        assert_eq!(pts[k], sol);
        let thinned: Vec<_> = pts.iter().enumerate().filter(|(j, p)| j % 3 == 0 || **p == sol).map(|(_, p)| *p).collect();
        assert_eq!(thinned[nash_select(&thinned, slice.dis).unwrap()], sol);
    }

    #[test]
    fn larger_outside_option_helps_aggregator() {
        let (sys, prob, out) = example();
        let mut richer = prob.clone();
        richer.disagreement[0].agg += 0.05;
        let out2 = bargain(sys, &richer, &settings()).unwrap();
        assert!(out2.agg_profit >= out.agg_profit);
        assert_abs_diff_eq!(out2.agg_profit - out.agg_profit, 0.025, epsilon = 1e-9);
    }

    #[test]
    fn equal_outside_options_split_evenly() {
        let (sys, prob, _) = example();
        let mut even = prob.clone();
        even.disagreement[0] = Disagreement { agg: 0.5, su: 0.5 };
        let out = bargain(sys, &even, &settings()).unwrap();
        let s = &out.slices[0];
        if s.interior {
            assert_abs_diff_eq!(s.pi_s - 0.5, s.pi_a - 0.5, epsilon = 1e-9);
            assert_abs_diff_eq!(s.pi_s - 0.5, 0.5 * (prob.pi_star - 1.0), epsilon = 1e-9);
        } else {
            // the unit's cooperation bound binds; the split is clamped
            assert!(s.payment_interval.is_some());
        }
    }

    #[test]
    fn impatient_unit_cannot_bargain() {
        let (sys, prob, _) = example();
        let mut p = prob.clone();
        p.discount = 1e-3;
        assert!(matches!(bargain(sys, &p, &settings()), Err(Error::EmptyBargainingSet { unit: 0 })));
    }

    #[test]
    fn general_deviation_matches_scalar_path() {
        let (sys, prob, out) = example();
        let mut slice = PaymentSlice::new(sys, prob, 0, &out.agreed_prices, &prob.d_star[0], &settings()).unwrap();
        for s in [0.2, 1.0, 1.09, 1.4] {
            let (v_scalar, _) = slice.deviation(s).unwrap();
            slice.scalar_charge = None;
            let (v_general, p) = slice.deviation(s).unwrap();
            slice.scalar_charge = Some(X_STAR);
            assert_abs_diff_eq!(v_scalar, v_general, epsilon = 1e-7);
            assert_abs_diff_eq!(p.payment(&prob.d_star[0]), s, epsilon = 1e-8);
        }
    }

    #[test]
    fn frontier_geometry() {
        let (sys, prob, out) = example();
        let pts = bargaining_frontier(sys, prob, out, 0, 15, &settings()).unwrap();
        let sol = pts.last().unwrap();
        assert!(sol.on_pareto_line && sol.on_symmetry_line);
        assert_abs_diff_eq!(sol.pi_s, 0.43238, epsilon = 1e-4);
        assert_abs_diff_eq!(sol.pi_a, 1.54419, epsilon = 1e-4);
        let cfg = AggregatorConfig::all(sys, 10.0);
        let c = 0.95125 * X_STAR * X_STAR;
        for p in pts.iter().filter(|p| p.on_pareto_line) {
            assert_abs_diff_eq!(p.pi_s + p.pi_a, prob.pi_star, epsilon = 1e-8);
            let dtau = -(p.pi_s + c) / X_STAR;
            let rep = scalar_agreement(sys, 0.98, X_STAR, dtau);
            let r = margins_given(sys, &cfg, &rep, &prob.disagreement, &settings()).unwrap();
            assert!(r.cooperative, "{p:?} {r:?}");
        }
        let dis = prob.disagreement[0];
        for p in pts.iter().filter(|p| p.on_symmetry_line) {
            assert_abs_diff_eq!(p.pi_a - p.pi_s, dis.agg - dis.su, epsilon = 1e-8);
        }
        assert!(pts.iter().any(|p| !p.on_pareto_line && !p.on_symmetry_line));
        let mut buf = Vec::new();
        write_frontier_csv(&pts, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("pi_s,pi_a,on_pareto_line,on_symmetry_line\n"));
    }

    #[test]
    fn frontier_collapses_without_surplus() {
        let (sys, prob, out) = example();
        let mut p = prob.clone();
        let su = 0.3;
        p.disagreement[0] = Disagreement {
            agg: prob.pi_star - su,
            su,
        };
        let slice = PaymentSlice::new(sys, &p, 0, &out.agreed_prices, &p.d_star[0], &settings()).unwrap();
        let (a, b) = slice.rational_range();
        assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        let (pi_s, pi_a) = slice.split(a);
        assert_abs_diff_eq!(pi_s, su, epsilon = 1e-9);
        assert_abs_diff_eq!(pi_a, prob.pi_star - su, epsilon = 1e-9);
    }

    fn three_period() -> System {
        let net = Network::single_bus(vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0]);
        let dem = DemandProfile {
            q: vec![vec![0.0, 2.0, 5.0]],
        };
        let mut u = example_unit();
        u.soc_max = 2.0;
        let mut v = example_unit();
        v.id = "su2".into();
        v.eta_minus = 0.9;
        v.cost.w_plus = 2.0;
        v.cost.w_minus = 2.0;
        System::new(net, dem, vec![u, v]).unwrap()
    }

    #[test]
    fn bilateral_sweeps_on_two_units() {
        let sys = three_period();
        let cfg = AggregatorConfig::all(&sys, 10.0);
        let search = SearchSettings {
            grid_resolution: 1e-6,
            multistart: 2,
            ..Default::default()
        };
        let prob = BargainingProblem::build(&sys, &cfg, 0.98, &search).unwrap();
        let out = bargain(&sys, &prob, &settings()).unwrap();
        assert!(out.sweeps <= MAX_SWEEPS);
        let total: f64 = out.agg_profit + out.su_profits.iter().sum::<f64>();
        assert_abs_diff_eq!(total, prob.pi_star, epsilon = 1e-6);
        let dis: Vec<Disagreement> = prob
            .managed
            .iter()
            .map(|&i| prob.disagreement_at(i, &out.agreed_prices).unwrap())
            .collect();
        let rep = RepeatedGameConfig {
            discount: 0.98,
            agreed_prices: out.agreed_prices.clone(),
            agreed_schedules: out.agreed_schedules.clone(),
        };
        let r = margins_given(&sys, &cfg, &rep, &dis, &settings()).unwrap();
        for m in r.agg_margin_per_su.iter().chain(&r.su_margins) {
            assert!(*m >= -1e-7, "{r:?}");
        }
        for (slice, d) in out.slices.iter().zip(&dis) {
            assert!(slice.pi_s >= d.su - 1e-9 && slice.pi_a >= d.agg - 1e-9);
        }
    }
}
