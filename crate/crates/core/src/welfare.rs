//! System-cost view of storage: the social optimum, the no-harm check for
//! profitable coalitions, the market-power-mitigating payment scheme and the
//! cost/profit trade-off curves.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bargaining;
use crate::coalition::{CoalitionObjective, ScheduleProgram};
use crate::cooperation::{max_charge, Disagreement};
use crate::error::{Error, Result};
use crate::game::{scalar, AggregatorConfig, GameOutcome, OutcomeTag, SearchSettings};
use crate::market::{MarketOutcome, Network, NodalInjections};
use crate::solver::{self, ConvexProgram, SolverError, SolverSettings};
use crate::storage::{PriceSchedule, StorageSchedule};
use crate::system::System;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocialOptimum {
    pub schedules: Vec<StorageSchedule>,
    pub system_cost: f64,
    /// `[bus][t]`
    pub generation: Vec<Vec<f64>>,
    pub kkt_residual: f64,
}

/// Storage schedules minimizing `S(q, d)`, solved jointly with the dispatch
/// as one quadratic program over `(g, d)`.
pub fn social_optimum(system: &System, settings: &SolverSettings) -> Result<SocialOptimum> {
    let net = &system.network;
    let (nb, horizon, nl) = (net.n_buses, net.horizon, net.n_lines());
    let ng = nb * horizon;
    let nu = 2 * horizon;
    let dim = ng + nu * system.units.len();
    let gi = |b: usize, t: usize| b * horizon + t;
    let ui = |k: usize| ng + k * nu;

    let mut hess = DMatrix::zeros(dim, dim);
    let mut lin = DVector::zeros(dim);
    for b in 0..nb {
        for t in 0..horizon {
            hess[(gi(b, t), gi(b, t))] = net.gen_cost.slope[b][t];
            lin[gi(b, t)] = net.gen_cost.intercept[b][t];
        }
    }
    let polys: Vec<_> = system.units.iter().map(|u| u.polytope(horizon)).collect();
    for (k, u) in system.units.iter().enumerate() {
        hess.view_mut((ui(k), ui(k)), (nu, nu)).copy_from(&u.cost_hessian(horizon));
    }

    let m_eq = horizon + polys.iter().map(|p| p.a_eq.nrows()).sum::<usize>();
    let m_in = horizon * nl + ng + polys.iter().map(|p| p.g.nrows()).sum::<usize>();
    let mut a = DMatrix::zeros(m_eq, dim);
    let mut b_eq = DVector::zeros(m_eq);
    let mut g = DMatrix::zeros(m_in, dim);
    let mut h = DVector::zeros(m_in);
    for t in 0..horizon {
        for b in 0..nb {
            a[(t, gi(b, t))] = 1.0;
            b_eq[t] += system.demand.q[b][t];
        }
        for (k, _) in system.units.iter().enumerate() {
            a[(t, ui(k) + t)] = 1.0;
            a[(t, ui(k) + horizon + t)] = -1.0;
        }
        for l in 0..nl {
            let row = t * nl + l;
            h[row] = net.line_limits[l];
            for b in 0..nb {
                g[(row, gi(b, t))] = net.shift_factors[l][b];
                h[row] += net.shift_factors[l][b] * system.demand.q[b][t];
            }
            for (k, u) in system.units.iter().enumerate() {
                let s = net.shift_factors[l][u.bus];
                g[(row, ui(k) + t)] = s;
                g[(row, ui(k) + horizon + t)] = -s;
            }
        }
    }
    for j in 0..ng {
        g[(horizon * nl + j, j)] = -1.0;
    }
    let (mut re, mut ri) = (horizon, horizon * nl + ng);
    for (k, p) in polys.iter().enumerate() {
        a.view_mut((re, ui(k)), (p.a_eq.nrows(), nu)).copy_from(&p.a_eq);
        b_eq.rows_mut(re, p.b_eq.len()).copy_from(&p.b_eq);
        g.view_mut((ri, ui(k)), (p.g.nrows(), nu)).copy_from(&p.g);
        h.rows_mut(ri, p.h.len()).copy_from(&p.h);
        re += p.a_eq.nrows();
        ri += p.g.nrows();
    }
    let program = ConvexProgram::quadratic(hess, lin)
        .with_equalities(a, b_eq)
        .with_inequalities(g, h);
    let sol = solver::solve(&program, settings).map_err(|e| match e {
        SolverError::Infeasible { violation } => Error::InfeasibleDispatch {
            period: 0,
            reason: format!("no storage schedule admits a feasible dispatch (violation {violation:.3e})"),
        },
        e => e.into(),
    })?;
    let schedules = (0..system.units.len())
        .map(|k| {
            let v: Vec<f64> = sol.point.rows(ui(k), nu).iter().map(|&x| clean(x)).collect();
            StorageSchedule::from_vector(&v)
        })
        .collect();
    let generation = (0..nb)
        .map(|b| (0..horizon).map(|t| sol.point[gi(b, t)].max(0.0)).collect())
        .collect();
    Ok(SocialOptimum {
        schedules,
        system_cost: sol.objective_value,
        generation,
        kkt_residual: sol.kkt_residual,
    })
}

fn clean(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        0.0
    } else {
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelfareReport {
    pub cost_no_storage: f64,
    pub cost_at_actions: f64,
    pub cost_social: f64,
    /// Coalition profit `sum lambda' d - c(d)` at the actions.
    pub agg_su_profit: f64,
    pub load_payment: f64,
}

pub fn welfare_report(system: &System, schedules: &[StorageSchedule], settings: &SolverSettings) -> Result<WelfareReport> {
    let market = system.clear(schedules, settings)?;
    let inj = system.injections(schedules)?;
    Ok(WelfareReport {
        cost_no_storage: system.baseline_cost(settings)?,
        cost_at_actions: market.system_cost,
        cost_social: social_optimum(system, settings)?.system_cost,
        agg_su_profit: market.storage_revenue(&inj) - market.storage_cost,
        load_payment: market.load_payment(&system.demand),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoHarmReport {
    pub cost_with_storage: f64,
    pub cost_without_storage: f64,
    /// `sum_t lambda_t' d_t` at the cleared point.
    pub lmp_revenue: f64,
    pub coalition_profit: f64,
    /// `S_gen(q, 0) - S_gen(q, d) - sum_t lambda_t' d_t`, nonnegative by convexity.
    pub convexity_slack: f64,
    pub holds: bool,
}

pub const NO_HARM_TOLERANCE: f64 = 1e-8;

/// Checks that a coalition earning nonnegative profit at LMPs does not raise
/// the system cost.
pub fn verify_no_harm(system: &System, schedules: &[StorageSchedule], settings: &SolverSettings) -> Result<NoHarmReport> {
    let with = system.clear(schedules, settings)?;
    let without = system.clear(&system.zero_schedules(), settings)?;
    let inj = system.injections(schedules)?;
    let revenue = with.storage_revenue(&inj);
    let profit = revenue - with.storage_cost;
    if profit < 0.0 {
        return Err(Error::PreconditionViolated(format!(
            "coalition profit {profit:.6e} is negative, so the schedule is adversarial"
        )));
    }
    let slack = without.generation_cost - with.generation_cost - revenue;
    Ok(NoHarmReport {
        cost_with_storage: with.system_cost,
        cost_without_storage: without.system_cost,
        lmp_revenue: revenue,
        coalition_profit: profit,
        convexity_slack: slack,
        holds: with.system_cost <= without.system_cost + NO_HARM_TOLERANCE && slack >= -NO_HARM_TOLERANCE,
    })
}

/// Regulator constants `C[bus][t]` of the mitigating payment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpmpConfig {
    pub constants: Vec<Vec<f64>>,
}

impl MpmpConfig {
    pub fn zeros(network: &Network) -> Self {
        Self::uniform(network, 0.0)
    }

    pub fn uniform(network: &Network, c: f64) -> Self {
        MpmpConfig {
            constants: vec![vec![c; network.horizon]; network.n_buses],
        }
    }

    pub fn validate(&self, network: &Network) -> Result<()> {
        if self.constants.len() != network.n_buses || self.constants.iter().any(|r| r.len() != network.horizon) {
            return Err(Error::validation(
                "mpmp.constants",
                format!("expected {} x {} matrix", network.n_buses, network.horizon),
            ));
        }
        if self.constants.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::validation("mpmp.constants", "non-finite entry"));
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.constants.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpmpPayments {
    /// `C - integral_0^g marginal cost`, `[bus][t]`.
    pub payments: Vec<Vec<f64>>,
    /// Payment per unit of net injection; `None` where the injection vanishes.
    pub prices: Vec<Vec<Option<f64>>>,
    pub total: f64,
}

pub const MPMP_PRICE_THRESHOLD: f64 = 1e-9;

/// Mitigating payments at a cleared market outcome.
pub fn mpmp_payment(
    network: &Network,
    outcome: &MarketOutcome,
    injections: &NodalInjections,
    config: &MpmpConfig,
) -> Result<MpmpPayments> {
    config.validate(network)?;
    let payments: Vec<Vec<f64>> = (0..network.n_buses)
        .map(|b| {
            (0..network.horizon)
                .map(|t| config.constants[b][t] - network.gen_cost.integral(b, t, outcome.generation[b][t]))
                .collect()
        })
        .collect();
    let prices = payments
        .iter()
        .zip(&injections.d_bus)
        .map(|(p, d)| {
            p.iter()
                .zip(d)
                .map(|(p, d)| (d.abs() > MPMP_PRICE_THRESHOLD).then(|| p / d))
                .collect()
        })
        .collect();
    let total = payments.iter().flatten().sum();
    Ok(MpmpPayments {
        payments,
        prices,
        total,
    })
}

/// Coalition profit under mitigating payments: total payment minus storage cost.
pub fn mpmp_profit(
    system: &System,
    schedules: &[StorageSchedule],
    config: &MpmpConfig,
    settings: &SolverSettings,
) -> Result<f64> {
    let market = system.clear(schedules, settings)?;
    let inj = system.injections(schedules)?;
    Ok(mpmp_payment(&system.network, &market, &inj, config)?.total - market.storage_cost)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpmpOutcome {
    /// Aggregator receives the payments and passes nothing to the units, so
    /// `agg_profit` is the gross payment and each unit carries its own cost.
    pub outcome: GameOutcome,
    pub coalition_profit: f64,
    pub payments: MpmpPayments,
    pub report: WelfareReport,
    pub kkt_residual: f64,
}

/// Lets the coalition of all units maximize its profit under mitigating
/// payments and clears the market at the resulting schedules.
pub fn clear_with_mpmp(system: &System, config: &MpmpConfig, settings: &SolverSettings) -> Result<MpmpOutcome> {
    config.validate(&system.network)?;
    let all: Vec<usize> = (0..system.units.len()).collect();
    let program = ScheduleProgram::new(system, all, CoalitionObjective::SystemCost, *settings);
    let (schedules, sol) = program.optimize(&[system.zero_schedules()])?;
    let schedules: Vec<StorageSchedule> = schedules
        .iter()
        .map(|s| StorageSchedule {
            d_plus: s.d_plus.iter().map(|&v| clean(v)).collect(),
            d_minus: s.d_minus.iter().map(|&v| clean(v)).collect(),
        })
        .collect();
    let market = system.clear(&schedules, settings)?;
    let inj = system.injections(&schedules)?;
    let payments = mpmp_payment(&system.network, &market, &inj, config)?;
    let zero_prices = vec![PriceSchedule::zeros(system.horizon()); system.units.len()];
    let mut outcome = GameOutcome::evaluate(system, OutcomeTag::Coalition, zero_prices, schedules.clone(), settings)?;
    outcome.agg_profit = payments.total;
    let report = welfare_report(system, &schedules, settings)?;
    Ok(MpmpOutcome {
        coalition_profit: payments.total - market.storage_cost,
        outcome,
        payments,
        report,
        kkt_residual: sol.kkt_residual,
    })
}

/// Uniform constant giving the coalition profit `target` at the social optimum.
pub fn uniform_constant_for_profit(system: &System, target: f64, settings: &SolverSettings) -> Result<f64> {
    let cost = social_optimum(system, settings)?.system_cost;
    Ok((target + cost) / (system.network.n_buses * system.horizon()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegulatedSplit {
    pub pi_s: f64,
    pub pi_a: f64,
}

/// Symmetric split of a regulated coalition profit `pi_reg`:
/// `pi_s = (pi_reg - (pi_a' - pi_s')) / 2`, `pi_a = (pi_reg + (pi_a' - pi_s')) / 2`.
///
/// `su_bounds` is the range of unit profits the cooperative set admits; the
/// split is also required to leave both players at least their disagreement
/// profits. If the symmetric point violates a bound the clamped split is
/// returned inside `NonInteriorSolution`.
pub fn regulated_split(dis: Disagreement, pi_reg: f64, su_bounds: Option<(f64, f64)>) -> Result<RegulatedSplit> {
    let gap = dis.agg - dis.su;
    let pi_s = 0.5 * (pi_reg - gap);
    let (lo_b, hi_b) = su_bounds.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let lo = lo_b.max(dis.su);
    let hi = hi_b.min(pi_reg - dis.agg);
    if lo > hi {
        return Err(Error::EmptyBargainingSet { unit: 0 });
    }
    if pi_s < lo - 1e-12 || pi_s > hi + 1e-12 {
        let c = pi_s.clamp(lo, hi);
        return Err(Error::NonInteriorSolution {
            pi_s: c,
            pi_a: pi_reg - c,
        });
    }
    Ok(RegulatedSplit {
        pi_s,
        pi_a: pi_reg - pi_s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Charge of the two-period unit, or the path parameter.
    pub x: f64,
    pub system_cost: f64,
    pub aggregate_profit: f64,
    /// "A" no storage, "B" profit maximum, "C" cost minimum.
    pub label: String,
}

/// System cost and coalition profit along a one-parameter family of schedules,
/// with the no-storage (A), profit-maximizing (B) and cost-minimizing (C)
/// points inserted exactly.
///
/// For a two-period single unit the parameter is the charge `x`. Otherwise it
/// runs over `[0, 2]` along the segments from zero to B and from B to C.
pub fn sweep_cost_profit_curves(
    system: &System,
    config: &AggregatorConfig,
    n_points: usize,
    search: &SearchSettings,
) -> Result<Vec<CurvePoint>> {
    let settings = &search.solver;
    let d_b = bargaining::max_aggregate_profit(system, config, search)?.schedules;
    let d_c = social_optimum(system, settings)?.schedules;
    let n = n_points.max(2);
    let (x_max, b, c) = if scalar::is_scalarizable(system) {
        (max_charge(system), scalar::charge_of(&d_b[0]), scalar::charge_of(&d_c[0]))
    } else {
        (2.0, 1.0, 2.0)
    };
    let mut xs: Vec<(f64, &str)> = (0..n).map(|k| (x_max * k as f64 / (n - 1) as f64, "")).collect();
    xs.retain(|(x, _)| (x - b).abs() > 1e-12 && (x - c).abs() > 1e-12 && *x != 0.0);
    xs.push((0.0, "A"));
    xs.push((b, "B"));
    if (c - b).abs() > 1e-12 {
        xs.push((c, "C"));
    }
    xs.sort_by(|p, q| p.0.total_cmp(&q.0));
    let at = |x: f64| -> Vec<StorageSchedule> {
        if scalar::is_scalarizable(system) {
            vec![scalar::schedule_for_charge(&system.units[0], x)]
        } else if x <= 1.0 {
            d_b.iter().map(|s| s.scaled(x)).collect()
        } else {
            d_b.iter()
                .zip(&d_c)
                .map(|(sb, sc)| StorageSchedule::from_vector((sb.to_vector() * (2.0 - x) + sc.to_vector() * (x - 1.0)).as_slice()))
                .collect()
        }
    };
    xs.into_par_iter()
        .map(|(x, label)| {
            let s = at(x);
            let market = system.clear(&s, settings)?;
            let inj = system.injections(&s)?;
            Ok(CurvePoint {
                x,
                system_cost: market.system_cost,
                aggregate_profit: market.storage_revenue(&inj) - market.storage_cost,
                label: label.to_string(),
            })
        })
        .collect()
}

pub fn write_curve_csv<W: Write>(points: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "system_cost", "aggregate_profit", "label"])?;
    for p in points {
        w.write_record([
            format!("{:.10}", p.x),
            format!("{:.10}", p.system_cost),
            format!("{:.10}", p.aggregate_profit),
            p.label.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub schedules: Vec<StorageSchedule>,
    pub profit: f64,
    pub system_cost: f64,
    pub load_payment: f64,
}

/// Coalition profit, system cost and load payment at the social optimum and
/// at the profit-maximizing schedules.
pub fn compare(system: &System, config: &AggregatorConfig, search: &SearchSettings) -> Result<Vec<ComparisonRow>> {
    let settings = &search.solver;
    let row = |label: &str, schedules: Vec<StorageSchedule>| -> Result<ComparisonRow> {
        let r = welfare_report(system, &schedules, settings)?;
        Ok(ComparisonRow {
            label: label.into(),
            schedules,
            profit: r.agg_su_profit,
            system_cost: r.cost_at_actions,
            load_payment: r.load_payment,
        })
    };
    Ok(vec![
        row("social optimum", social_optimum(system, settings)?.schedules)?,
        row("market clearing", bargaining::max_aggregate_profit(system, config, search)?.schedules)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::fixtures::two_bus;
    use crate::storage::fixtures::example_unit;
    use crate::storage::StorageUnit;
    use crate::system::fixtures::example_system;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn settings() -> SolverSettings {
        SolverSettings::default()
    }

    fn charge(sys: &System, x: f64) -> Vec<StorageSchedule> {
        vec![scalar::schedule_for_charge(&sys.units[0], x)]
    }

    /// `S(x) = 12.5 - 4.75 x + 1.9025 x^2` on the running example.
    fn s_of(x: f64) -> f64 {
        12.5 - 4.75 * x + 1.9025 * x * x
    }

    fn two_bus_system() -> System {
        // the limit keeps the optimum away from the point where congestion sets in
        let (net, dem) = two_bus(2.5);
        let mut u = example_unit();
        u.bus = 1;
        let mut v = example_unit();
        v.id = "su2".into();
        v.cost.w_plus = 0.5;
        v.cost.w_minus = 0.5;
        System::new(net, dem, vec![u, v]).unwrap()
    }

    #[test]
    fn social_optimum_running_example() {
        let sys = example_system();
        let so = social_optimum(&sys, &settings()).unwrap();
        assert_abs_diff_eq!(so.schedules[0].d_minus[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(so.schedules[0].d_plus[1], 0.95, epsilon = 1e-8);
        assert_abs_diff_eq!(so.system_cost, 9.6525, epsilon = 1e-8);
        assert!(so.kkt_residual <= 1e-8);
    }

    #[test]
    fn social_optimum_matches_grid() {
        let sys = example_system();
        let best = (0..=10_000)
            .map(|k| k as f64 * 1e-4)
            .min_by(|a, b| s_of(*a).total_cmp(&s_of(*b)))
            .unwrap();
        let so = social_optimum(&sys, &settings()).unwrap();
        assert!((scalar::charge_of(&so.schedules[0]) - best).abs() <= 1e-4);
        // the unconstrained minimizer lies beyond the charge limit
        assert!(4.75 / 3.805 > 1.0);
    }

    #[test]
    fn zero_capacity_social_optimum_is_idle() {
        let mut sys = example_system();
        sys.units[0].d_plus_max = 0.0;
        sys.units[0].d_minus_max = 0.0;
        let so = social_optimum(&sys, &settings()).unwrap();
        assert!(so.schedules[0].net().iter().all(|v| v.abs() < 1e-9));
        assert_abs_diff_eq!(so.system_cost, 12.5, epsilon = 1e-9);
    }

    #[test]
    fn social_optimum_beats_sampled_schedules_on_two_bus() {
        let sys = two_bus_system();
        let so = social_optimum(&sys, &settings()).unwrap();
        let direct = sys.system_cost(&so.schedules, &settings()).unwrap();
        assert_abs_diff_eq!(direct, so.system_cost, epsilon = 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let s: Vec<_> = sys
                .units
                .iter()
                .map(|u| scalar::schedule_for_charge(u, rng.gen_range(0.0..1.0)))
                .collect();
            if let Ok(c) = sys.system_cost(&s, &settings()) {
                assert!(c >= so.system_cost - 1e-9);
            }
        }
    }

    #[test]
    fn no_harm_at_profit_maximum() {
        let sys = example_system();
        let r = verify_no_harm(&sys, &charge(&sys, 4.75 / 5.7075), &settings()).unwrap();
        assert!(r.holds);
        assert_abs_diff_eq!(r.cost_with_storage, 9.8646, epsilon = 1e-4);
        assert_abs_diff_eq!(r.cost_without_storage, 12.5, epsilon = 1e-12);
        let zero = verify_no_harm(&sys, &sys.zero_schedules(), &settings()).unwrap();
        assert_abs_diff_eq!(zero.cost_with_storage, zero.cost_without_storage, epsilon = 1e-12);
        assert_abs_diff_eq!(zero.convexity_slack, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn revenue_alone_does_not_guarantee_no_harm() {
        // expensive cycling: positive LMP revenue, but the degradation cost
        // outweighs the generation saving
        let mut sys = example_system();
        sys.units[0].cost.w_plus = 100.0;
        sys.units[0].cost.w_minus = 100.0;
        let s = charge(&sys, 0.1);
        let market = sys.clear(&s, &settings()).unwrap();
        let revenue = market.storage_revenue(&sys.injections(&s).unwrap());
        assert!(revenue > 0.0);
        assert!(market.system_cost > sys.baseline_cost(&settings()).unwrap());
        assert!(matches!(
            verify_no_harm(&sys, &s, &settings()),
            Err(Error::PreconditionViolated(_))
        ));
    }

    #[test]
    fn no_harm_randomized_two_bus() {
        let sys = two_bus_system();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        for _ in 0..300 {
            let s: Vec<_> = sys
                .units
                .iter()
                .map(|u| scalar::schedule_for_charge(u, rng.gen_range(0.0..1.0)))
                .collect();
            match verify_no_harm(&sys, &s, &settings()) {
                Ok(r) => {
                    assert!(r.holds, "{r:?}");
                    checked += 1;
                }
                Err(Error::PreconditionViolated(_)) => {}
                Err(e) => panic!("{e}"),
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn mpmp_price_formula_first_period() {
        let sys = example_system();
        let cfg = MpmpConfig {
            constants: vec![vec![0.3, 0.0]],
        };
        for x in [0.1, 0.4, 0.9] {
            let s = charge(&sys, x);
            let market = sys.clear(&s, &settings()).unwrap();
            let inj = sys.injections(&s).unwrap();
            let p = mpmp_payment(&sys.network, &market, &inj, &cfg).unwrap();
            let d1 = -x;
            let expect = -(d1 * d1 - 2.0 * 0.3) / (2.0 * d1);
            assert_abs_diff_eq!(p.prices[0][0].unwrap(), expect, epsilon = 1e-10);
        }
        let zero = sys.clear(&sys.zero_schedules(), &settings()).unwrap();
        let p = mpmp_payment(&sys.network, &zero, &NodalInjections::zeros(1, 2), &cfg).unwrap();
        assert!(p.prices[0].iter().all(|v| v.is_none()));
        assert_abs_diff_eq!(p.payments[0][1], -12.5, epsilon = 1e-12);
    }

    #[test]
    fn mpmp_payment_vanishes_at_matching_constant() {
        let sys = example_system();
        let s = charge(&sys, 0.5);
        let market = sys.clear(&s, &settings()).unwrap();
        let inj = sys.injections(&s).unwrap();
        let cfg = MpmpConfig {
            constants: vec![(0..2).map(|t| sys.network.gen_cost.integral(0, t, market.generation[0][t])).collect()],
        };
        let p = mpmp_payment(&sys.network, &market, &inj, &cfg).unwrap();
        assert!(p.payments.iter().flatten().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn mpmp_bids_social_optimum() {
        let sys = example_system();
        let out = clear_with_mpmp(&sys, &MpmpConfig::zeros(&sys.network), &settings()).unwrap();
        let s = &out.outcome.schedules[0];
        assert_abs_diff_eq!(s.d_minus[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(s.d_plus[1], 0.95, epsilon = 1e-6);
        assert_abs_diff_eq!(out.coalition_profit, -9.6525, epsilon = 1e-6);
        assert!(out.coalition_profit < 0.0);
        let shifted = clear_with_mpmp(&sys, &MpmpConfig::uniform(&sys.network, 2.0), &settings()).unwrap();
        assert!(shifted.outcome.schedules[0].max_abs_diff(s) < 1e-9);
        assert_abs_diff_eq!(shifted.coalition_profit - out.coalition_profit, 4.0, epsilon = 1e-9);
    }

    #[test]
    fn mpmp_matches_social_optimum_on_two_bus() {
        let sys = two_bus_system();
        let out = clear_with_mpmp(&sys, &MpmpConfig::uniform(&sys.network, 1.0), &settings()).unwrap();
        let so = social_optimum(&sys, &settings()).unwrap();
        for (a, b) in out.outcome.schedules.iter().zip(&so.schedules) {
            assert!(a.max_abs_diff(b) < 1e-4, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn profit_target_constant() {
        let sys = example_system();
        let c = uniform_constant_for_profit(&sys, 0.5, &settings()).unwrap();
        let out = clear_with_mpmp(&sys, &MpmpConfig::uniform(&sys.network, c), &settings()).unwrap();
        assert_abs_diff_eq!(out.coalition_profit, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn regulated_split_closed_form() {
        let dis = Disagreement {
            agg: 1.48242,
            su: 0.37061,
        };
        let r = regulated_split(dis, 2.0, None).unwrap();
        assert_abs_diff_eq!(r.pi_a - r.pi_s, 1.11181, epsilon = 1e-12);
        assert_abs_diff_eq!(r.pi_a + r.pi_s, 2.0, epsilon = 1e-12);
        for pi_reg in [2.0, 2.5, 3.0] {
            let h = 1e-3;
            let up = regulated_split(dis, pi_reg + h, None).unwrap();
            let dn = regulated_split(dis, pi_reg - h, None).unwrap();
            assert_abs_diff_eq!((up.pi_a - dn.pi_a) / (2.0 * h), 0.5, epsilon = 1e-9);
            assert_abs_diff_eq!((up.pi_s - dn.pi_s) / (2.0 * h), 0.5, epsilon = 1e-9);
        }
        let even = regulated_split(Disagreement { agg: 0.2, su: 0.2 }, 1.0, None).unwrap();
        assert_abs_diff_eq!(even.pi_s, 0.5, epsilon = 1e-15);
        assert!(matches!(
            regulated_split(dis, 2.0, Some((0.0, 0.4))),
            Err(Error::NonInteriorSolution { .. })
        ));
    }

    #[test]
    fn curves_mark_withholding() {
        let sys = example_system();
        let cfg = AggregatorConfig::all(&sys, 10.0);
        let pts = sweep_cost_profit_curves(&sys, &cfg, 41, &SearchSettings::default()).unwrap();
        let find = |l: &str| pts.iter().find(|p| p.label == l).unwrap();
        let (a, b, c) = (find("A"), find("B"), find("C"));
        assert_eq!(a.x, 0.0);
        assert_eq!(a.aggregate_profit, 0.0);
        assert_abs_diff_eq!(b.x, 4.75 / 5.7075, epsilon = 1e-5);
        assert_abs_diff_eq!(c.x, 1.0, epsilon = 1e-8);
        assert!(b.x < c.x);
        assert!(b.system_cost < a.system_cost);
        assert_abs_diff_eq!(b.system_cost, 9.8646, epsilon = 1e-4);
        for w in pts.windows(3) {
            let h1 = w[1].x - w[0].x;
            let h2 = w[2].x - w[1].x;
            let second = (w[2].system_cost - w[1].system_cost) / h2 - (w[1].system_cost - w[0].system_cost) / h1;
            assert!(second >= -1e-9);
        }
        for p in &pts {
            assert_abs_diff_eq!(p.system_cost, s_of(p.x), epsilon = 1e-9);
        }
        let mut buf = Vec::new();
        write_curve_csv(&pts, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("x,system_cost,aggregate_profit,label\n"));
    }

    #[test]
    fn comparison_table() {
        let sys = example_system();
        let rows = compare(&sys, &AggregatorConfig::all(&sys, 10.0), &SearchSettings::default()).unwrap();
        assert_abs_diff_eq!(rows[0].profit, 1.89625, epsilon = 1e-6);
        assert_abs_diff_eq!(rows[0].system_cost, 9.6525, epsilon = 1e-6);
        assert_abs_diff_eq!(rows[0].load_payment, 20.25, epsilon = 1e-6);
        assert_abs_diff_eq!(rows[1].profit, 1.97656, epsilon = 1e-5);
        assert_abs_diff_eq!(rows[1].system_cost, 9.8646, epsilon = 1e-4);
        assert_abs_diff_eq!(rows[1].load_payment, 21.047, epsilon = 1e-3);
    }

    fn random_schedule(u: &StorageUnit, x: f64) -> StorageSchedule {
        scalar::schedule_for_charge(u, x)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn payments_plus_cost_is_constant(x in 0.0f64..1.0, c0 in -3.0f64..3.0, c1 in -3.0f64..3.0) {
            let sys = example_system();
            let cfg = MpmpConfig { constants: vec![vec![c0, c1]] };
            let s = vec![random_schedule(&sys.units[0], x)];
            let profit = mpmp_profit(&sys, &s, &cfg, &settings()).unwrap();
            let cost = sys.system_cost(&s, &settings()).unwrap();
            prop_assert!((profit + cost - (c0 + c1)).abs() <= 1e-9);
        }
    }
}
