//! Infinitely repeated version of the pricing game under grim-trigger play:
//! discounted profits, cooperation margins and the cooperation region.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{self, scalar, AggregatorConfig, GameOutcome, SearchSettings};
use crate::solver::SolverSettings;
use crate::storage::{self, PriceSchedule, StorageSchedule};
use crate::system::System;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatedGameConfig {
    pub discount: f64,
    pub agreed_prices: Vec<PriceSchedule>,
    pub agreed_schedules: Vec<StorageSchedule>,
}

pub fn validate_discount(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::validation("discount", format!("{delta} not in (0, 1)")))
    }
}

impl RepeatedGameConfig {
    pub fn validate(&self, system: &System) -> Result<()> {
        validate_discount(self.discount)?;
        let n = system.units.len();
        if self.agreed_prices.len() != n || self.agreed_schedules.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} units, {} agreed prices, {} agreed schedules",
                self.agreed_prices.len(),
                self.agreed_schedules.len()
            )));
        }
        Ok(())
    }
}

/// Round at which a player breaks the agreement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectRound {
    Never,
    At(u32),
}

/// Discounted profit of a player who receives `agreed` each round until it
/// defects at round `v` (collecting `deviation` there) and `defection` forever
/// after.
pub fn long_term_profit(agreed: f64, deviation: f64, defection: f64, delta: f64, defect: DefectRound) -> f64 {
    match defect {
        DefectRound::Never => agreed / (1.0 - delta),
        DefectRound::At(v) => {
            let dv = delta.powi(v as i32);
            agreed * (1.0 - dv) / (1.0 - delta) + dv * deviation + dv * delta * defection / (1.0 - delta)
        }
    }
}

/// `sum_k delta^k stream[k]`.
pub fn discounted_sum(stream: &[f64], delta: f64) -> f64 {
    stream.iter().rev().fold(0.0, |acc, p| p + delta * acc)
}

/// Best defection round over `0..=max_round` and never, ties going to never.
pub fn optimal_defection_round(agreed: f64, deviation: f64, defection: f64, delta: f64, max_round: u32) -> DefectRound {
    let never = long_term_profit(agreed, deviation, defection, delta, DefectRound::Never);
    let mut best = (never, DefectRound::Never);
    for v in 0..=max_round {
        let value = long_term_profit(agreed, deviation, defection, delta, DefectRound::At(v));
        if value > best.0 + 1e-12 * (1.0 + best.0.abs()) {
            best = (value, DefectRound::At(v));
        }
    }
    best.1
}

/// Single-shot profits after a breakdown with one unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    pub agg: f64,
    pub su: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitMargins {
    pub unit: String,
    pub agg_margin: f64,
    pub su_margin: f64,
    pub disagreement: Disagreement,
    /// Unit profit from best-responding once to the agreed prices.
    pub su_deviation_profit: f64,
    pub agreed_su_profit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooperationReport {
    pub agreed_agg_profit: f64,
    pub agg_margin_per_su: Vec<f64>,
    pub su_margins: Vec<f64>,
    pub units: Vec<UnitMargins>,
    pub cooperative: bool,
}

pub const MARGIN_TOLERANCE: f64 = 1e-9;

/// Defection equilibrium of every managed unit against the agreed play of the others.
pub fn disagreement_points(
    system: &System,
    config: &AggregatorConfig,
    repeated: &RepeatedGameConfig,
    search: &SearchSettings,
) -> Result<Vec<(usize, GameOutcome)>> {
    repeated.validate(system)?;
    config
        .managed_indices(system)
        .into_iter()
        .map(|i| {
            game::defection_equilibrium(
                system,
                config,
                &repeated.agreed_prices,
                &repeated.agreed_schedules,
                i,
                search,
            )
            .map(|o| (i, o))
        })
        .collect()
}

/// Margins given precomputed disagreement profits, one per managed unit.
pub fn margins_given(
    system: &System,
    config: &AggregatorConfig,
    repeated: &RepeatedGameConfig,
    disagreement: &[Disagreement],
    solver: &SolverSettings,
) -> Result<CooperationReport> {
    repeated.validate(system)?;
    let managed = config.managed_indices(system);
    if managed.len() != disagreement.len() {
        return Err(Error::DimensionMismatch("one disagreement point per managed unit".into()));
    }
    let delta = repeated.discount;
    let agreed_agg = game::agg_profit(system, &repeated.agreed_prices, &repeated.agreed_schedules, solver)?;
    let mut units = Vec::with_capacity(managed.len());
    for (&i, dis) in managed.iter().zip(disagreement) {
        let unit = &system.units[i];
        let tau = &repeated.agreed_prices[i];
        let agreed_su = storage::su_profit(unit, &repeated.agreed_schedules[i], tau)?;
        let deviation = storage::su_best_response(unit, tau, solver)?;
        let deviation_profit = storage::su_profit(unit, &deviation, tau)?;
        units.push(UnitMargins {
            unit: unit.id.clone(),
            agg_margin: agreed_agg - dis.agg,
            su_margin: agreed_su - (1.0 - delta) * deviation_profit - delta * dis.su,
            disagreement: *dis,
            su_deviation_profit: deviation_profit,
            agreed_su_profit: agreed_su,
        });
    }
    let cooperative = units
        .iter()
        .all(|u| u.agg_margin.min(u.su_margin) >= -MARGIN_TOLERANCE);
    Ok(CooperationReport {
        agreed_agg_profit: agreed_agg,
        agg_margin_per_su: units.iter().map(|u| u.agg_margin).collect(),
        su_margins: units.iter().map(|u| u.su_margin).collect(),
        units,
        cooperative,
    })
}

/// Cooperation margins of an agreed point: the agreement is sustainable iff
/// every margin is nonnegative.
pub fn cooperation_margins(
    system: &System,
    config: &AggregatorConfig,
    repeated: &RepeatedGameConfig,
    search: &SearchSettings,
) -> Result<CooperationReport> {
    let dis: Vec<Disagreement> = disagreement_points(system, config, repeated, search)?
        .into_iter()
        .map(|(i, o)| Disagreement {
            agg: o.agg_profit,
            su: o.su_profits[i],
        })
        .collect();
    margins_given(system, config, repeated, &dis, &search.solver)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionLabel {
    Both,
    SuOnly,
    AggOnly,
    Neither,
}

impl RegionLabel {
    pub fn classify(agg_margin: f64, su_margin: f64) -> Self {
        match (agg_margin >= -MARGIN_TOLERANCE, su_margin >= -MARGIN_TOLERANCE) {
            (true, true) => RegionLabel::Both,
            (false, true) => RegionLabel::SuOnly,
            (true, false) => RegionLabel::AggOnly,
            (false, false) => RegionLabel::Neither,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RegionLabel::Both => "both",
            RegionLabel::SuOnly => "su_only",
            RegionLabel::AggOnly => "agg_only",
            RegionLabel::Neither => "neither",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub dtau_min: f64,
    pub dtau_max: f64,
    pub nx: usize,
    pub ndtau: usize,
}

impl RegionGrid {
    /// Charges from zero to the largest feasible charge; spreads from half the
    /// storage-free arbitrage spread up to zero.
    pub fn default_for(system: &System, solver: &SolverSettings, resolution: usize) -> Result<Self> {
        require_scalarizable(system)?;
        let unit = &system.units[0];
        let market = system.clear(&system.zero_schedules(), solver)?;
        let lam = &market.lmps[unit.bus];
        let spread = lam[0] - unit.round_trip_efficiency() * lam[1];
        let dtau_min = if spread < 0.0 { 0.5 * spread } else { -1.0 };
        Ok(RegionGrid {
            x_min: 0.0,
            x_max: max_charge(system),
            dtau_min,
            dtau_max: 0.0,
            nx: resolution.max(2),
            ndtau: resolution.max(2),
        })
    }

    fn axis(min: f64, max: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| min + (max - min) * k as f64 / (n - 1).max(1) as f64)
            .collect()
    }

    pub fn x_values(&self) -> Vec<f64> {
        Self::axis(self.x_min, self.x_max, self.nx)
    }

    pub fn dtau_values(&self) -> Vec<f64> {
        Self::axis(self.dtau_min, self.dtau_max, self.ndtau)
    }
}

/// Largest first-period charge that the two-period unit can later discharge.
pub fn max_charge(system: &System) -> f64 {
    let u = &system.units[0];
    u.d_minus_max
        .min(u.d_plus_max / u.round_trip_efficiency())
        .min((u.soc_max - u.soc_init) / u.eta_minus)
        .max(0.0)
}

pub(crate) fn require_scalarizable(system: &System) -> Result<()> {
    if scalar::is_scalarizable(system) {
        Ok(())
    } else {
        Err(Error::PreconditionViolated(
            "operation needs a two-period system with one unit starting at minimum charge".into(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCell {
    pub x_hat: f64,
    pub dtau_hat: f64,
    pub alpha_s: f64,
    pub alpha_a: f64,
    pub agg_profit: f64,
    pub su_profit: f64,
    pub label: RegionLabel,
}

/// Agreed point `(x_hat, dtau_hat)` of the scalar two-period game.
pub fn scalar_agreement(system: &System, delta: f64, x_hat: f64, dtau_hat: f64) -> RepeatedGameConfig {
    let unit = &system.units[0];
    RepeatedGameConfig {
        discount: delta,
        agreed_prices: vec![scalar::prices_for_spread(unit, dtau_hat)],
        agreed_schedules: vec![scalar::schedule_for_charge(unit, x_hat)],
    }
}

/// Single-unit disagreement point (the one-shot equilibrium).
pub fn scalar_disagreement(system: &System, config: &AggregatorConfig, search: &SearchSettings) -> Result<Disagreement> {
    require_scalarizable(system)?;
    let out = game::solve_stackelberg(system, config, search)?;
    Ok(Disagreement {
        agg: out.agg_profit,
        su: out.su_profits[0],
    })
}

/// Classifies every agreed point of the grid.
pub fn cooperation_region(
    system: &System,
    config: &AggregatorConfig,
    delta: f64,
    grid: &RegionGrid,
    search: &SearchSettings,
) -> Result<Vec<RegionCell>> {
    validate_discount(delta)?;
    let dis = scalar_disagreement(system, config, search)?;
    region_with(system, config, delta, grid, dis, &search.solver)
}

pub fn region_with(
    system: &System,
    config: &AggregatorConfig,
    delta: f64,
    grid: &RegionGrid,
    dis: Disagreement,
    solver: &SolverSettings,
) -> Result<Vec<RegionCell>> {
    let points: Vec<(f64, f64)> = grid
        .x_values()
        .into_iter()
        .flat_map(|x| grid.dtau_values().into_iter().map(move |d| (x, d)))
        .collect();
    points
        .into_par_iter()
        .map(|(x, d)| {
            let rep = margins_given(system, config, &scalar_agreement(system, delta, x, d), &[dis], solver)?;
            let u = &rep.units[0];
            Ok(RegionCell {
                x_hat: x,
                dtau_hat: d,
                alpha_s: u.su_margin,
                alpha_a: u.agg_margin,
                agg_profit: rep.agreed_agg_profit,
                su_profit: u.agreed_su_profit,
                label: RegionLabel::classify(u.agg_margin, u.su_margin),
            })
        })
        .collect()
}

pub fn write_region_csv<W: Write>(cells: &[RegionCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x_hat", "dtau_hat", "alpha_s", "alpha_a", "region_label"])?;
    for c in cells {
        w.write_record([
            format!("{:.10}", c.x_hat),
            format!("{:.10}", c.dtau_hat),
            format!("{:.10}", c.alpha_s),
            format!("{:.10}", c.alpha_a),
            c.label.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Spread interval, at fixed agreed charge, on which both players cooperate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CooperationInterval {
    /// Smallest spread the aggregator accepts.
    pub agg_endpoint: Option<f64>,
    /// Largest spread the unit accepts.
    pub su_endpoint: Option<f64>,
}

fn bisect(f: impl Fn(f64) -> Result<f64>, mut lo: f64, mut hi: f64, tol: f64) -> Result<Option<f64>> {
    let (flo, fhi) = (f(lo)?, f(hi)?);
    if flo.signum() == fhi.signum() {
        return Ok(None);
    }
    let rising = fhi > flo;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if (fm >= 0.0) == rising {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// Root-finds both margins in the spread over `[dtau_min, dtau_max]`.
pub fn cooperation_interval(
    system: &System,
    config: &AggregatorConfig,
    delta: f64,
    x_hat: f64,
    bracket: (f64, f64),
    dis: Disagreement,
    solver: &SolverSettings,
) -> Result<CooperationInterval> {
    validate_discount(delta)?;
    require_scalarizable(system)?;
    let margins = |d: f64| -> Result<(f64, f64)> {
        let r = margins_given(system, config, &scalar_agreement(system, delta, x_hat, d), &[dis], solver)?;
        Ok((r.units[0].agg_margin, r.units[0].su_margin))
    };
    let tol = 1e-10;
    Ok(CooperationInterval {
        agg_endpoint: bisect(|d| margins(d).map(|m| m.0), bracket.0, bracket.1, tol)?,
        su_endpoint: bisect(|d| margins(d).map(|m| m.1), bracket.0, bracket.1, tol)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::fixtures::example_system;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const X_HAT: f64 = 4.75 / 5.7075;

    fn setup() -> (System, AggregatorConfig, Disagreement) {
        let sys = example_system();
        let cfg = AggregatorConfig::all(&sys, 10.0);
        let dis = scalar_disagreement(&sys, &cfg, &SearchSettings::default()).unwrap();
        (sys, cfg, dis)
    }

    #[test]
    fn geometric_series() {
        assert_abs_diff_eq!(long_term_profit(1.0, 5.0, 0.0, 0.5, DefectRound::Never), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn timing_irrelevant_when_profits_match() {
        let never = long_term_profit(0.7, 0.7, 0.7, 0.9, DefectRound::Never);
        for v in [0, 1, 5, 60] {
            assert_abs_diff_eq!(long_term_profit(0.7, 0.7, 0.7, 0.9, DefectRound::At(v)), never, epsilon = 1e-12);
        }
    }

    #[test]
    fn closed_form_matches_direct_summation() {
        let delta: f64 = 0.98;
        let terms = 10_000;
        let (agreed, deviation, defection) = (1.5442, 1.4824, 1.4824);
        // truncation error is bounded by delta^terms * max|profit| / (1 - delta)
        let bound = delta.powi(terms as i32) * 2.0 / (1.0 - delta);
        for v in [0u32, 1, 5] {
            let stream: Vec<f64> = (0..terms)
                .map(|k| match (k as u32).cmp(&v) {
                    std::cmp::Ordering::Less => agreed,
                    std::cmp::Ordering::Equal => deviation,
                    std::cmp::Ordering::Greater => defection,
                })
                .collect();
            let direct = discounted_sum(&stream, delta);
            let closed = long_term_profit(agreed, deviation, defection, delta, DefectRound::At(v));
            assert!((direct - closed).abs() <= bound + 1e-9);
        }
        let never = discounted_sum(&vec![agreed; terms], delta);
        assert!((never - long_term_profit(agreed, 0.0, 0.0, delta, DefectRound::Never)).abs() <= bound + 1e-9);
        // cooperating beats defecting, and later defection beats earlier
        let vals: Vec<f64> = [0u32, 1, 5]
            .iter()
            .map(|&v| long_term_profit(agreed, deviation, defection, delta, DefectRound::At(v)))
            .collect();
        assert!(vals.windows(2).all(|w| w[0] < w[1]));
        assert!(vals[2] < long_term_profit(agreed, deviation, defection, delta, DefectRound::Never));
    }

    #[test]
    fn stackelberg_point_is_sustainable() {
        let (sys, cfg, dis) = setup();
        let out = game::solve_stackelberg(&sys, &cfg, &SearchSettings::default()).unwrap();
        let rep = RepeatedGameConfig {
            discount: 0.98,
            agreed_prices: out.prices.clone(),
            agreed_schedules: out.schedules.clone(),
        };
        let r = margins_given(&sys, &cfg, &rep, &[dis], &SolverSettings::default()).unwrap();
        assert!(r.cooperative);
        assert!(r.agg_margin_per_su[0].abs() < 1e-9);
        assert!(r.su_margins[0].abs() < 1e-9);
        let full = cooperation_margins(&sys, &cfg, &rep, &SearchSettings::default()).unwrap();
        assert!(full.cooperative);
    }

    #[test]
    fn unpaid_unit_defects() {
        let (sys, cfg, dis) = setup();
        let r = margins_given(&sys, &cfg, &scalar_agreement(&sys, 0.98, X_HAT, 0.0), &[dis], &SolverSettings::default()).unwrap();
        assert!(r.su_margins[0] < 0.0);
        assert!(!r.cooperative);
    }

    #[test]
    fn margins_match_hand_formulas() {
        let (sys, cfg, dis) = setup();
        let d = -1.3;
        let r = margins_given(&sys, &cfg, &scalar_agreement(&sys, 0.98, X_HAT, d), &[dis], &SolverSettings::default()).unwrap();
        let agreed_agg = 4.75 * X_HAT - 1.9025 * X_HAT * X_HAT + d * X_HAT;
        assert_abs_diff_eq!(r.agg_margin_per_su[0], agreed_agg - 4.75f64.powi(2) / 15.22, epsilon = 1e-8);
        let agreed_su = -d * X_HAT - 0.95125 * X_HAT * X_HAT;
        let dev = d * d / 3.805;
        assert_abs_diff_eq!(r.su_margins[0], agreed_su - 0.02 * dev - 0.98 * 1.1875f64.powi(2) / 3.805, epsilon = 1e-7);
    }

    #[test]
    fn interval_endpoints() {
        let (sys, cfg, dis) = setup();
        let iv = cooperation_interval(&sys, &cfg, 0.98, X_HAT, (-2.0, 0.0), dis, &SolverSettings::default()).unwrap();
        let a = iv.agg_endpoint.unwrap();
        let s = iv.su_endpoint.unwrap();
        // aggregator: agreed profit equals its one-shot profit
        let pa = 4.75f64.powi(2) / 15.22;
        let expect_a = (pa - 4.75 * X_HAT + 1.9025 * X_HAT * X_HAT) / X_HAT;
        assert_abs_diff_eq!(a, expect_a, epsilon = 1e-7);
        assert_abs_diff_eq!(a, -1.3854, epsilon = 1e-3);
        assert_abs_diff_eq!(s, -1.2377, epsilon = 1e-3);
        assert!(a < s);
    }

    #[test]
    fn region_contains_bargaining_point_and_dominates() {
        let (sys, cfg, dis) = setup();
        let grid = RegionGrid::default_for(&sys, &SolverSettings::default(), 25).unwrap();
        assert_abs_diff_eq!(grid.dtau_min, -2.375, epsilon = 1e-12);
        let cells = region_with(&sys, &cfg, 0.98, &grid, dis, &SolverSettings::default()).unwrap();
        assert_eq!(cells.len(), 625);
        let both: Vec<_> = cells.iter().filter(|c| c.label == RegionLabel::Both).collect();
        assert!(!both.is_empty());
        for c in &both {
            assert!(c.agg_profit >= dis.agg - 1e-9);
            assert!(c.su_profit >= dis.su - 1e-9);
        }
        let probe = RegionGrid {
            x_min: X_HAT,
            x_max: X_HAT,
            dtau_min: -1.31,
            dtau_max: -1.31,
            nx: 1,
            ndtau: 1,
        };
        let cell = &region_with(&sys, &cfg, 0.98, &probe, dis, &SolverSettings::default()).unwrap()[0];
        assert_eq!(cell.label, RegionLabel::Both);
        let mut buf = Vec::new();
        write_region_csv(&cells, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x_hat,dtau_hat,alpha_s,alpha_a,region_label\n"));
        assert_eq!(text.lines().count(), 626);
    }

    #[test]
    fn impatient_unit_region_hugs_best_response() {
        let (sys, cfg, dis) = setup();
        let grid = RegionGrid::default_for(&sys, &SolverSettings::default(), 41).unwrap();
        let patient = region_with(&sys, &cfg, 0.98, &grid, dis, &SolverSettings::default()).unwrap();
        let delta = 1e-3;
        let impatient = region_with(&sys, &cfg, delta, &grid, dis, &SolverSettings::default()).unwrap();
        let su_ok = |c: &&RegionCell| matches!(c.label, RegionLabel::Both | RegionLabel::SuOnly);
        assert!(impatient.iter().filter(su_ok).count() < patient.iter().filter(su_ok).count());
        for c in impatient.iter().filter(su_ok) {
            let x_br = (-c.dtau_hat / 1.9025).clamp(0.0, 1.0);
            let dev = -c.dtau_hat * x_br - 0.95125 * x_br * x_br;
            let radius = (delta * (dev - dis.su).max(0.0) / 0.95125).sqrt();
            assert!((c.x_hat - x_br).abs() <= radius + 1e-6);
        }
    }

    #[test]
    fn sign_of_margin_predicts_defection_timing() {
        let (sys, cfg, dis) = setup();
        let delta = 0.98;
        let grid = RegionGrid {
            x_min: 0.0,
            x_max: 1.0,
            dtau_min: -2.375,
            dtau_max: 0.0,
            nx: 12,
            ndtau: 12,
        };
        for x in grid.x_values() {
            for d in grid.dtau_values() {
                let rep = scalar_agreement(&sys, delta, x, d);
                let r = margins_given(&sys, &cfg, &rep, &[dis], &SolverSettings::default()).unwrap();
                let u = &r.units[0];
                let su = optimal_defection_round(u.agreed_su_profit, u.su_deviation_profit, dis.su, delta, 200);
                let agg = optimal_defection_round(r.agreed_agg_profit, dis.agg, dis.agg, delta, 200);
                assert_eq!(su == DefectRound::Never, u.su_margin >= 0.0, "x={x} d={d}");
                assert_eq!(agg == DefectRound::Never, u.agg_margin >= 0.0, "x={x} d={d}");
            }
        }
    }

    #[test]
    fn rejects_bad_discount() {
        assert!(validate_discount(1.0).is_err());
        assert!(validate_discount(0.0).is_err());
        assert!(validate_discount(0.5).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn margin_sign_equals_long_run_gain(
            agreed in 0.0f64..3.0, deviation in 0.0f64..3.0, defection in 0.0f64..3.0,
            delta in 0.05f64..0.99,
        ) {
            let margin = agreed - (1.0 - delta) * deviation - delta * defection;
            prop_assume!(margin.abs() > 1e-6);
            let round = optimal_defection_round(agreed, deviation, defection, delta, 200);
            prop_assert_eq!(round == DefectRound::Never, margin > 0.0);
            for v in [0u32, 3, 17] {
                let gap = long_term_profit(agreed, deviation, defection, delta, DefectRound::Never)
                    - long_term_profit(agreed, deviation, defection, delta, DefectRound::At(v));
                let expect = delta.powi(v as i32) * margin / (1.0 - delta);
                prop_assert!((gap - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
            }
        }
    }
}
