//! Storage units, their operating constraints and profit-maximizing response
//! to a price schedule.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::{self, ConvexProgram, Solution, SolverSettings};

/// Degradation cost `0.5 * sum_t (w+ d+^2 + w- d-^2 + 2 wx d+ d-)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCost {
    pub w_plus: f64,
    pub w_minus: f64,
    #[serde(default)]
    pub w_cross: f64,
}

impl QuadraticCost {
    pub fn is_positive_definite(&self) -> bool {
        self.w_plus > 0.0 && self.w_minus > 0.0 && self.w_plus * self.w_minus > self.w_cross.powi(2)
    }
}

/// `coefficients · [d+; d-] <= bound`, coefficients of length `2 * horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineConstraint {
    pub coefficients: Vec<f64>,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageUnit {
    pub id: String,
    pub bus: usize,
    /// Discharge efficiency.
    pub eta_plus: f64,
    /// Charge efficiency.
    pub eta_minus: f64,
    pub d_plus_max: f64,
    pub d_minus_max: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub soc_init: f64,
    pub cost: QuadraticCost,
    #[serde(default)]
    pub extra_constraints: Vec<AffineConstraint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageSchedule {
    pub d_plus: Vec<f64>,
    pub d_minus: Vec<f64>,
}

impl StorageSchedule {
    pub fn zeros(horizon: usize) -> Self {
        StorageSchedule {
            d_plus: vec![0.0; horizon],
            d_minus: vec![0.0; horizon],
        }
    }

    /// Splits net actions into pure discharge/charge.
    pub fn from_net(net: &[f64]) -> Self {
        StorageSchedule {
            d_plus: net.iter().map(|d| d.max(0.0)).collect(),
            d_minus: net.iter().map(|d| (-d).max(0.0)).collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.d_plus.len()
    }

    pub fn net(&self) -> Vec<f64> {
        self.d_plus
            .iter()
            .zip(&self.d_minus)
            .map(|(p, m)| p - m)
            .collect()
    }

    /// Stacked `[d+; d-]`.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            2 * self.horizon(),
            self.d_plus.iter().chain(&self.d_minus).copied(),
        )
    }

    pub fn from_vector(v: &[f64]) -> Self {
        let t = v.len() / 2;
        StorageSchedule {
            d_plus: v[..t].to_vec(),
            d_minus: v[t..].to_vec(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        StorageSchedule {
            d_plus: self.d_plus.iter().map(|v| v * factor).collect(),
            d_minus: self.d_minus.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &StorageSchedule) -> f64 {
        self.d_plus
            .iter()
            .zip(&other.d_plus)
            .chain(self.d_minus.iter().zip(&other.d_minus))
            .fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSchedule {
    pub tau: Vec<f64>,
}

impl PriceSchedule {
    pub fn new(tau: Vec<f64>, bound: f64) -> Result<Self> {
        if let Some((t, v)) = tau
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0 && **v <= bound))
        {
            return Err(Error::validation(
                format!("tau[{t}]"),
                format!("{v} outside [0, {bound}]"),
            ));
        }
        Ok(PriceSchedule { tau })
    }

    pub fn zeros(horizon: usize) -> Self {
        PriceSchedule {
            tau: vec![0.0; horizon],
        }
    }

    /// Payment `tau · d` for a schedule.
    pub fn payment(&self, schedule: &StorageSchedule) -> f64 {
        self.tau.iter().zip(schedule.net()).map(|(t, d)| t * d).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    EnergyNeutrality,
    SocUpper,
    SocLower,
    DischargeLimit,
    ChargeLimit,
    DischargeNonnegative,
    ChargeNonnegative,
    Extra,
}

impl ConstraintKind {
    pub fn label(&self) -> &'static str {
        match self {
            ConstraintKind::EnergyNeutrality => "energy neutrality",
            ConstraintKind::SocUpper => "soc upper",
            ConstraintKind::SocLower => "soc lower",
            ConstraintKind::DischargeLimit => "discharge limit",
            ConstraintKind::ChargeLimit => "charge limit",
            ConstraintKind::DischargeNonnegative => "discharge nonnegative",
            ConstraintKind::ChargeNonnegative => "charge nonnegative",
            ConstraintKind::Extra => "extra constraint",
        }
    }
}

/// Linear description of a unit's feasible set over `[d+; d-]`.
#[derive(Debug, Clone)]
pub struct Polytope {
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    /// `(kind, period)` for each row of `g`.
    pub labels: Vec<(ConstraintKind, Option<usize>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ConstraintKind,
    pub period: Option<usize>,
    pub residual: f64,
}

const FEASIBILITY_TOL: f64 = 1e-9;

impl StorageUnit {
    pub fn validate(&self, horizon: usize, n_buses: usize, prefix: &str) -> Result<()> {
        let field = |name: &str| format!("{prefix}.{name}");
        for (name, eta) in [("eta_plus", self.eta_plus), ("eta_minus", self.eta_minus)] {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(Error::validation(field(name), format!("{eta} not in (0, 1]")));
            }
        }
        for (name, v) in [
            ("d_plus_max", self.d_plus_max),
            ("d_minus_max", self.d_minus_max),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(field(name), "must be finite and >= 0"));
            }
        }
        if !(self.soc_min <= self.soc_init && self.soc_init <= self.soc_max) {
            return Err(Error::validation(
                field("soc_init"),
                "require soc_min <= soc_init <= soc_max",
            ));
        }
        if !self.cost.is_positive_definite() {
            return Err(Error::validation(
                field("cost"),
                "quadratic cost must be positive definite",
            ));
        }
        if self.bus >= n_buses {
            return Err(Error::validation(
                field("bus"),
                format!("bus {} out of range (n_buses = {n_buses})", self.bus),
            ));
        }
        for (k, c) in self.extra_constraints.iter().enumerate() {
            if c.coefficients.len() != 2 * horizon {
                return Err(Error::validation(
                    field(&format!("extra_constraints[{k}]")),
                    format!("expected {} coefficients", 2 * horizon),
                ));
            }
        }
        Ok(())
    }

    pub fn round_trip_efficiency(&self) -> f64 {
        self.eta_plus * self.eta_minus
    }

    /// Net energy added to the store in each period.
    fn soc_increment_row(&self, horizon: usize, period: usize) -> DVector<f64> {
        let mut row = DVector::zeros(2 * horizon);
        for t in 0..=period {
            row[t] = -1.0 / self.eta_plus;
            row[horizon + t] = self.eta_minus;
        }
        row
    }

    pub fn polytope(&self, horizon: usize) -> Polytope {
        let n = 2 * horizon;
        let mut a_eq = DMatrix::zeros(1, n);
        for t in 0..horizon {
            a_eq[(0, t)] = -1.0 / self.eta_plus;
            a_eq[(0, horizon + t)] = self.eta_minus;
        }
        let mut rows: Vec<(DVector<f64>, f64, ConstraintKind, Option<usize>)> = Vec::new();
        for t in 0..horizon {
            let inc = self.soc_increment_row(horizon, t);
            rows.push((inc.clone(), self.soc_max - self.soc_init, ConstraintKind::SocUpper, Some(t)));
            rows.push((-inc, self.soc_init - self.soc_min, ConstraintKind::SocLower, Some(t)));
        }
        for t in 0..horizon {
            let mut e = DVector::zeros(n);
            e[t] = 1.0;
            rows.push((e.clone(), self.d_plus_max, ConstraintKind::DischargeLimit, Some(t)));
            rows.push((-e, 0.0, ConstraintKind::DischargeNonnegative, Some(t)));
            let mut e = DVector::zeros(n);
            e[horizon + t] = 1.0;
            rows.push((e.clone(), self.d_minus_max, ConstraintKind::ChargeLimit, Some(t)));
            rows.push((-e, 0.0, ConstraintKind::ChargeNonnegative, Some(t)));
        }
        for c in &self.extra_constraints {
            rows.push((
                DVector::from_column_slice(&c.coefficients),
                c.bound,
                ConstraintKind::Extra,
                None,
            ));
        }
        let g = DMatrix::from_fn(rows.len(), n, |i, j| rows[i].0[j]);
        let h = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
        let labels = rows.iter().map(|r| (r.2, r.3)).collect();
        Polytope {
            a_eq,
            b_eq: DVector::zeros(1),
            g,
            h,
            labels,
        }
    }

    /// Hessian of the degradation cost over `[d+; d-]`.
    pub fn cost_hessian(&self, horizon: usize) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(2 * horizon, 2 * horizon);
        for t in 0..horizon {
            q[(t, t)] = self.cost.w_plus;
            q[(horizon + t, horizon + t)] = self.cost.w_minus;
            q[(t, horizon + t)] = self.cost.w_cross;
            q[(horizon + t, t)] = self.cost.w_cross;
        }
        q
    }

    pub fn degradation_cost(&self, schedule: &StorageSchedule) -> f64 {
        let c = &self.cost;
        schedule
            .d_plus
            .iter()
            .zip(&schedule.d_minus)
            .map(|(p, m)| 0.5 * (c.w_plus * p * p + c.w_minus * m * m + 2.0 * c.w_cross * p * m))
            .sum()
    }

    /// State of charge after each period.
    pub fn soc_trajectory(&self, schedule: &StorageSchedule) -> Vec<f64> {
        let mut s = self.soc_init;
        schedule
            .d_plus
            .iter()
            .zip(&schedule.d_minus)
            .map(|(p, m)| {
                s += self.eta_minus * m - p / self.eta_plus;
                s
            })
            .collect()
    }
}

/// SU profit `sum_t tau_t d_t - c(d)`.
pub fn su_profit(unit: &StorageUnit, schedule: &StorageSchedule, prices: &PriceSchedule) -> Result<f64> {
    if schedule.d_plus.len() != prices.tau.len() || schedule.d_minus.len() != prices.tau.len() {
        return Err(Error::DimensionMismatch(format!(
            "schedule horizon {} vs price horizon {}",
            schedule.d_plus.len(),
            prices.tau.len()
        )));
    }
    Ok(prices.payment(schedule) - unit.degradation_cost(schedule))
}

/// Every violated constraint with its residual; empty iff feasible.
pub fn feasibility_check(unit: &StorageUnit, schedule: &StorageSchedule) -> Vec<Violation> {
    let horizon = schedule.horizon();
    let poly = unit.polytope(horizon);
    let x = schedule.to_vector();
    let mut out = Vec::new();
    let neutrality = (&poly.a_eq * &x)[0];
    if neutrality.abs() > FEASIBILITY_TOL {
        out.push(Violation {
            kind: ConstraintKind::EnergyNeutrality,
            period: None,
            residual: neutrality.abs(),
        });
    }
    let lhs = &poly.g * &x;
    for (i, (kind, period)) in poly.labels.iter().enumerate() {
        let r = lhs[i] - poly.h[i];
        if r > FEASIBILITY_TOL {
            out.push(Violation {
                kind: *kind,
                period: *period,
                residual: r,
            });
        }
    }
    out
}

/// The QP behind the best response: minimize `c(d) - tau · d` over the unit's feasible set.
pub fn best_response_program(unit: &StorageUnit, prices: &PriceSchedule) -> ConvexProgram<'static> {
    let horizon = prices.tau.len();
    let poly = unit.polytope(horizon);
    let mut linear = DVector::zeros(2 * horizon);
    for (t, tau) in prices.tau.iter().enumerate() {
        linear[t] = -tau;
        linear[horizon + t] = *tau;
    }
    ConvexProgram::quadratic(unit.cost_hessian(horizon), linear)
        .with_equalities(poly.a_eq, poly.b_eq)
        .with_inequalities(poly.g, poly.h)
}

fn clean(v: f64) -> f64 {
    if v.abs() < 1e-13 {
        0.0
    } else {
        v
    }
}

/// Best response together with the underlying solver output.
pub fn su_best_response_solution(
    unit: &StorageUnit,
    prices: &PriceSchedule,
    settings: &SolverSettings,
) -> Result<(StorageSchedule, Solution)> {
    let program = best_response_program(unit, prices);
    let sol = solver::solve(&program, settings)?;
    let v: Vec<f64> = sol.point.iter().map(|&x| clean(x)).collect();
    Ok((StorageSchedule::from_vector(&v), sol))
}

/// Profit-maximizing schedule against `prices`; unique by strict convexity of the cost.
pub fn su_best_response(
    unit: &StorageUnit,
    prices: &PriceSchedule,
    settings: &SolverSettings,
) -> Result<StorageSchedule> {
    su_best_response_solution(unit, prices, settings).map(|(s, _)| s)
}
