//! DC market clearing: economic dispatch per period, system cost and LMPs.
//!
//! Each period solves
//!
//! ```text
//!     minimize   sum_b a_b g_b + 0.5 s_b g_b^2
//!     s.t.       1'g = 1'(q - d)              (zeta)
//!                H g <= fbar + H (q - d)      (mu >= 0)
//!                g >= 0
//! ```
//!
//! and reports `lambda = -zeta 1 - H' mu`, the derivative of the optimal cost
//! with respect to nodal demand.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::{self, ConvexProgram, Sensitivity, Solution, SolverError, SolverSettings};
use crate::storage::{StorageSchedule, StorageUnit};

/// Affine marginal generation cost `a + s x`, indexed `[bus][t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenCost {
    pub intercept: Vec<Vec<f64>>,
    pub slope: Vec<Vec<f64>>,
}

impl GenCost {
    pub fn marginal(&self, bus: usize, t: usize, x: f64) -> f64 {
        self.intercept[bus][t] + self.slope[bus][t] * x
    }

    /// Closed-form integral of the marginal cost from 0 to `g`.
    pub fn integral(&self, bus: usize, t: usize, g: f64) -> f64 {
        self.intercept[bus][t] * g + 0.5 * self.slope[bus][t] * g * g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub n_buses: usize,
    pub horizon: usize,
    pub gen_cost: GenCost,
    /// `[line][bus]`
    #[serde(default)]
    pub shift_factors: Vec<Vec<f64>>,
    #[serde(default)]
    pub line_limits: Vec<f64>,
}

impl Network {
    /// Single bus with `lambda_t(x) = a_t + s_t x`.
    pub fn single_bus(intercept: Vec<f64>, slope: Vec<f64>) -> Self {
        Network {
            n_buses: 1,
            horizon: intercept.len(),
            gen_cost: GenCost {
                intercept: vec![intercept],
                slope: vec![slope],
            },
            shift_factors: vec![],
            line_limits: vec![],
        }
    }

    pub fn n_lines(&self) -> usize {
        self.line_limits.len()
    }

    fn shift_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_lines(), self.n_buses, |l, b| self.shift_factors[l][b])
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_buses == 0 {
            return Err(Error::validation("network.n_buses", "must be positive"));
        }
        if self.horizon == 0 {
            return Err(Error::validation("network.horizon", "must be positive"));
        }
        for (name, m) in [
            ("intercept", &self.gen_cost.intercept),
            ("slope", &self.gen_cost.slope),
        ] {
            if m.len() != self.n_buses || m.iter().any(|r| r.len() != self.horizon) {
                return Err(Error::validation(
                    format!("network.gen_cost.{name}"),
                    format!("expected {} x {} matrix", self.n_buses, self.horizon),
                ));
            }
            if m.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("network.gen_cost.{name}"), "non-finite entry"));
            }
        }
        if self.gen_cost.slope.iter().flatten().any(|s| *s < 0.0) {
            return Err(Error::validation(
                "network.gen_cost.slope",
                "marginal cost must be nondecreasing",
            ));
        }
        if self.shift_factors.len() != self.line_limits.len() {
            return Err(Error::validation(
                "network.shift_factors",
                "row count must equal the number of line limits",
            ));
        }
        if self.shift_factors.iter().any(|r| r.len() != self.n_buses) {
            return Err(Error::validation(
                "network.shift_factors",
                format!("rows must have {} entries", self.n_buses),
            ));
        }
        if self.line_limits.iter().any(|f| !(*f >= 0.0)) {
            return Err(Error::validation("network.line_limits", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Nodal demand `[bus][t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DemandProfile {
    pub q: Vec<Vec<f64>>,
}

impl DemandProfile {
    pub fn validate(&self, network: &Network) -> Result<()> {
        if self.q.len() != network.n_buses || self.q.iter().any(|r| r.len() != network.horizon) {
            return Err(Error::validation(
                "demand",
                format!("expected {} x {} matrix", network.n_buses, network.horizon),
            ));
        }
        if self.q.iter().flatten().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::validation("demand", "entries must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn period(&self, t: usize) -> Vec<f64> {
        self.q.iter().map(|r| r[t]).collect()
    }
}

/// Net storage injections `[bus][t]`, positive for discharge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodalInjections {
    pub d_bus: Vec<Vec<f64>>,
}

impl NodalInjections {
    pub fn zeros(n_buses: usize, horizon: usize) -> Self {
        NodalInjections {
            d_bus: vec![vec![0.0; horizon]; n_buses],
        }
    }

    pub fn from_schedules(
        n_buses: usize,
        horizon: usize,
        units: &[StorageUnit],
        schedules: &[StorageSchedule],
    ) -> Result<Self> {
        if units.len() != schedules.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} units but {} schedules",
                units.len(),
                schedules.len()
            )));
        }
        let mut inj = Self::zeros(n_buses, horizon);
        for (u, s) in units.iter().zip(schedules) {
            if s.horizon() != horizon || s.d_minus.len() != horizon {
                return Err(Error::DimensionMismatch(format!(
                    "schedule of {} has horizon {}, expected {horizon}",
                    u.id,
                    s.horizon()
                )));
            }
            if u.bus >= n_buses {
                return Err(Error::DimensionMismatch(format!("unit {} bus {}", u.id, u.bus)));
            }
            for (t, d) in s.net().into_iter().enumerate() {
                inj.d_bus[u.bus][t] += d;
            }
        }
        Ok(inj)
    }

    pub fn period(&self, t: usize) -> Vec<f64> {
        self.d_bus.iter().map(|r| r[t]).collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        NodalInjections {
            d_bus: self
                .d_bus
                .iter()
                .map(|r| r.iter().map(|v| v * factor).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketOutcome {
    /// `[bus][t]`
    pub generation: Vec<Vec<f64>>,
    /// `[bus][t]`
    pub lmps: Vec<Vec<f64>>,
    pub balance_duals: Vec<f64>,
    /// `[line][t]`
    pub line_duals: Vec<Vec<f64>>,
    pub generation_cost: f64,
    pub storage_cost: f64,
    pub system_cost: f64,
    pub kkt_residual: f64,
    /// Some active constraint carries a zero multiplier in some period.
    pub degenerate: bool,
}

impl MarketOutcome {
    pub fn lmp_period(&self, t: usize) -> Vec<f64> {
        self.lmps.iter().map(|r| r[t]).collect()
    }

    /// `sum_t lambda_t' q_t`.
    pub fn load_payment(&self, demand: &DemandProfile) -> f64 {
        self.lmps
            .iter()
            .zip(&demand.q)
            .flat_map(|(l, q)| l.iter().zip(q).map(|(a, b)| a * b))
            .sum()
    }

    /// `sum_t lambda_t' d_t`.
    pub fn storage_revenue(&self, injections: &NodalInjections) -> f64 {
        self.lmps
            .iter()
            .zip(&injections.d_bus)
            .flat_map(|(l, d)| l.iter().zip(d).map(|(a, b)| a * b))
            .sum()
    }
}

const ACTIVE_TOL: f64 = 1e-9;

/// One period's dispatch problem and its solution.
pub(crate) struct PeriodClearing {
    program: ConvexProgram<'static>,
    solution: Solution,
    pub generation: Vec<f64>,
    pub zeta: f64,
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub cost: f64,
    pub degenerate: bool,
    active: Vec<usize>,
}

fn period_program(network: &Network, t: usize, q: &[f64], d: &[f64]) -> ConvexProgram<'static> {
    let n = network.n_buses;
    let lines = network.n_lines();
    let hess = DMatrix::from_diagonal(&DVector::from_fn(n, |b, _| network.gen_cost.slope[b][t]));
    let lin = DVector::from_fn(n, |b, _| network.gen_cost.intercept[b][t]);
    let net_load: Vec<f64> = q.iter().zip(d).map(|(q, d)| q - d).collect();
    let a_eq = DMatrix::from_element(1, n, 1.0);
    let b_eq = DVector::from_element(1, net_load.iter().sum());
    let h_mat = network.shift_matrix();
    let h_nl = &h_mat * DVector::from_column_slice(&net_load);
    let mut g = DMatrix::zeros(lines + n, n);
    let mut h = DVector::zeros(lines + n);
    for l in 0..lines {
        for b in 0..n {
            g[(l, b)] = h_mat[(l, b)];
        }
        h[l] = network.line_limits[l] + h_nl[l];
    }
    for b in 0..n {
        g[(lines + b, b)] = -1.0;
    }
    ConvexProgram::quadratic(hess, lin)
        .with_equalities(a_eq, b_eq)
        .with_inequalities(g, h)
}

fn active_rows(program: &ConvexProgram<'_>, x: &DVector<f64>) -> Vec<usize> {
    let slack = &program.h_ineq - &program.g_ineq * x;
    (0..slack.len())
        .filter(|&i| slack[i] <= ACTIVE_TOL * (1.0 + program.h_ineq[i].abs()))
        .collect()
}

/// Among all valid multipliers, pick the one with the smallest nonnegativity
/// multipliers, then the minimum-norm balance/line multipliers. This makes the
/// price at an idle bus its marginal cost at zero output.
fn marginal_multipliers(
    network: &Network,
    program: &ConvexProgram<'_>,
    solution: &Solution,
    active: &[usize],
    settings: &SolverSettings,
) -> std::result::Result<(f64, DVector<f64>), SolverError> {
    let n = network.n_buses;
    let lines = network.n_lines();
    let act_lines: Vec<usize> = active.iter().copied().filter(|&i| i < lines).collect();
    let act_gen: Vec<usize> = active.iter().copied().filter(|&i| i >= lines).map(|i| i - lines).collect();
    let grad = program.objective.gradient(&solution.point)?;
    // Shift the gradient by the stationarity residual so the system below is
    // exactly consistent at the solver's own multipliers.
    let residual = &grad
        + program.a_eq.transpose() * &solution.eq_duals
        + program.g_ineq.transpose() * &solution.ineq_duals;
    let rhs = -(grad - residual);
    let (nl, ng) = (act_lines.len(), act_gen.len());
    let dim = 1 + nl + ng;
    let h_mat = network.shift_matrix();
    // columns: [zeta, mu_active, z_active]; rows: stationarity per bus
    let mut a = DMatrix::zeros(n, dim);
    for b in 0..n {
        a[(b, 0)] = 1.0;
        for (k, &l) in act_lines.iter().enumerate() {
            a[(b, 1 + k)] = h_mat[(l, b)];
        }
    }
    for (k, &b) in act_gen.iter().enumerate() {
        a[(b, 1 + nl + k)] = -1.0;
    }
    let mut g = DMatrix::zeros(nl + ng, dim);
    for i in 0..nl + ng {
        g[(i, 1 + i)] = -1.0;
    }
    let mut q1 = DMatrix::zeros(dim, dim);
    for k in 0..ng {
        q1[(1 + nl + k, 1 + nl + k)] = 1.0;
    }
    let stage1 = ConvexProgram::quadratic(q1, DVector::zeros(dim))
        .with_equalities(a.clone(), rhs.clone())
        .with_inequalities(g.clone(), DVector::zeros(nl + ng));
    let s1 = solver::solve(&stage1, settings)?;
    let z: Vec<f64> = (0..ng).map(|k| s1.point[1 + nl + k].max(0.0)).collect();

    let dim2 = 1 + nl;
    let mut rhs2 = rhs;
    for (k, &b) in act_gen.iter().enumerate() {
        rhs2[b] += z[k];
    }
    let a2 = a.columns(0, dim2).into_owned();
    let mut g2 = DMatrix::zeros(nl, dim2);
    for k in 0..nl {
        g2[(k, 1 + k)] = -1.0;
    }
    let stage2 = ConvexProgram::quadratic(DMatrix::identity(dim2, dim2), DVector::zeros(dim2))
        .with_equalities(a2, rhs2)
        .with_inequalities(g2, DVector::zeros(nl));
    let s2 = solver::solve(&stage2, settings)?;
    let mut mu = DVector::zeros(lines);
    for (k, &l) in act_lines.iter().enumerate() {
        mu[l] = s2.point[1 + k].max(0.0);
    }
    Ok((s2.point[0], mu))
}

pub(crate) fn clear_period(
    network: &Network,
    t: usize,
    q: &[f64],
    d: &[f64],
    settings: &SolverSettings,
) -> Result<PeriodClearing> {
    let program = period_program(network, t, q, d);
    let solution = match solver::solve(&program, settings) {
        Ok(s) => s,
        Err(SolverError::Infeasible { violation }) => {
            return Err(Error::InfeasibleDispatch {
                period: t,
                reason: format!("no nonnegative dispatch meets balance and line limits (violation {violation:.3e})"),
            })
        }
        Err(e) => return Err(e.into()),
    };
    let n = network.n_buses;
    let lines = network.n_lines();
    let active = active_rows(&program, &solution.point);
    let idle_bus = active.iter().any(|&i| i >= lines);
    let (zeta, mu) = if idle_bus {
        marginal_multipliers(network, &program, &solution, &active, settings).unwrap_or_else(|_| {
            (solution.eq_duals[0], solution.ineq_duals.rows(0, lines).into_owned())
        })
    } else {
        (solution.eq_duals[0], solution.ineq_duals.rows(0, lines).into_owned())
    };
    let h_mat = network.shift_matrix();
    let lam = DVector::from_element(n, -zeta) - h_mat.transpose() * &mu;
    let generation: Vec<f64> = solution.point.iter().map(|g| g.max(0.0)).collect();
    let cost = (0..n)
        .map(|b| network.gen_cost.integral(b, t, generation[b]))
        .sum();
    // Weakly active: active with (near) zero multiplier under the reported duals.
    let degenerate = active.iter().any(|&i| {
        let m = if i < lines {
            mu[i]
        } else {
            let b = i - lines;
            network.gen_cost.marginal(b, t, generation[b]) - lam[b]
        };
        m.abs() <= 1e-9
    });
    Ok(PeriodClearing {
        program,
        solution,
        generation,
        zeta,
        mu: mu.iter().copied().collect(),
        lambda: lam.iter().copied().collect(),
        cost,
        degenerate,
        active,
    })
}

impl PeriodClearing {
    /// `d lambda / d d_bus` on the current active set (columns index the injecting bus).
    pub(crate) fn lmp_jacobian(&self, network: &Network) -> Result<DMatrix<f64>> {
        let n = network.n_buses;
        let lines = network.n_lines();
        let sens = Sensitivity::new(&self.program, &self.solution)?;
        let h_mat = network.shift_matrix();
        let mut jac = DMatrix::zeros(n, n);
        for b in 0..n {
            let d_b = DVector::from_element(1, -1.0);
            let mut d_h = DVector::zeros(lines + n);
            for l in 0..lines {
                d_h[l] = -h_mat[(l, b)];
            }
            let der = sens.apply(&DVector::zeros(n), &d_b, &d_h);
            let dmu = der.ineq_duals.rows(0, lines).into_owned();
            let dl = DVector::from_element(n, -der.eq_duals[0]) - h_mat.transpose() * dmu;
            jac.set_column(b, &dl);
        }
        Ok(jac)
    }

    pub(crate) fn kkt_residual(&self) -> f64 {
        self.solution.kkt_residual
    }
}

fn check_shapes(network: &Network, demand: &DemandProfile, injections: &NodalInjections) -> Result<()> {
    let ok = |m: &Vec<Vec<f64>>| m.len() == network.n_buses && m.iter().all(|r| r.len() == network.horizon);
    if !ok(&demand.q) {
        return Err(Error::DimensionMismatch("demand shape".into()));
    }
    if !ok(&injections.d_bus) {
        return Err(Error::DimensionMismatch("injection shape".into()));
    }
    Ok(())
}

pub(crate) fn clear_periods(
    network: &Network,
    demand: &DemandProfile,
    injections: &NodalInjections,
    settings: &SolverSettings,
) -> Result<Vec<PeriodClearing>> {
    check_shapes(network, demand, injections)?;
    (0..network.horizon)
        .map(|t| clear_period(network, t, &demand.period(t), &injections.period(t), settings))
        .collect()
}

fn assemble(network: &Network, periods: &[PeriodClearing], storage_cost: f64) -> MarketOutcome {
    let n = network.n_buses;
    let by_bus = |f: &dyn Fn(&PeriodClearing) -> &Vec<f64>, rows: usize| -> Vec<Vec<f64>> {
        (0..rows).map(|r| periods.iter().map(|p| f(p)[r]).collect()).collect()
    };
    let generation_cost: f64 = periods.iter().map(|p| p.cost).sum();
    MarketOutcome {
        generation: by_bus(&|p| &p.generation, n),
        lmps: by_bus(&|p| &p.lambda, n),
        balance_duals: periods.iter().map(|p| p.zeta).collect(),
        line_duals: by_bus(&|p| &p.mu, network.n_lines()),
        generation_cost,
        storage_cost,
        system_cost: generation_cost + storage_cost,
        kkt_residual: periods.iter().map(|p| p.kkt_residual()).fold(0.0, f64::max),
        degenerate: periods.iter().any(|p| p.degenerate),
    }
}

/// Clears the market for fixed storage injections; `storage_cost` is added to
/// the reported system cost.
pub fn clear_market(
    network: &Network,
    demand: &DemandProfile,
    injections: &NodalInjections,
    storage_cost: f64,
    settings: &SolverSettings,
) -> Result<MarketOutcome> {
    let periods = clear_periods(network, demand, injections, settings)?;
    Ok(assemble(network, &periods, storage_cost))
}

/// Market outcome together with the per-period LMP Jacobians `d lambda_t / d d_t`.
pub fn clear_market_with_jacobians(
    network: &Network,
    demand: &DemandProfile,
    injections: &NodalInjections,
    storage_cost: f64,
    settings: &SolverSettings,
) -> Result<(MarketOutcome, Vec<DMatrix<f64>>)> {
    let periods = clear_periods(network, demand, injections, settings)?;
    let jac = periods
        .iter()
        .map(|p| p.lmp_jacobian(network))
        .collect::<Result<Vec<_>>>()?;
    Ok((assemble(network, &periods, storage_cost), jac))
}

/// `S(q, d)`: optimal generation cost plus storage degradation cost.
pub fn system_cost(
    network: &Network,
    demand: &DemandProfile,
    units: &[StorageUnit],
    schedules: &[StorageSchedule],
    settings: &SolverSettings,
) -> Result<f64> {
    let inj = NodalInjections::from_schedules(network.n_buses, network.horizon, units, schedules)?;
    let storage: f64 = units
        .iter()
        .zip(schedules)
        .map(|(u, s)| u.degradation_cost(s))
        .sum();
    Ok(clear_market(network, demand, &inj, storage, settings)?.system_cost)
}

/// Generation part of the system cost only.
pub fn generation_cost(
    network: &Network,
    demand: &DemandProfile,
    injections: &NodalInjections,
    settings: &SolverSettings,
) -> Result<f64> {
    Ok(clear_market(network, demand, injections, 0.0, settings)?.generation_cost)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmpCheckEntry {
    pub bus: usize,
    pub period: usize,
    pub lmp: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
    /// Active set changes inside the difference step, or the perturbed problem is infeasible.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmpCheckReport {
    pub entries: Vec<LmpCheckEntry>,
    pub max_relative_error: f64,
    pub degenerate_count: usize,
    pub passed: bool,
}

pub const LMP_CHECK_STEP: f64 = 1e-5;
pub const LMP_CHECK_TOLERANCE: f64 = 1e-4;

/// Compares each LMP with a central difference of the optimal cost in the
/// corresponding nodal demand. Degenerate entries are reported, not scored.
pub fn lmp_sensitivity_check(
    network: &Network,
    demand: &DemandProfile,
    injections: &NodalInjections,
    settings: &SolverSettings,
) -> Result<LmpCheckReport> {
    check_shapes(network, demand, injections)?;
    let eps = LMP_CHECK_STEP;
    let mut entries = Vec::new();
    for t in 0..network.horizon {
        let q = demand.period(t);
        let d = injections.period(t);
        let base = clear_period(network, t, &q, &d, settings)?;
        for b in 0..network.n_buses {
            let perturbed = |delta: f64| -> Option<(f64, Vec<usize>)> {
                let mut qp = q.clone();
                qp[b] += delta;
                clear_period(network, t, &qp, &d, settings)
                    .ok()
                    .map(|p| (p.cost, p.active))
            };
            let lmp = base.lambda[b];
            let (entry_fd, degenerate) = match (perturbed(eps), perturbed(-eps)) {
                (Some((up, a_up)), Some((dn, a_dn))) => {
                    ((up - dn) / (2.0 * eps), a_up != base.active || a_dn != base.active)
                }
                (Some((up, _)), None) => ((up - base.cost) / eps, true),
                (None, Some((dn, _))) => ((base.cost - dn) / eps, true),
                (None, None) => (f64::NAN, true),
            };
            let relative_error = (lmp - entry_fd).abs() / lmp.abs().max(1.0);
            entries.push(LmpCheckEntry {
                bus: b,
                period: t,
                lmp,
                finite_difference: entry_fd,
                relative_error,
                degenerate,
            });
        }
    }
    let scored = entries.iter().filter(|e| !e.degenerate);
    let max_relative_error = scored.map(|e| e.relative_error).fold(0.0, f64::max);
    let degenerate_count = entries.iter().filter(|e| e.degenerate).count();
    Ok(LmpCheckReport {
        entries,
        max_relative_error,
        degenerate_count,
        passed: max_relative_error <= LMP_CHECK_TOLERANCE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityReport {
    pub pairs_checked: usize,
    pub worst_midpoint_violation: f64,
    pub min_hessian_eigenvalue: f64,
    pub hessians_checked: usize,
    pub passed: bool,
}

/// Convexity of the generation cost in the injections: chord inequality over
/// all sample pairs, and finite-difference Hessians at samples whose active
/// set is stable under the difference step.
pub fn convexity_check(
    network: &Network,
    demand: &DemandProfile,
    region_sample: &[NodalInjections],
    settings: &SolverSettings,
) -> Result<ConvexityReport> {
    let costs = region_sample
        .iter()
        .map(|d| generation_cost(network, demand, d, settings))
        .collect::<Result<Vec<_>>>()?;
    let mut worst = f64::NEG_INFINITY;
    let mut pairs = 0;
    for i in 0..region_sample.len() {
        for j in i + 1..region_sample.len() {
            for theta in [0.25, 0.5, 0.75] {
                let mix = NodalInjections {
                    d_bus: region_sample[i]
                        .d_bus
                        .iter()
                        .zip(&region_sample[j].d_bus)
                        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| theta * x + (1.0 - theta) * y).collect())
                        .collect(),
                };
                let s = generation_cost(network, demand, &mix, settings)?;
                worst = worst.max(s - theta * costs[i] - (1.0 - theta) * costs[j]);
                pairs += 1;
            }
        }
    }
    let eps = 1e-5;
    let mut min_eig = f64::INFINITY;
    let mut hessians = 0;
    for sample in region_sample {
        for t in 0..network.horizon {
            let q = demand.period(t);
            let d = sample.period(t);
            let base = clear_period(network, t, &q, &d, settings)?;
            let n = network.n_buses;
            let mut hess = DMatrix::zeros(n, n);
            let mut stable = true;
            for b in 0..n {
                let lam = |delta: f64| -> Option<Vec<f64>> {
                    let mut dp = d.clone();
                    dp[b] += delta;
                    clear_period(network, t, &q, &dp, settings)
                        .ok()
                        .filter(|p| p.active == base.active)
                        .map(|p| p.lambda)
                };
                match (lam(eps), lam(-eps)) {
                    (Some(up), Some(dn)) => {
                        // gradient of generation cost in d is -lambda
                        for r in 0..n {
                            hess[(r, b)] = -(up[r] - dn[r]) / (2.0 * eps);
                        }
                    }
                    _ => stable = false,
                }
            }
            if !stable {
                continue;
            }
            let sym = (&hess + hess.transpose()) * 0.5;
            let eig = SymmetricEigen::new(sym).eigenvalues.min();
            min_eig = min_eig.min(eig);
            hessians += 1;
        }
    }
    if pairs == 0 {
        worst = 0.0;
    }
    Ok(ConvexityReport {
        pairs_checked: pairs,
        worst_midpoint_violation: worst,
        min_hessian_eigenvalue: min_eig,
        hessians_checked: hessians,
        passed: worst <= 1e-9 && (hessians == 0 || min_eig >= -1e-6),
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// `lambda_t(x) = x` on one bus, demand (0, 5).
    pub fn example_network() -> (Network, DemandProfile) {
        (
            Network::single_bus(vec![0.0, 0.0], vec![1.0, 1.0]),
            DemandProfile {
                q: vec![vec![0.0, 5.0]],
            },
        )
    }

    /// Cheap bus 0 feeding demand at bus 1 through a line limited to `limit`.
    pub fn two_bus(limit: f64) -> (Network, DemandProfile) {
        (
            Network {
                n_buses: 2,
                horizon: 2,
                gen_cost: GenCost {
                    intercept: vec![vec![1.0, 1.0], vec![3.0, 3.0]],
                    slope: vec![vec![0.5, 0.5], vec![1.0, 1.0]],
                },
                shift_factors: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
                line_limits: vec![limit, limit],
            },
            DemandProfile {
                q: vec![vec![0.0, 0.0], vec![2.0, 6.0]],
            },
        )
    }
}
