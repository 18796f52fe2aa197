//! Smooth programs over the joint schedule of a set of units, with the market
//! cleared inside every evaluation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::market;
use crate::solver::{self, ConvexProgram, SmoothObjective, Solution, SolverError, SolverSettings};
use crate::storage::StorageSchedule;
use crate::system::System;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CoalitionObjective {
    /// Minimize `-(sum_t lambda_t' d_t - c(d))` with price-anticipating LMPs.
    AggregateProfit,
    /// Minimize `S(q, d)`, whose gradient in `d` is `-lambda`.
    SystemCost,
}

pub(crate) struct ScheduleProgram<'a> {
    system: &'a System,
    free: Vec<usize>,
    kind: CoalitionObjective,
    solver: SolverSettings,
}

struct Evaluation {
    value: f64,
    gradient: DVector<f64>,
    hessian: DMatrix<f64>,
}

impl<'a> ScheduleProgram<'a> {
    pub(crate) fn new(system: &'a System, free: Vec<usize>, kind: CoalitionObjective, solver: SolverSettings) -> Self {
        ScheduleProgram {
            system,
            free,
            kind,
            solver,
        }
    }

    fn horizon(&self) -> usize {
        self.system.horizon()
    }

    pub(crate) fn dim(&self) -> usize {
        2 * self.horizon() * self.free.len()
    }

    /// Schedules of every unit, units outside the coalition idle.
    pub(crate) fn schedules(&self, x: &DVector<f64>) -> Vec<StorageSchedule> {
        let n = 2 * self.horizon();
        let mut out = self.system.zero_schedules();
        for (k, &i) in self.free.iter().enumerate() {
            out[i] = StorageSchedule::from_vector(&x.as_slice()[k * n..(k + 1) * n]);
        }
        out
    }

    pub(crate) fn vector(&self, schedules: &[StorageSchedule]) -> DVector<f64> {
        let n = 2 * self.horizon();
        let mut x = DVector::zeros(self.dim());
        for (k, &i) in self.free.iter().enumerate() {
            x.rows_mut(k * n, n).copy_from(&schedules[i].to_vector());
        }
        x
    }

    fn evaluate(&self, x: &DVector<f64>) -> Result<Evaluation> {
        let sys = self.system;
        let horizon = self.horizon();
        let n = 2 * horizon;
        let schedules = self.schedules(x);
        let inj = sys.injections(&schedules)?;
        let storage = sys.storage_cost(&schedules);
        let (out, jac) = market::clear_market_with_jacobians(&sys.network, &sys.demand, &inj, storage, &self.solver)?;
        let nb = sys.network.n_buses;
        // gradient and Hessian in bus space, per period
        let mut grad_bus = vec![vec![0.0; horizon]; nb];
        let mut hess_bus = Vec::with_capacity(horizon);
        let value = match self.kind {
            CoalitionObjective::AggregateProfit => -(out.storage_revenue(&inj) - storage),
            CoalitionObjective::SystemCost => out.system_cost,
        };
        for (t, j) in jac.iter().enumerate() {
            let d_t = DVector::from_vec(inj.period(t));
            let jt_d = j.transpose() * &d_t;
            for b in 0..nb {
                grad_bus[b][t] = match self.kind {
                    CoalitionObjective::AggregateProfit => -(out.lmps[b][t] + jt_d[b]),
                    CoalitionObjective::SystemCost => -out.lmps[b][t],
                };
            }
            hess_bus.push(match self.kind {
                CoalitionObjective::AggregateProfit => -(j + j.transpose()),
                CoalitionObjective::SystemCost => -(j + j.transpose()) * 0.5,
            });
        }
        let mut gradient = DVector::zeros(self.dim());
        let mut hessian = DMatrix::zeros(self.dim(), self.dim());
        for (k, &i) in self.free.iter().enumerate() {
            let unit = &sys.units[i];
            let q = unit.cost_hessian(horizon);
            let xi = x.rows(k * n, n).into_owned();
            gradient.rows_mut(k * n, n).copy_from(&(&q * &xi));
            hessian.view_mut((k * n, k * n), (n, n)).copy_from(&q);
            for t in 0..horizon {
                gradient[k * n + t] += grad_bus[unit.bus][t];
                gradient[k * n + horizon + t] -= grad_bus[unit.bus][t];
            }
            for (l, &j) in self.free.iter().enumerate() {
                let other = &sys.units[j];
                for t in 0..horizon {
                    let h = hess_bus[t][(unit.bus, other.bus)];
                    for (si, ri) in [(1.0, t), (-1.0, horizon + t)] {
                        for (sj, rj) in [(1.0, t), (-1.0, horizon + t)] {
                            hessian[(k * n + ri, l * n + rj)] += si * sj * h;
                        }
                    }
                }
            }
        }
        Ok(Evaluation {
            value,
            gradient,
            hessian,
        })
    }

    fn constraints(&self) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>) {
        let horizon = self.horizon();
        let n = 2 * horizon;
        let polys: Vec<_> = self.free.iter().map(|&i| self.system.units[i].polytope(horizon)).collect();
        let m_eq: usize = polys.iter().map(|p| p.a_eq.nrows()).sum();
        let m_in: usize = polys.iter().map(|p| p.g.nrows()).sum();
        let mut a = DMatrix::zeros(m_eq, self.dim());
        let mut b = DVector::zeros(m_eq);
        let mut g = DMatrix::zeros(m_in, self.dim());
        let mut h = DVector::zeros(m_in);
        let (mut re, mut ri) = (0, 0);
        for (k, p) in polys.iter().enumerate() {
            a.view_mut((re, k * n), (p.a_eq.nrows(), n)).copy_from(&p.a_eq);
            b.rows_mut(re, p.b_eq.len()).copy_from(&p.b_eq);
            g.view_mut((ri, k * n), (p.g.nrows(), n)).copy_from(&p.g);
            h.rows_mut(ri, p.h.len()).copy_from(&p.h);
            re += p.a_eq.nrows();
            ri += p.g.nrows();
        }
        (a, b, g, h)
    }

    /// Solves from each start in turn and keeps the lowest objective; the
    /// first error is returned if no start succeeds.
    pub(crate) fn optimize(&self, starts: &[Vec<StorageSchedule>]) -> Result<(Vec<StorageSchedule>, Solution)> {
        let (a, b, g, h) = self.constraints();
        let mut best: Option<Solution> = None;
        let mut first_err = None;
        let mut tried = starts.iter().map(|s| Some(self.vector(s))).collect::<Vec<_>>();
        if tried.is_empty() {
            tried.push(None);
        }
        for start in tried {
            let mut program = ConvexProgram::smooth(self.dim(), self)
                .with_equalities(a.clone(), b.clone())
                .with_inequalities(g.clone(), h.clone());
            if let Some(s) = start {
                program = program.with_start(s);
            }
            match solver::solve(&program, &self.solver) {
                Ok(sol) => {
                    if best.as_ref().is_none_or(|b| sol.objective_value < b.objective_value - 1e-12) {
                        best = Some(sol);
                    }
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        match best {
            Some(sol) => Ok((self.schedules(&sol.point), sol)),
            None => Err(first_err.map(Error::from).unwrap_or_else(|| {
                Error::PreconditionViolated("no starting schedule supplied".into())
            })),
        }
    }
}

fn to_solver(e: Error) -> SolverError {
    SolverError::Evaluation(e.to_string())
}

impl SmoothObjective for ScheduleProgram<'_> {
    fn value(&self, x: &DVector<f64>) -> Result<f64, SolverError> {
        self.evaluate(x).map(|e| e.value).map_err(to_solver)
    }

    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
        self.evaluate(x).map(|e| e.gradient).map_err(to_solver)
    }

    fn hessian(&self, x: &DVector<f64>) -> Result<Option<DMatrix<f64>>, SolverError> {
        self.evaluate(x).map(|e| Some(e.hessian)).map_err(to_solver)
    }
}

