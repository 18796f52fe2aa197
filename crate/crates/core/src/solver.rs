//! Dense solver for small smooth convex programs.
//!
//! Every optimization in the crate is phrased as
//!
//! ```text
//!     minimize     f(x)
//!     subject to   A x  = b      (y)
//!                  G x <= h      (z >= 0)
//! ```
//!
//! with the Lagrangian `L = f(x) + y'(A x - b) + z'(G x - h)`. Quadratic
//! objectives go through a primal active-set method (with an elastic phase one
//! for the starting point). General smooth objectives are handled by a
//! sequence of quadratic models solved by the same active-set code: with an
//! exact Hessian this is projected Newton, without one it degenerates to
//! projected gradient with an adaptive step.
//!
//! Multipliers are the minimum-norm element of the multiplier set at the
//! returned point, so degenerate vertices still give deterministic duals.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("program is infeasible (worst violation {violation:.3e})")]
    Infeasible { violation: f64 },
    #[error("objective is unbounded below on the feasible set")]
    Unbounded,
    #[error("iteration limit reached (kkt residual {residual:.3e})")]
    MaxIterations {
        best: Box<DVector<f64>>,
        residual: f64,
    },
    #[error("objective evaluation failed: {0}")]
    Evaluation(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Objective with a gradient oracle, optionally a Hessian.
///
/// Implementations are expected to be convex on the feasible set; the solver
/// does not verify this.
pub trait SmoothObjective: Sync {
    fn value(&self, x: &DVector<f64>) -> Result<f64, SolverError>;
    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>, SolverError>;
    fn hessian(&self, _x: &DVector<f64>) -> Result<Option<DMatrix<f64>>, SolverError> {
        Ok(None)
    }
}

pub enum Objective<'a> {
    /// `0.5 x'Qx + c'x + constant`
    Quadratic {
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        constant: f64,
    },
    Smooth(&'a dyn SmoothObjective),
}

impl Objective<'_> {
    pub fn value(&self, x: &DVector<f64>) -> Result<f64, SolverError> {
        match self {
            Objective::Quadratic {
                hessian,
                linear,
                constant,
            } => Ok(0.5 * x.dot(&(hessian * x)) + linear.dot(x) + constant),
            Objective::Smooth(f) => f.value(x),
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
        match self {
            Objective::Quadratic {
                hessian, linear, ..
            } => Ok(hessian * x + linear),
            Objective::Smooth(f) => f.gradient(x),
        }
    }
}

pub struct ConvexProgram<'a> {
    pub dim: usize,
    pub objective: Objective<'a>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub g_ineq: DMatrix<f64>,
    pub h_ineq: DVector<f64>,
    /// Optional starting point; used only if feasible.
    pub start: Option<DVector<f64>>,
}

impl<'a> ConvexProgram<'a> {
    pub fn quadratic(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let dim = linear.len();
        ConvexProgram {
            dim,
            objective: Objective::Quadratic {
                hessian,
                linear,
                constant: 0.0,
            },
            a_eq: DMatrix::zeros(0, dim),
            b_eq: DVector::zeros(0),
            g_ineq: DMatrix::zeros(0, dim),
            h_ineq: DVector::zeros(0),
            start: None,
        }
    }

    pub fn smooth(dim: usize, objective: &'a dyn SmoothObjective) -> Self {
        ConvexProgram {
            dim,
            objective: Objective::Smooth(objective),
            a_eq: DMatrix::zeros(0, dim),
            b_eq: DVector::zeros(0),
            g_ineq: DMatrix::zeros(0, dim),
            h_ineq: DVector::zeros(0),
            start: None,
        }
    }

    pub fn with_constant(mut self, c: f64) -> Self {
        if let Objective::Quadratic { constant, .. } = &mut self.objective {
            *constant = c;
        }
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, g: DMatrix<f64>, h: DVector<f64>) -> Self {
        self.g_ineq = g;
        self.h_ineq = h;
        self
    }

    pub fn with_start(mut self, x: DVector<f64>) -> Self {
        self.start = Some(x);
        self
    }

    fn check_dimensions(&self) -> Result<(), SolverError> {
        let n = self.dim;
        let ok = self.a_eq.ncols() == n
            && self.a_eq.nrows() == self.b_eq.len()
            && self.g_ineq.ncols() == n
            && self.g_ineq.nrows() == self.h_ineq.len()
            && self.start.as_ref().is_none_or(|s| s.len() == n);
        if !ok {
            return Err(SolverError::Dimension(format!(
                "dim {n}, A {}x{}, b {}, G {}x{}, h {}",
                self.a_eq.nrows(),
                self.a_eq.ncols(),
                self.b_eq.len(),
                self.g_ineq.nrows(),
                self.g_ineq.ncols(),
                self.h_ineq.len()
            )));
        }
        if let Objective::Quadratic {
            hessian, linear, ..
        } = &self.objective
        {
            if hessian.nrows() != n || hessian.ncols() != n || linear.len() != n {
                return Err(SolverError::Dimension("objective size".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepControl {
    ExactLineSearch,
    Backtracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub kkt_tolerance: f64,
    pub max_iterations: usize,
    pub step_control: StepControl,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            kkt_tolerance: 1e-8,
            max_iterations: 10_000,
            step_control: StepControl::Backtracking,
        }
    }
}

impl SolverSettings {
    pub fn with_tolerance(tol: f64) -> Self {
        SolverSettings {
            kkt_tolerance: tol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.kkt_tolerance > 0.0) || self.max_iterations == 0 {
            return Err(SolverError::Dimension(
                "kkt_tolerance must be positive and max_iterations at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub point: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub ineq_duals: DVector<f64>,
    pub objective_value: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Inequalities held as equalities in the final working set.
    pub working_set: Vec<usize>,
}

/// Individual KKT residuals; `max()` is what `Solution::kkt_residual` reports.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_ineq: f64,
    pub dual_feasibility: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_ineq)
            .max(self.dual_feasibility)
            .max(self.complementarity)
    }
}

/// Residuals of the KKT system at `(x, y, z)` given the objective gradient at `x`.
pub fn kkt_residuals(
    program: &ConvexProgram<'_>,
    gradient: &DVector<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> KktResiduals {
    let stat = gradient + program.a_eq.transpose() * y + program.g_ineq.transpose() * z;
    let eq = &program.a_eq * x - &program.b_eq;
    let slack = &program.h_ineq - &program.g_ineq * x;
    KktResiduals {
        stationarity: inf_norm(&stat),
        primal_eq: inf_norm(&eq),
        primal_ineq: slack.iter().fold(0.0, |m: f64, s| m.max(-s)),
        dual_feasibility: z.iter().fold(0.0, |m: f64, v| m.max(-v)),
        complementarity: slack
            .iter()
            .zip(z.iter())
            .fold(0.0, |m: f64, (s, v)| m.max((s * v).abs())),
    }
}

pub(crate) fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m: f64, x| m.max(x.abs()))
}

/// Solves the program. Pure function of its inputs.
pub fn solve(program: &ConvexProgram<'_>, settings: &SolverSettings) -> Result<Solution, SolverError> {
    settings.validate()?;
    program.check_dimensions()?;
    match &program.objective {
        Objective::Quadratic {
            hessian, linear, ..
        } => {
            let mut sol = solve_qp(
                hessian,
                linear,
                &program.a_eq,
                &program.b_eq,
                &program.g_ineq,
                &program.h_ineq,
                program.start.as_ref(),
                settings,
                true,
            )?;
            sol.objective_value = program.objective.value(&sol.point)?;
            let grad = program.objective.gradient(&sol.point)?;
            sol.kkt_residual =
                kkt_residuals(program, &grad, &sol.point, &sol.eq_duals, &sol.ineq_duals).max();
            if sol.kkt_residual > settings.kkt_tolerance {
                return Err(SolverError::MaxIterations {
                    best: Box::new(sol.point),
                    residual: sol.kkt_residual,
                });
            }
            Ok(sol)
        }
        Objective::Smooth(f) => solve_smooth(program, *f, settings),
    }
}

// ---------------------------------------------------------------------------
// Quadratic programs
// ---------------------------------------------------------------------------

struct ReducedEqualities {
    a: DMatrix<f64>,
    b: DVector<f64>,
    kept: Vec<usize>,
}

fn independent_rows(rows: &[DVector<f64>], tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let norm = r.norm();
        if norm <= tol {
            continue;
        }
        let mut v = r.clone();
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v -= q * c;
            }
        }
        let vn = v.norm();
        if vn > tol * norm.max(1.0) {
            basis.push(v / vn);
            kept.push(i);
        }
    }
    kept
}

fn reduce_equalities(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    consistency_tol: f64,
) -> Result<ReducedEqualities, SolverError> {
    let rows: Vec<DVector<f64>> = (0..a.nrows()).map(|i| a.row(i).transpose()).collect();
    let kept = independent_rows(&rows, 1e-10);
    let ar = select_rows(a, &kept);
    let br = DVector::from_iterator(kept.len(), kept.iter().map(|&i| b[i]));
    if kept.len() < a.nrows() && !kept.is_empty() {
        let x = min_norm_solution(&ar, &br);
        let resid = inf_norm(&(a * &x - b));
        if resid > consistency_tol {
            return Err(SolverError::Infeasible { violation: resid });
        }
    } else if kept.is_empty() {
        let resid = inf_norm(b);
        if resid > consistency_tol {
            return Err(SolverError::Infeasible { violation: resid });
        }
    }
    Ok(ReducedEqualities { a: ar, b: br, kept })
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Minimum-norm solution of `A x = b` for full-row-rank `A`.
fn min_norm_solution(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.nrows() == 0 {
        return DVector::zeros(a.ncols());
    }
    let aat = a * a.transpose();
    let w = aat
        .clone()
        .cholesky()
        .map(|c| c.solve(b))
        .unwrap_or_else(|| pinv_solve(&aat, b));
    a.transpose() * w
}

fn pinv_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = m.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(1.0);
    svd.solve(b, tol).unwrap_or_else(|_| DVector::zeros(m.ncols()))
}

/// Least-squares `M' w = r` for full-row-rank `M`.
fn row_space_coefficients(m: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    if m.nrows() == 0 {
        return DVector::zeros(0);
    }
    let mmt = m * m.transpose();
    let rhs = m * r;
    mmt.clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .unwrap_or_else(|| pinv_solve(&mmt, &rhs))
}

/// Orthonormal basis of the null space of `m`: the orthogonal complement of
/// its row space, built by pivoted Gram-Schmidt on the unit vectors.
fn null_space(m: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let rows: Vec<DVector<f64>> = (0..m.nrows()).map(|i| m.row(i).transpose()).collect();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for i in independent_rows(&rows, 1e-10) {
        let mut v = rows[i].clone();
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v -= q * c;
            }
        }
        let vn = v.norm();
        if vn > 0.0 {
            basis.push(v / vn);
        }
    }
    let rank = basis.len();
    let k = n.saturating_sub(rank);
    let mut candidates: Vec<DVector<f64>> = (0..n)
        .map(|j| {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            for _ in 0..2 {
                for q in &basis {
                    let c = q.dot(&e);
                    e -= q * c;
                }
            }
            e
        })
        .collect();
    let mut out = DMatrix::zeros(n, k);
    for col in 0..k {
        let (j, _) = candidates
            .iter()
            .enumerate()
            .map(|(j, v)| (j, v.norm()))
            .fold((0, -1.0), |best, c| if c.1 > best.1 { c } else { best });
        let mut v = candidates.swap_remove(j);
        for _ in 0..2 {
            for c in 0..col {
                let q = out.column(c);
                let d = q.dot(&v);
                v -= q * d;
            }
        }
        let v = &v / v.norm();
        out.set_column(col, &v);
        for c in candidates.iter_mut() {
            let d = v.dot(c);
            *c -= &v * d;
        }
    }
    out
}

struct ActiveSetResult {
    x: DVector<f64>,
    working: Vec<usize>,
    iterations: usize,
}

/// Primal active-set iterations from a feasible `x`.
#[allow(clippy::too_many_arguments)]
fn active_set_core(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    mut x: DVector<f64>,
    mut working: Vec<usize>,
    max_iterations: usize,
) -> Result<ActiveSetResult, SolverError> {
    let n = x.len();
    let m_eq = a.nrows();
    let q_scale = q.iter().fold(0.0, |m: f64, v| m.max(v.abs())).max(1.0);
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        let grad = q * &x + c;
        let mut m = DMatrix::zeros(m_eq + working.len(), n);
        m.rows_mut(0, m_eq).copy_from(a);
        for (k, &i) in working.iter().enumerate() {
            m.row_mut(m_eq + k).copy_from(&g.row(i));
        }
        let z = null_space(&m, n);
        let mut unbounded_direction = false;
        let p = if z.ncols() == 0 {
            DVector::zeros(n)
        } else {
            let hr = z.transpose() * q * &z;
            let gr = z.transpose() * &grad;
            let eig = SymmetricEigen::new(hr);
            let tol_c = 1e-11 * q_scale;
            let mut flat = DVector::zeros(gr.len());
            let mut newton = DVector::zeros(gr.len());
            for j in 0..eig.eigenvalues.len() {
                let u = eig.eigenvectors.column(j);
                let comp = u.dot(&gr);
                if eig.eigenvalues[j] <= tol_c {
                    flat += u * comp;
                } else {
                    newton += u * (comp / eig.eigenvalues[j]);
                }
            }
            if inf_norm(&flat) > 1e-12 * (1.0 + inf_norm(&grad)) {
                unbounded_direction = true;
                -(&z * flat)
            } else {
                -(&z * newton)
            }
        };

        if inf_norm(&p) <= 1e-13 * (1.0 + inf_norm(&x)) {
            let nu = row_space_coefficients(&m, &(-&grad));
            let mut worst: Option<(usize, f64)> = None;
            for k in 0..working.len() {
                let v = nu[m_eq + k];
                if v < -1e-10 * (1.0 + inf_norm(&grad)) && worst.is_none_or(|(_, w)| v < w) {
                    worst = Some((k, v));
                }
            }
            match worst {
                None => {
                    return Ok(ActiveSetResult {
                        x,
                        working,
                        iterations,
                    })
                }
                Some((k, _)) => {
                    working.remove(k);
                    continue;
                }
            }
        }

        let mut alpha = if unbounded_direction {
            f64::INFINITY
        } else {
            1.0
        };
        let mut blocking = None;
        let p_norm = p.norm();
        for i in 0..g.nrows() {
            if working.contains(&i) {
                continue;
            }
            let gi = g.row(i);
            let gp = gi.dot(&p.transpose());
            if gp > 1e-12 * gi.norm() * p_norm {
                let step = ((h[i] - gi.dot(&x.transpose())) / gp).max(0.0);
                if step < alpha {
                    alpha = step;
                    blocking = Some(i);
                }
            }
        }
        if !alpha.is_finite() {
            return Err(SolverError::Unbounded);
        }
        x += &p * alpha;
        if let Some(i) = blocking {
            working.push(i);
        }
    }
    Err(SolverError::MaxIterations {
        best: Box::new(x),
        residual: f64::NAN,
    })
}

fn feasibility_violation(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    x: &DVector<f64>,
) -> f64 {
    let eq = inf_norm(&(a * x - b));
    let ineq = (g * x - h).iter().fold(0.0, |m: f64, v| m.max(*v));
    eq.max(ineq)
}

/// Finds a feasible point: least-squares on the equalities, then an elastic
/// linear program on the inequalities if needed.
fn phase_one(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    start: Option<&DVector<f64>>,
    tol: f64,
    max_iterations: usize,
) -> Result<DVector<f64>, SolverError> {
    let n = a.ncols();
    if let Some(s) = start {
        if feasibility_violation(a, b, g, h, s) <= tol {
            return Ok(s.clone());
        }
    }
    let x0 = min_norm_solution(a, b);
    if feasibility_violation(a, b, g, h, &x0) <= tol {
        return Ok(x0);
    }
    let m = g.nrows();
    let nn = n + m;
    let mut ae = DMatrix::zeros(a.nrows(), nn);
    ae.columns_mut(0, n).copy_from(a);
    let mut ge = DMatrix::zeros(2 * m, nn);
    ge.view_mut((0, 0), (m, n)).copy_from(g);
    for i in 0..m {
        ge[(i, n + i)] = -1.0;
        ge[(m + i, n + i)] = -1.0;
    }
    let mut he = DVector::zeros(2 * m);
    he.rows_mut(0, m).copy_from(h);
    let mut ce = DVector::zeros(nn);
    let mut z0 = DVector::zeros(nn);
    z0.rows_mut(0, n).copy_from(&x0);
    let viol = g * &x0 - h;
    for i in 0..m {
        ce[n + i] = 1.0;
        z0[n + i] = viol[i].max(0.0);
    }
    let qe = DMatrix::zeros(nn, nn);
    let res = active_set_core(&qe, &ce, &ae, &ge, &he, z0, Vec::new(), max_iterations)?;
    let x = res.x.rows(0, n).into_owned();
    let violation = feasibility_violation(a, b, g, h, &x);
    if violation > tol {
        return Err(SolverError::Infeasible { violation });
    }
    Ok(x)
}

/// Re-solves the equality-constrained problem on the final working set to
/// remove drift accumulated by the null-space steps.
#[allow(clippy::too_many_arguments)]
fn polish(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    x: &DVector<f64>,
    working: &[usize],
) -> DVector<f64> {
    let n = x.len();
    let m_eq = a.nrows();
    let r = m_eq + working.len();
    let mut kkt = DMatrix::zeros(n + r, n + r);
    let mut rhs = DVector::zeros(n + r);
    kkt.view_mut((0, 0), (n, n)).copy_from(q);
    for i in 0..m_eq {
        for j in 0..n {
            kkt[(n + i, j)] = a[(i, j)];
            kkt[(j, n + i)] = a[(i, j)];
        }
        rhs[n + i] = b[i];
    }
    for (k, &wi) in working.iter().enumerate() {
        for j in 0..n {
            kkt[(n + m_eq + k, j)] = g[(wi, j)];
            kkt[(j, n + m_eq + k)] = g[(wi, j)];
        }
        rhs[n + m_eq + k] = h[wi];
    }
    for j in 0..n {
        rhs[j] = -c[j];
    }
    let Some(sol) = kkt.lu().solve(&rhs) else {
        return x.clone();
    };
    let cand = sol.rows(0, n).into_owned();
    if !cand.iter().all(|v| v.is_finite()) {
        return x.clone();
    }
    let obj = |v: &DVector<f64>| 0.5 * v.dot(&(q * v)) + c.dot(v);
    let viol = feasibility_violation(a, b, g, h, &cand);
    if viol <= feasibility_violation(a, b, g, h, x).max(1e-13)
        && obj(&cand) <= obj(x) + 1e-12 * (1.0 + obj(x).abs())
    {
        cand
    } else {
        x.clone()
    }
}

/// Minimum-norm multipliers `(y, z)` with `grad + A'y + G_act' z = 0`, `z >= 0`.
fn min_norm_multipliers(
    grad: &DVector<f64>,
    a: &DMatrix<f64>,
    g: &DMatrix<f64>,
    active: &[usize],
    settings: &SolverSettings,
) -> (DVector<f64>, DVector<f64>) {
    let m_eq = a.nrows();
    let k = m_eq + active.len();
    let n = grad.len();
    let mut m = DMatrix::zeros(k, n);
    m.rows_mut(0, m_eq).copy_from(a);
    for (j, &i) in active.iter().enumerate() {
        m.row_mut(m_eq + j).copy_from(&g.row(i));
    }
    let rows: Vec<DVector<f64>> = (0..k).map(|i| m.row(i).transpose()).collect();
    let independent = independent_rows(&rows, 1e-10).len() == k;
    let nu = if independent {
        row_space_coefficients(&m, &(-grad))
    } else {
        // min 0.5|w|^2  s.t.  M'w = -grad, w_ineq >= 0
        let qn = DMatrix::identity(k, k);
        let cn = DVector::zeros(k);
        let an = m.transpose();
        let mut gn = DMatrix::zeros(active.len(), k);
        for j in 0..active.len() {
            gn[(j, m_eq + j)] = -1.0;
        }
        let hn = DVector::zeros(active.len());
        match solve_qp(&qn, &cn, &an, &(-grad), &gn, &hn, None, settings, false) {
            Ok(s) => s.point,
            Err(_) => row_space_coefficients(&m, &(-grad)),
        }
    };
    let y = nu.rows(0, m_eq).into_owned();
    let z = nu.rows(m_eq, active.len()).into_owned();
    (y, z)
}

#[allow(clippy::too_many_arguments)]
fn solve_qp(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    a_full: &DMatrix<f64>,
    b_full: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    start: Option<&DVector<f64>>,
    settings: &SolverSettings,
    min_norm_duals: bool,
) -> Result<Solution, SolverError> {
    let n = c.len();
    let feas_tol = 1e-9 * (1.0 + inf_norm(b_full).max(inf_norm(h)));
    let eqs = reduce_equalities(a_full, b_full, feas_tol)?;
    let x0 = phase_one(
        &eqs.a,
        &eqs.b,
        g,
        h,
        start,
        feas_tol,
        settings.max_iterations,
    )?;
    let res = active_set_core(
        q,
        c,
        &eqs.a,
        g,
        h,
        x0,
        Vec::new(),
        settings.max_iterations,
    )?;
    let x = polish(q, c, &eqs.a, &eqs.b, g, h, &res.x, &res.working);
    let grad = q * &x + c;
    let slack = h - g * &x;
    let active: Vec<usize> = if min_norm_duals {
        (0..g.nrows())
            .filter(|&i| slack[i] <= 1e-9 * (1.0 + h[i].abs()))
            .collect()
    } else {
        res.working.clone()
    };
    let (y_red, z_act) = min_norm_multipliers(&grad, &eqs.a, g, &active, settings);
    let mut y = DVector::zeros(a_full.nrows());
    for (k, &i) in eqs.kept.iter().enumerate() {
        y[i] = y_red[k];
    }
    let mut z = DVector::zeros(g.nrows());
    for (k, &i) in active.iter().enumerate() {
        z[i] = z_act[k].max(0.0);
    }
    let _ = n;
    Ok(Solution {
        objective_value: 0.5 * x.dot(&(q * &x)) + c.dot(&x),
        point: x,
        eq_duals: y,
        ineq_duals: z,
        kkt_residual: 0.0,
        iterations: res.iterations,
        working_set: res.working,
    })
}

// ---------------------------------------------------------------------------
// Sensitivity of a quadratic program's solution
// ---------------------------------------------------------------------------

/// Derivative of a QP solution with respect to the data, holding the final
/// working set fixed. Valid inside the region where the active set does not
/// change.
pub struct Sensitivity {
    n: usize,
    m_eq: usize,
    working: Vec<usize>,
    m_ineq: usize,
    kkt_inverse: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionDerivative {
    pub point: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub ineq_duals: DVector<f64>,
}

impl Sensitivity {
    pub fn new(program: &ConvexProgram<'_>, solution: &Solution) -> Result<Self, SolverError> {
        let Objective::Quadratic { hessian, .. } = &program.objective else {
            return Err(SolverError::Dimension(
                "sensitivity requires a quadratic objective".into(),
            ));
        };
        let n = program.dim;
        let m_eq = program.a_eq.nrows();
        let working = solution.working_set.clone();
        let r = m_eq + working.len();
        let mut kkt = DMatrix::zeros(n + r, n + r);
        kkt.view_mut((0, 0), (n, n)).copy_from(hessian);
        for i in 0..m_eq {
            for j in 0..n {
                kkt[(n + i, j)] = program.a_eq[(i, j)];
                kkt[(j, n + i)] = program.a_eq[(i, j)];
            }
        }
        for (k, &wi) in working.iter().enumerate() {
            for j in 0..n {
                kkt[(n + m_eq + k, j)] = program.g_ineq[(wi, j)];
                kkt[(j, n + m_eq + k)] = program.g_ineq[(wi, j)];
            }
        }
        let kkt_inverse = match kkt.clone().try_inverse() {
            Some(inv) => inv,
            None => kkt
                .pseudo_inverse(1e-12)
                .map_err(|e| SolverError::Evaluation(e.to_string()))?,
        };
        Ok(Sensitivity {
            n,
            m_eq,
            working,
            m_ineq: program.h_ineq.len(),
            kkt_inverse,
        })
    }

    /// Directional derivative for perturbations of the linear term, `b` and `h`.
    pub fn apply(
        &self,
        d_linear: &DVector<f64>,
        d_b: &DVector<f64>,
        d_h: &DVector<f64>,
    ) -> SolutionDerivative {
        let n = self.n;
        let r = self.m_eq + self.working.len();
        let mut rhs = DVector::zeros(n + r);
        for j in 0..n {
            rhs[j] = -d_linear[j];
        }
        for i in 0..self.m_eq {
            rhs[n + i] = d_b[i];
        }
        for (k, &wi) in self.working.iter().enumerate() {
            rhs[n + self.m_eq + k] = d_h[wi];
        }
        let sol = &self.kkt_inverse * rhs;
        let mut dz = DVector::zeros(self.m_ineq);
        for (k, &wi) in self.working.iter().enumerate() {
            dz[wi] = sol[n + self.m_eq + k];
        }
        SolutionDerivative {
            point: sol.rows(0, n).into_owned(),
            eq_duals: sol.rows(n, self.m_eq).into_owned(),
            ineq_duals: dz,
        }
    }
}

// ---------------------------------------------------------------------------
// General smooth objectives
// ---------------------------------------------------------------------------

fn solve_smooth(
    program: &ConvexProgram<'_>,
    f: &dyn SmoothObjective,
    settings: &SolverSettings,
) -> Result<Solution, SolverError> {
    let n = program.dim;
    let feas_tol = 1e-9 * (1.0 + inf_norm(&program.b_eq).max(inf_norm(&program.h_ineq)));
    let eqs = reduce_equalities(&program.a_eq, &program.b_eq, feas_tol)?;
    let mut x = phase_one(
        &eqs.a,
        &eqs.b,
        &program.g_ineq,
        &program.h_ineq,
        program.start.as_ref(),
        feas_tol,
        settings.max_iterations,
    )?;
    let mut fx = f.value(&x)?;
    let mut lipschitz: f64 = 1.0;
    let mut last_duals: Option<(DVector<f64>, DVector<f64>, Vec<usize>)> = None;
    let mut best_residual = f64::INFINITY;

    for iter in 1..=settings.max_iterations {
        let grad = f.gradient(&x)?;
        let exact = f.hessian(&x)?;
        let model = match &exact {
            Some(hm) => {
                let scale = hm.iter().fold(0.0, |m: f64, v| m.max(v.abs())).max(1.0);
                hm + DMatrix::identity(n, n) * (1e-10 * scale)
            }
            None => DMatrix::identity(n, n) * lipschitz,
        };
        // subproblem in y = x + d:  min 0.5 (y-x)'B(y-x) + grad'(y-x)
        let lin = &grad - &model * &x;
        let sub = solve_qp(
            &model,
            &lin,
            &program.a_eq,
            &program.b_eq,
            &program.g_ineq,
            &program.h_ineq,
            Some(&x),
            settings,
            true,
        )?;
        let d = &sub.point - &x;
        let residual_here = {
            let r = kkt_residuals(program, &grad, &x, &sub.eq_duals, &sub.ineq_duals);
            r.max()
        };
        best_residual = best_residual.min(residual_here);
        if residual_here <= settings.kkt_tolerance
            || inf_norm(&d) <= 1e-14 * (1.0 + inf_norm(&x))
        {
            let residual = residual_here;
            if residual > settings.kkt_tolerance {
                return Err(SolverError::MaxIterations {
                    best: Box::new(x),
                    residual,
                });
            }
            return Ok(Solution {
                point: x,
                eq_duals: sub.eq_duals,
                ineq_duals: sub.ineq_duals,
                objective_value: fx,
                kkt_residual: residual,
                iterations: iter,
                working_set: sub.working_set,
            });
        }
        let slope = grad.dot(&d);
        let (alpha, f_new) = match settings.step_control {
            StepControl::Backtracking => backtrack(f, &x, &d, fx, slope)?,
            StepControl::ExactLineSearch => golden_section(f, &x, &d, fx)?,
        };
        if alpha == 0.0 {
            if exact.is_none() && lipschitz < 1e12 {
                lipschitz *= 4.0;
                continue;
            }
            // no progress possible at this precision
            let grad_x = f.gradient(&x)?;
            let (y, z, ws) = last_duals.take().unwrap_or((sub.eq_duals, sub.ineq_duals, sub.working_set));
            let residual = kkt_residuals(program, &grad_x, &x, &y, &z).max();
            if residual <= settings.kkt_tolerance {
                return Ok(Solution {
                    point: x,
                    eq_duals: y,
                    ineq_duals: z,
                    objective_value: fx,
                    kkt_residual: residual,
                    iterations: iter,
                    working_set: ws,
                });
            }
            return Err(SolverError::MaxIterations {
                best: Box::new(x),
                residual,
            });
        }
        if exact.is_none() {
            if alpha == 1.0 {
                lipschitz = (lipschitz * 0.5).max(1e-8);
            } else {
                lipschitz *= 2.0;
            }
        }
        if f_new < -1e30 {
            return Err(SolverError::Unbounded);
        }
        x += &d * alpha;
        fx = f_new;
        last_duals = Some((sub.eq_duals, sub.ineq_duals, sub.working_set));
    }
    Err(SolverError::MaxIterations {
        best: Box::new(x),
        residual: best_residual,
    })
}

fn backtrack(
    f: &dyn SmoothObjective,
    x: &DVector<f64>,
    d: &DVector<f64>,
    fx: f64,
    slope: f64,
) -> Result<(f64, f64), SolverError> {
    let mut alpha = 1.0;
    let noise = 1e-14 * (1.0 + fx.abs());
    while alpha > 1e-12 {
        let trial = x + d * alpha;
        let ft = f.value(&trial)?;
        if ft <= fx + 1e-4 * alpha * slope.min(0.0) + noise {
            return Ok((alpha, ft));
        }
        alpha *= 0.5;
    }
    Ok((0.0, fx))
}

fn golden_section(
    f: &dyn SmoothObjective,
    x: &DVector<f64>,
    d: &DVector<f64>,
    fx: f64,
) -> Result<(f64, f64), SolverError> {
    let phi = |t: f64| -> Result<f64, SolverError> { f.value(&(x + d * t)) };
    let ratio = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut c = hi - ratio * (hi - lo);
    let mut e = lo + ratio * (hi - lo);
    let mut fc = phi(c)?;
    let mut fe = phi(e)?;
    while hi - lo > 1e-10 {
        if fc < fe {
            hi = e;
            e = c;
            fe = fc;
            c = hi - ratio * (hi - lo);
            fc = phi(c)?;
        } else {
            lo = c;
            c = e;
            fc = fe;
            e = lo + ratio * (hi - lo);
            fe = phi(e)?;
        }
    }
    let t = 0.5 * (lo + hi);
    let ft = phi(t)?;
    let f1 = phi(1.0)?;
    let (t, ft) = if f1 <= ft { (1.0, f1) } else { (t, ft) };
    if ft <= fx + 1e-14 * (1.0 + fx.abs()) {
        Ok((t, ft))
    } else {
        Ok((0.0, fx))
    }
}
