//! Linear MPC with quadratic stage costs and stagewise linear inequalities.
//!
//! Stage `t` (0-based here) carries the composite vector `τ_t = [x_t; u_t]`.
//! The problem is
//!
//! ```text
//! minimize    Σ_t ½ τ_tᵀ C_t τ_t + c_tᵀ τ_t
//! subject to  x_0 = x_init,  x_{t+1} = F_t τ_t + f_t,
//!             G_t τ_t ≤ l_t,  E_t τ_t = e_t.
//! ```
//!
//! The stage equalities `E_t` are empty for ordinary problems; the auxiliary
//! problems built by [`crate::grad`] use them for pinned active rows. The
//! dynamics of the last stage are carried for shape uniformity but unused.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::qp::{self, EqQp, IqQp, QpError, QpResult, QpStats, QpStatus};
use crate::scalar::Scalar;

/// Data of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage<T: Scalar> {
    /// `C_t`, (n+m)×(n+m).
    pub cost_hessian: DMatrix<T>,
    /// `c_t`, length n+m.
    pub cost_linear: DVector<T>,
    /// `F_t = [A_t B_t]`, n×(n+m).
    pub dynamics: DMatrix<T>,
    /// `f_t`, length n.
    pub offset: DVector<T>,
    /// `G_t`, g×(n+m).
    pub ineq: DMatrix<T>,
    /// `l_t`, length g.
    pub ineq_rhs: DVector<T>,
    /// `E_t`, rows pinned to equality.
    pub eq: DMatrix<T>,
    pub eq_rhs: DVector<T>,
}

impl<T: Scalar> Stage<T> {
    /// An unconstrained stage.
    pub fn new(cost_hessian: DMatrix<T>, cost_linear: DVector<T>, dynamics: DMatrix<T>, offset: DVector<T>) -> Self {
        let nm = cost_hessian.ncols();
        Stage {
            cost_hessian,
            cost_linear,
            dynamics,
            offset,
            ineq: DMatrix::zeros(0, nm),
            ineq_rhs: DVector::zeros(0),
            eq: DMatrix::zeros(0, nm),
            eq_rhs: DVector::zeros(0),
        }
    }

    pub fn with_inequalities(mut self, ineq: DMatrix<T>, ineq_rhs: DVector<T>) -> Self {
        self.ineq = ineq;
        self.ineq_rhs = ineq_rhs;
        self
    }

    pub fn with_equalities(mut self, eq: DMatrix<T>, eq_rhs: DVector<T>) -> Self {
        self.eq = eq;
        self.eq_rhs = eq_rhs;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmpcProblem<T: Scalar> {
    pub n: usize,
    pub m: usize,
    pub stages: Vec<Stage<T>>,
    pub x_init: DVector<T>,
    /// Tracking reference `τ̄_t` when the cost came from `(Q_t, R_t)` weights,
    /// i.e. `C_t = diag(Q_t, R_t)` and `c_t = -C_t τ̄_t`.
    pub reference: Option<Vec<DVector<T>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmpcSolution<T: Scalar> {
    /// `τ*_t` for every stage.
    pub tau: Vec<DVector<T>>,
    /// Costates `λ*_t` of the dynamics rows for stages `0..T-1`.
    ///
    /// The multiplier of the initial-state row is not stored: it equals the
    /// state block of the first stage's stationarity residual and is
    /// recomputed where needed.
    pub lambda: Vec<DVector<T>>,
    /// Inequality multipliers `ν*_t`.
    pub nu: Vec<DVector<T>>,
    /// Multipliers of the stage equalities.
    pub eq_multipliers: Vec<DVector<T>>,
    /// Per-stage active inequality rows as reported by the QP working set.
    pub active: Vec<Vec<usize>>,
    pub objective: T,
    pub stats: QpStats,
}

impl<T: Scalar> LmpcSolution<T> {
    pub fn horizon(&self) -> usize {
        self.tau.len()
    }

    pub fn state(&self, t: usize, n: usize) -> DVector<T> {
        self.tau[t].rows(0, n).into_owned()
    }

    pub fn control(&self, t: usize, n: usize) -> DVector<T> {
        let nm = self.tau[t].len();
        self.tau[t].rows(n, nm - n).into_owned()
    }

    /// First optimal control `u*_1`.
    pub fn first_control(&self, n: usize) -> DVector<T> {
        self.control(0, n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LmpcError {
    DimensionMismatch(String),
    /// No trajectory from `x_init` satisfies the constraints; `stage` is the
    /// earliest stage whose constraints (together with all earlier ones)
    /// are already contradictory.
    Infeasible { stage: usize },
    SolverFailure(String),
    Qp(QpError),
}

impl fmt::Display for LmpcError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LmpcError::DimensionMismatch(what) => write!(f, "dimension mismatch: {what}"),
            LmpcError::Infeasible { stage } => write!(f, "problem is infeasible at stage {stage}"),
            LmpcError::SolverFailure(why) => write!(f, "solver failure: {why}"),
            LmpcError::Qp(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for LmpcError {}

impl From<QpError> for LmpcError {
    fn from(e: QpError) -> Self {
        match e {
            QpError::DimensionMismatch(s) => LmpcError::DimensionMismatch(s),
            other => LmpcError::Qp(other),
        }
    }
}

/// Options for [`solve_lmpc_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct LmpcOptions {
    pub max_iter: usize,
    /// Per-stage working set to warm-start the active-set loop from.
    pub warm_start: Option<Vec<Vec<usize>>>,
}

impl Default for LmpcOptions {
    fn default() -> Self {
        LmpcOptions { max_iter: 500, warm_start: None }
    }
}

/// Default activity tolerance on the constraint residual.
pub const DEFAULT_TOL_ACT: f64 = 1e-6;

/// [`DEFAULT_TOL_ACT`], widened to a few hundred ulps for scalars coarser than `f64`.
pub fn default_tol_act<T: Scalar>() -> T {
    T::lit(DEFAULT_TOL_ACT).max(T::default_epsilon() * T::lit(256.0))
}

impl<T: Scalar> LmpcProblem<T> {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn stage_dim(&self) -> usize {
        self.n + self.m
    }

    /// Builds a tracking problem with cost `½(x-x̄)ᵀQ(x-x̄) + ½(u-ū)ᵀR(u-ū)`,
    /// time-invariant dynamics `x⁺ = A x + B u` and the same inequalities at every stage.
    #[allow(clippy::too_many_arguments)]
    pub fn tracking(
        a: &DMatrix<T>,
        b: &DMatrix<T>,
        q: &DMatrix<T>,
        r: &DMatrix<T>,
        reference: Vec<DVector<T>>,
        ineq: &DMatrix<T>,
        ineq_rhs: &DVector<T>,
        x_init: DVector<T>,
    ) -> Result<Self, LmpcError> {
        let n = a.nrows();
        let m = b.ncols();
        if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
            return Err(LmpcError::DimensionMismatch("tracking problem matrices".into()));
        }
        let mut f = DMatrix::zeros(n, n + m);
        f.view_mut((0, 0), (n, n)).copy_from(a);
        f.view_mut((0, n), (n, m)).copy_from(b);
        let c = block_diag(q, r);
        let stages = reference
            .iter()
            .map(|tb| {
                if tb.len() != n + m {
                    return Err(LmpcError::DimensionMismatch("reference stage length".into()));
                }
                Ok(Stage::new(c.clone(), -(&c * tb), f.clone(), DVector::zeros(n))
                    .with_inequalities(ineq.clone(), ineq_rhs.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let problem = LmpcProblem { n, m, stages, x_init, reference: Some(reference) };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<(), LmpcError> {
        let (n, m) = (self.n, self.m);
        let nm = n + m;
        let bad = |what: String| Err(LmpcError::DimensionMismatch(what));
        if self.stages.is_empty() {
            return bad("horizon must be at least 1".into());
        }
        if self.x_init.len() != n {
            return bad(format!("x_init has length {}, expected {n}", self.x_init.len()));
        }
        for (t, s) in self.stages.iter().enumerate() {
            if s.cost_hessian.shape() != (nm, nm) || s.cost_linear.len() != nm {
                return bad(format!("stage {t} cost has wrong shape"));
            }
            if s.dynamics.shape() != (n, nm) || s.offset.len() != n {
                return bad(format!("stage {t} dynamics have wrong shape"));
            }
            if s.ineq.ncols() != nm || s.ineq.nrows() != s.ineq_rhs.len() {
                return bad(format!("stage {t} inequalities have wrong shape"));
            }
            if s.eq.ncols() != nm || s.eq.nrows() != s.eq_rhs.len() {
                return bad(format!("stage {t} equalities have wrong shape"));
            }
        }
        if let Some(reference) = &self.reference {
            if reference.len() != self.stages.len() || reference.iter().any(|r| r.len() != nm) {
                return bad("reference must hold one length-(n+m) vector per stage".into());
            }
        }
        Ok(())
    }

    /// Evaluates `Σ ½ τᵀCτ + cᵀτ` on a trajectory.
    pub fn objective(&self, tau: &[DVector<T>]) -> T {
        let half = T::lit(0.5);
        self.stages.iter().zip(tau).fold(T::zero(), |acc, (s, tt)| {
            acc + half * (tt.transpose() * &s.cost_hessian * tt)[0] + s.cost_linear.dot(tt)
        })
    }

    /// Maximum KKT violation of `solution` for this problem.
    ///
    /// Covers stationarity (except the first state block, which only defines
    /// the initial-state multiplier), dynamics, equalities, primal feasibility,
    /// multiplier signs and complementary slackness.
    pub fn kkt_residual(&self, solution: &LmpcSolution<T>) -> T {
        let (n, nt) = (self.n, self.horizon());
        if solution.tau.len() != nt || solution.lambda.len() + 1 != nt || solution.nu.len() != nt {
            return T::max_value().unwrap_or_else(T::one);
        }
        let mut worst = (self.x_init.clone() - solution.tau[0].rows(0, n)).amax();
        for t in 0..nt {
            let s = &self.stages[t];
            let tt = &solution.tau[t];
            let mut grad = &s.cost_hessian * tt + &s.cost_linear + s.ineq.transpose() * &solution.nu[t];
            if let Some(mu) = solution.eq_multipliers.get(t) {
                if mu.len() == s.eq.nrows() {
                    grad += s.eq.transpose() * mu;
                }
            }
            if t + 1 < nt {
                grad += s.dynamics.transpose() * &solution.lambda[t];
                let defect = solution.tau[t + 1].rows(0, n) - (&s.dynamics * tt + &s.offset);
                worst = worst.max(defect.amax());
            }
            if t > 0 {
                let mut xpart = grad.rows_mut(0, n);
                xpart -= &solution.lambda[t - 1];
            }
            let start = if t == 0 { n } else { 0 };
            worst = worst.max(grad.rows(start, grad.len() - start).amax());
            if s.eq.nrows() > 0 {
                worst = worst.max((&s.eq * tt - &s.eq_rhs).amax());
            }
            let slack = &s.ineq_rhs - &s.ineq * tt;
            for j in 0..slack.len() {
                worst = worst.max(-slack[j]);
                worst = worst.max(-solution.nu[t][j]);
                worst = worst.max((solution.nu[t][j] * slack[j]).abs());
            }
        }
        worst
    }
}

pub(crate) fn block_diag<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let (na, nb) = (a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(na + nb, na + nb);
    out.view_mut((0, 0), (na, na)).copy_from(a);
    out.view_mut((na, na), (nb, nb)).copy_from(b);
    out
}

/// Row layout of a flattened problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatLayout {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    /// First equality row of each stage's pinned equalities.
    pub eq_offsets: Vec<usize>,
    /// First inequality row of each stage.
    pub ineq_offsets: Vec<usize>,
}

impl FlatLayout {
    pub fn stage_dim(&self) -> usize {
        self.n + self.m
    }

    /// Number of equality rows coming from the initial state and dynamics.
    pub fn dynamics_rows(&self) -> usize {
        self.n * self.horizon
    }
}

/// Flattens the problem into a single QP over `z = (τ_0, …, τ_{T-1})`.
///
/// Equality rows: `x_0 = x_init` first, then `x_{t+1} - F_t τ_t = f_t` for each
/// `t < T-1`, then every stage's pinned equalities. Inequality rows are stage-major.
pub fn flatten<T: Scalar>(problem: &LmpcProblem<T>) -> Result<IqQp<T>, LmpcError> {
    Ok(flatten_with_layout(problem)?.0)
}

pub fn flatten_with_layout<T: Scalar>(problem: &LmpcProblem<T>) -> Result<(IqQp<T>, FlatLayout), LmpcError> {
    problem.validate()?;
    let (n, m, nt) = (problem.n, problem.m, problem.horizon());
    let nm = n + m;
    let nz = nt * nm;
    let dyn_rows = n * nt;
    let eq_rows: usize = problem.stages.iter().map(|s| s.eq.nrows()).sum();
    let g_rows: usize = problem.stages.iter().map(|s| s.ineq.nrows()).sum();

    let mut h = DMatrix::zeros(nz, nz);
    let mut g = DVector::zeros(nz);
    let mut a = DMatrix::zeros(dyn_rows + eq_rows, nz);
    let mut b = DVector::zeros(dyn_rows + eq_rows);
    let mut gi = DMatrix::zeros(g_rows, nz);
    let mut l = DVector::zeros(g_rows);

    for i in 0..n {
        a[(i, i)] = T::one();
        b[i] = problem.x_init[i];
    }
    let mut eq_offsets = Vec::with_capacity(nt);
    let mut ineq_offsets = Vec::with_capacity(nt);
    let mut eq_row = dyn_rows;
    let mut g_row = 0;
    for (t, s) in problem.stages.iter().enumerate() {
        let col = t * nm;
        h.view_mut((col, col), (nm, nm)).copy_from(&s.cost_hessian);
        g.rows_mut(col, nm).copy_from(&s.cost_linear);
        if t + 1 < nt {
            let row = (t + 1) * n;
            a.view_mut((row, col), (n, nm)).copy_from(&(-&s.dynamics));
            for i in 0..n {
                a[(row + i, col + nm + i)] = T::one();
            }
            b.rows_mut(row, n).copy_from(&s.offset);
        }
        eq_offsets.push(eq_row);
        let ne = s.eq.nrows();
        if ne > 0 {
            a.view_mut((eq_row, col), (ne, nm)).copy_from(&s.eq);
            b.rows_mut(eq_row, ne).copy_from(&s.eq_rhs);
        }
        eq_row += ne;
        ineq_offsets.push(g_row);
        let ng = s.ineq.nrows();
        if ng > 0 {
            gi.view_mut((g_row, col), (ng, nm)).copy_from(&s.ineq);
            l.rows_mut(g_row, ng).copy_from(&s.ineq_rhs);
        }
        g_row += ng;
    }
    let layout = FlatLayout { n, m, horizon: nt, eq_offsets, ineq_offsets };
    let qp = IqQp::new(EqQp::new(h, g, a, b)?, gi, l)?;
    Ok((qp, layout))
}

/// Splits a flat decision vector back into stages.
pub fn unflatten<T: Scalar>(z: &DVector<T>, layout: &FlatLayout) -> Vec<DVector<T>> {
    let nm = layout.stage_dim();
    (0..layout.horizon).map(|t| z.rows(t * nm, nm).into_owned()).collect()
}

pub(crate) fn solution_from_qp<T: Scalar>(
    problem: &LmpcProblem<T>,
    layout: &FlatLayout,
    result: &QpResult<T>,
) -> LmpcSolution<T> {
    let (n, nt) = (problem.n, problem.horizon());
    let tau = unflatten(&result.z, layout);
    // Equality rows are written as x_{t+1} - F_t τ_t = f_t, so the costate of
    // the usual Lagrangian +λᵀ(F τ + f - x⁺) is the negated QP multiplier.
    let lambda = (1..nt).map(|t| -result.lambda.rows(t * n, n).into_owned()).collect();
    let eq_multipliers = problem
        .stages
        .iter()
        .enumerate()
        .map(|(t, s)| result.lambda.rows(layout.eq_offsets[t], s.eq.nrows()).into_owned())
        .collect();
    let mut nu = Vec::with_capacity(nt);
    let mut active = vec![Vec::new(); nt];
    for (t, s) in problem.stages.iter().enumerate() {
        let off = layout.ineq_offsets[t];
        let ng = s.ineq.nrows();
        nu.push(if result.nu.len() >= off + ng {
            result.nu.rows(off, ng).into_owned()
        } else {
            DVector::zeros(ng)
        });
    }
    for &row in &result.active_rows {
        let t = layout.ineq_offsets.iter().rposition(|&o| o <= row).unwrap_or(0);
        active[t].push(row - layout.ineq_offsets[t]);
    }
    let objective = problem.objective(&tau);
    LmpcSolution { tau, lambda, nu, eq_multipliers, active, objective, stats: result.stats }
}

/// Solves the problem with default options.
pub fn solve_lmpc<T: Scalar>(problem: &LmpcProblem<T>) -> Result<LmpcSolution<T>, LmpcError> {
    solve_lmpc_with(problem, &LmpcOptions::default())
}

pub fn solve_lmpc_with<T: Scalar>(problem: &LmpcProblem<T>, opts: &LmpcOptions) -> Result<LmpcSolution<T>, LmpcError> {
    let (qp_problem, layout) = flatten_with_layout(problem)?;
    let warm: Vec<usize> = match &opts.warm_start {
        Some(sets) => sets
            .iter()
            .enumerate()
            .filter(|(t, _)| *t < layout.horizon)
            .flat_map(|(t, rows)| {
                let off = layout.ineq_offsets[t];
                let ng = problem.stages[t].ineq.nrows();
                rows.iter().filter(move |&&r| r < ng).map(move |&r| off + r)
            })
            .collect(),
        None => Vec::new(),
    };
    let result = qp::solve_iq_qp_warm(&qp_problem, opts.max_iter, &warm)?;
    match result.status {
        QpStatus::Optimal => Ok(solution_from_qp(problem, &layout, &result)),
        QpStatus::Infeasible => Err(LmpcError::Infeasible { stage: first_infeasible_stage(problem, opts.max_iter) }),
        QpStatus::Unbounded => Err(LmpcError::SolverFailure(
            "reduced Hessian is not positive definite on the dynamics null space".into(),
        )),
        QpStatus::MaxIter => Err(LmpcError::SolverFailure(format!(
            "active-set loop hit the iteration limit ({})",
            opts.max_iter
        ))),
    }
}

/// Earliest stage `k` such that the constraints of stages `0..=k` admit no trajectory.
fn first_infeasible_stage<T: Scalar>(problem: &LmpcProblem<T>, max_iter: usize) -> usize {
    let nt = problem.horizon();
    for k in 0..nt {
        let mut truncated = problem.clone();
        for s in truncated.stages.iter_mut().skip(k + 1) {
            let nm = s.ineq.ncols();
            s.ineq = DMatrix::zeros(0, nm);
            s.ineq_rhs = DVector::zeros(0);
        }
        let Ok(qp_problem) = flatten(&truncated) else { continue };
        if let Ok(r) = qp::solve_iq_qp(&qp_problem, max_iter) {
            if r.status == QpStatus::Infeasible {
                return k;
            }
        }
    }
    nt.saturating_sub(1)
}

/// Classifies inequality rows of each stage as active when `|G_t τ*_t - l_t| ≤ tol_act`.
///
/// Multipliers are not consulted, so weakly active rows are included.
pub fn extract_active_sets<T: Scalar>(
    solution: &LmpcSolution<T>,
    problem: &LmpcProblem<T>,
    tol_act: T,
) -> Vec<Vec<usize>> {
    problem
        .stages
        .iter()
        .zip(&solution.tau)
        .map(|(s, tt)| {
            let resid = &s.ineq * tt - &s.ineq_rhs;
            (0..resid.len()).filter(|&j| resid[j].abs() <= tol_act).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn scalar_problem(horizon: usize, x_init: f64, bound: Option<f64>) -> LmpcProblem<f64> {
        // x⁺ = x + u, cost ½x² + ½u²
        let a = dmatrix![1.0];
        let b = dmatrix![1.0];
        let q = dmatrix![1.0];
        let r = dmatrix![1.0];
        let (g, l) = match bound {
            Some(u) => (dmatrix![0.0, 1.0; 0.0, -1.0], dvector![u, u]),
            None => (DMatrix::zeros(0, 2), DVector::zeros(0)),
        };
        LmpcProblem::tracking(&a, &b, &q, &r, vec![dvector![0.0, 0.0]; horizon], &g, &l, dvector![x_init]).unwrap()
    }

    #[test]
    fn flatten_dimensions_single_stage() {
        let p = scalar_problem(1, 0.5, Some(1.0));
        let qp = flatten(&p).unwrap();
        assert_eq!(qp.eq.dim(), 2);
        assert_eq!(qp.eq.a.nrows(), 1);
        assert_eq!(qp.eq.a.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert_eq!(qp.eq.b[0], 0.5);
        assert_eq!(qp.g_ineq.nrows(), 2);
    }

    #[test]
    fn flatten_dimensions_two_stages() {
        let a = DMatrix::<f64>::identity(2, 2);
        let b = dmatrix![0.0; 1.0];
        let p = LmpcProblem::tracking(
            &a,
            &b,
            &DMatrix::identity(2, 2),
            &dmatrix![1.0],
            vec![DVector::zeros(3); 2],
            &DMatrix::zeros(0, 3),
            &DVector::zeros(0),
            dvector![1.0, 0.0],
        )
        .unwrap();
        let qp = flatten(&p).unwrap();
        assert_eq!(qp.eq.dim(), 6);
        assert_eq!(qp.eq.a.nrows(), 4);
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let mut p = scalar_problem(4, 0.0, Some(1.0));
        for s in &mut p.stages {
            s.cost_linear.fill(0.0);
        }
        let sol = solve_lmpc(&p).unwrap();
        assert!(sol.tau.iter().all(|t| t.amax() == 0.0));
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn saturated_scalar_matches_enumeration() {
        // x_init = 10, |u| ≤ 1, T = 3: every control saturates at -1.
        let p = scalar_problem(3, 10.0, Some(1.0));
        let sol = solve_lmpc(&p).unwrap();
        for t in 0..2 {
            assert_relative_eq!(sol.control(t, 1)[0], -1.0, epsilon = 1e-12);
        }
        // the last control has no effect on the cost and sits at zero
        assert_relative_eq!(sol.control(2, 1)[0], 0.0, epsilon = 1e-12);
        let sets = extract_active_sets(&sol, &p, 1e-6);
        assert_eq!(sets[0], vec![1]);
        assert_eq!(sets[1], vec![1]);
        assert!(sets[2].is_empty());
        assert!(p.kkt_residual(&sol) < 1e-10);
    }

    #[test]
    fn interior_solution_has_no_active_rows() {
        let p = scalar_problem(3, 0.5, Some(10.0));
        let sol = solve_lmpc(&p).unwrap();
        assert!(extract_active_sets(&sol, &p, 1e-6).iter().all(|s| s.is_empty()));
    }

    #[test]
    fn zero_activity_tolerance_may_miss_boundary_rows() {
        let p = scalar_problem(3, 10.0, Some(1.0));
        let mut sol = solve_lmpc(&p).unwrap();
        // push the stage-0 control off the bound by a rounding-sized amount
        sol.tau[0][1] += 1e-13;
        let strict = extract_active_sets(&sol, &p, 0.0);
        let loose = extract_active_sets(&sol, &p, DEFAULT_TOL_ACT);
        assert!(strict[0].is_empty());
        assert_eq!(loose[0], vec![1]);
    }

    #[test]
    fn infeasible_stage_is_named() {
        let mut p = scalar_problem(4, 0.0, Some(1.0));
        // stage 2 demands u ≤ 1 and u ≥ 2
        p.stages[2].ineq_rhs = dvector![1.0, -2.0];
        assert_eq!(solve_lmpc(&p).unwrap_err(), LmpcError::Infeasible { stage: 2 });
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut p = scalar_problem(2, 0.0, None);
        p.x_init = dvector![0.0, 1.0];
        assert!(matches!(flatten(&p), Err(LmpcError::DimensionMismatch(_))));
    }

    #[test]
    fn costates_follow_backward_recursion() {
        let p = scalar_problem(4, 3.0, None);
        let sol = solve_lmpc(&p).unwrap();
        // λ_{T-2} = C_{T-1,x} x_{T-1} + c_{T-1,x}
        let last = sol.horizon() - 1;
        assert_relative_eq!(sol.lambda[last - 1][0], sol.tau[last][0], epsilon = 1e-10);
        assert!(p.kkt_residual(&sol) < 1e-10);
    }
}
