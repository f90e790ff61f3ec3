//! Analytic gradients of the optimal LMPC trajectory.
//!
//! Differentiating the KKT conditions of an LMPC problem at its solution gives
//! another LMPC problem with the same cost Hessians and dynamics matrices, zero
//! dynamics offsets, the active inequality rows pinned to `G τ̃ = 0`, and a
//! target-specific linear cost `c̃_t` or initial state `x̃_init`. Its solution
//! `τ̃` is the derivative of `τ*` with respect to the target parameter. The
//! KKT matrix of that problem does not depend on the target, so one
//! factorization serves every target.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::lmpc::{self, extract_active_sets, FlatLayout, LmpcError, LmpcProblem, LmpcSolution, Stage};
use crate::qp::{self, KktFactorization, QpError};
use crate::scalar::Scalar;

/// Parameter a gradient is taken with respect to. Stages are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetKind {
    /// Entry `(i, j)` of the stage cost Hessian `C_t`.
    CostMatrix { stage: usize, i: usize, j: usize },
    /// Entry `i` of the stage linear cost `c_t`.
    CostVector { stage: usize, i: usize },
    /// Entry `(i, j)` of the state weight `Q_t`; `stage: None` differentiates
    /// a weight shared by every stage.
    StateWeight { stage: Option<usize>, i: usize, j: usize },
    /// Entry `(i, j)` of the control weight `R_t`; `stage: None` as above.
    ControlWeight { stage: Option<usize>, i: usize, j: usize },
    /// Entry `i` of the initial state.
    InitialState { i: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GradTarget {
    pub kind: TargetKind,
    /// Treat the matrix as symmetric, so entries `(i, j)` and `(j, i)` move together.
    pub symmetric: bool,
}

impl GradTarget {
    pub fn new(kind: TargetKind) -> Self {
        GradTarget { kind, symmetric: false }
    }

    pub fn symmetric(kind: TargetKind) -> Self {
        GradTarget { kind, symmetric: true }
    }

    pub fn initial_state(i: usize) -> Self {
        Self::new(TargetKind::InitialState { i })
    }

    /// Diagonal entry `i` of a state weight shared by every stage.
    pub fn shared_state_diag(i: usize) -> Self {
        Self::new(TargetKind::StateWeight { stage: None, i, j: i })
    }

    /// Diagonal entry `i` of a control weight shared by every stage.
    pub fn shared_control_diag(i: usize) -> Self {
        Self::new(TargetKind::ControlWeight { stage: None, i, j: i })
    }
}

/// Linear data of the auxiliary problem.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxCoefficients<T: Scalar> {
    pub c_tilde: Vec<DVector<T>>,
    pub x_init_tilde: DVector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradResult<T: Scalar> {
    /// Derivative of the first control `u*_0`.
    pub du1: DVector<T>,
    /// Derivative of the whole trajectory.
    pub dtau: Vec<DVector<T>>,
    /// Some pinned row had a vanishing multiplier; the result is one-sided.
    pub weakly_active: bool,
    /// Some pinned rows were linearly dependent and were dropped.
    pub dependent_rows: bool,
    /// `max_t ‖[G_t]_act τ̃_t‖∞`.
    pub annihilation_residual: T,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradStats {
    pub factorizations: usize,
    pub solves: usize,
    pub active_set_iterations: usize,
    pub dropped_rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GradError {
    /// The supplied solution does not satisfy the problem's KKT conditions.
    StaleSolution { residual: f64 },
    InvalidTarget(String),
    /// A weight target was requested on a problem without a tracking reference.
    MissingReference,
    SingularKkt { cond: f64 },
    Lmpc(LmpcError),
    Qp(QpError),
}

impl fmt::Display for GradError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradError::StaleSolution { residual } => {
                write!(f, "solution does not match the problem (KKT residual {residual:.3e})")
            }
            GradError::InvalidTarget(why) => write!(f, "invalid gradient target: {why}"),
            GradError::MissingReference => write!(f, "weight targets need a problem with a tracking reference"),
            GradError::SingularKkt { cond } => write!(f, "auxiliary KKT matrix singular (condition ~{cond:.3e})"),
            GradError::Lmpc(e) => write!(f, "{e}"),
            GradError::Qp(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for GradError {}

impl From<LmpcError> for GradError {
    fn from(e: LmpcError) -> Self {
        match e {
            LmpcError::Qp(q) => q.into(),
            other => GradError::Lmpc(other),
        }
    }
}

impl From<QpError> for GradError {
    fn from(e: QpError) -> Self {
        match e {
            QpError::SingularKkt { cond } => GradError::SingularKkt { cond },
            other => GradError::Qp(other),
        }
    }
}

fn unit<T: Scalar>(len: usize, i: usize) -> DVector<T> {
    let mut v = DVector::zeros(len);
    v[i] = T::one();
    v
}

/// `scale_j e_i`, or `½(scale_j e_i + scale_i e_j)` when symmetric.
fn outer_column<T: Scalar>(len: usize, i: usize, j: usize, delta: &DVector<T>, symmetric: bool) -> DVector<T> {
    let mut v = DVector::zeros(len);
    if symmetric {
        let half = T::lit(0.5);
        v[i] += half * delta[j];
        v[j] += half * delta[i];
    } else {
        v[i] = delta[j];
    }
    v
}

fn check_index(what: &str, idx: usize, bound: usize) -> Result<(), GradError> {
    if idx >= bound {
        return Err(GradError::InvalidTarget(format!("{what} index {idx} out of range (< {bound})")));
    }
    Ok(())
}

impl<T: Scalar> AuxCoefficients<T> {
    /// Coefficients of the auxiliary problem for `target` at `tau`.
    pub fn for_target(problem: &LmpcProblem<T>, tau: &[DVector<T>], target: &GradTarget) -> Result<Self, GradError> {
        let (n, m, nt) = (problem.n, problem.m, problem.horizon());
        let nm = n + m;
        let mut c_tilde = vec![DVector::zeros(nm); nt];
        let mut x_init_tilde = DVector::zeros(n);
        let stages_of = |stage: Option<usize>| -> Result<Vec<usize>, GradError> {
            match stage {
                Some(t) => {
                    check_index("stage", t, nt)?;
                    Ok(vec![t])
                }
                None => Ok((0..nt).collect()),
            }
        };
        match target.kind {
            TargetKind::CostMatrix { stage, i, j } => {
                check_index("stage", stage, nt)?;
                check_index("row", i, nm)?;
                check_index("column", j, nm)?;
                c_tilde[stage] = outer_column(nm, i, j, &tau[stage], target.symmetric);
            }
            TargetKind::CostVector { stage, i } => {
                check_index("stage", stage, nt)?;
                check_index("entry", i, nm)?;
                c_tilde[stage] = unit(nm, i);
            }
            TargetKind::InitialState { i } => {
                check_index("state", i, n)?;
                x_init_tilde = unit(n, i);
            }
            TargetKind::StateWeight { stage, i, j } => {
                check_index("row", i, n)?;
                check_index("column", j, n)?;
                let reference = problem.reference.as_ref().ok_or(GradError::MissingReference)?;
                for t in stages_of(stage)? {
                    let err = tau[t].rows(0, n) - reference[t].rows(0, n);
                    let col = outer_column(n, i, j, &err, target.symmetric);
                    c_tilde[t].rows_mut(0, n).copy_from(&col);
                }
            }
            TargetKind::ControlWeight { stage, i, j } => {
                check_index("row", i, m)?;
                check_index("column", j, m)?;
                let reference = problem.reference.as_ref().ok_or(GradError::MissingReference)?;
                for t in stages_of(stage)? {
                    let err = tau[t].rows(n, m) - reference[t].rows(n, m);
                    let col = outer_column(m, i, j, &err, target.symmetric);
                    c_tilde[t].rows_mut(n, m).copy_from(&col);
                }
            }
        }
        Ok(AuxCoefficients { c_tilde, x_init_tilde })
    }
}

/// Tolerance on the KKT residual above which a solution counts as stale.
fn stale_tolerance<T: Scalar>(problem: &LmpcProblem<T>, solution: &LmpcSolution<T>) -> T {
    let mut scale = problem.x_init.amax();
    for (s, tt) in problem.stages.iter().zip(&solution.tau) {
        scale = scale.max(s.cost_linear.amax()).max(s.cost_hessian.amax() * tt.amax()).max(s.offset.amax());
    }
    T::tol(1e-6) * (T::one() + scale)
}

fn check_fresh<T: Scalar>(problem: &LmpcProblem<T>, solution: &LmpcSolution<T>) -> Result<(), GradError> {
    problem.validate()?;
    let residual = problem.kkt_residual(solution);
    if !(residual <= stale_tolerance(problem, solution)) {
        return Err(GradError::StaleSolution { residual: residual.to_f64_lossy() });
    }
    Ok(())
}

/// Builds the auxiliary problem whose solution is the gradient for `target`.
///
/// Active rows (within `tol_act` of their bound) become stage equalities; all
/// other inequality rows are removed.
pub fn build_aux_problem<T: Scalar>(
    problem: &LmpcProblem<T>,
    solution: &LmpcSolution<T>,
    target: &GradTarget,
) -> Result<LmpcProblem<T>, GradError> {
    build_aux_problem_with(problem, solution, target, lmpc::default_tol_act::<T>())
}

pub fn build_aux_problem_with<T: Scalar>(
    problem: &LmpcProblem<T>,
    solution: &LmpcSolution<T>,
    target: &GradTarget,
    tol_act: T,
) -> Result<LmpcProblem<T>, GradError> {
    check_fresh(problem, solution)?;
    let coeffs = AuxCoefficients::for_target(problem, &solution.tau, target)?;
    let active = extract_active_sets(solution, problem, tol_act);
    Ok(aux_problem(problem, &active, coeffs))
}

fn pinned_rows<T: Scalar>(stage: &Stage<T>, rows: &[usize]) -> DMatrix<T> {
    let nm = stage.ineq.ncols();
    let mut e = DMatrix::zeros(rows.len(), nm);
    for (r, &j) in rows.iter().enumerate() {
        e.row_mut(r).copy_from(&stage.ineq.row(j));
    }
    e
}

fn aux_problem<T: Scalar>(problem: &LmpcProblem<T>, active: &[Vec<usize>], coeffs: AuxCoefficients<T>) -> LmpcProblem<T> {
    let (n, nm) = (problem.n, problem.stage_dim());
    let stages = problem
        .stages
        .iter()
        .zip(active)
        .zip(coeffs.c_tilde)
        .map(|((s, rows), c_tilde)| {
            // previously pinned rows keep holding with zero right-hand side
            let mut eq = pinned_rows(s, rows);
            if s.eq.nrows() > 0 {
                let stacked = DMatrix::from_fn(eq.nrows() + s.eq.nrows(), nm, |r, c| {
                    if r < eq.nrows() {
                        eq[(r, c)]
                    } else {
                        s.eq[(r - eq.nrows(), c)]
                    }
                });
                eq = stacked;
            }
            let ne = eq.nrows();
            Stage::new(s.cost_hessian.clone(), c_tilde, s.dynamics.clone(), DVector::zeros(n))
                .with_equalities(eq, DVector::zeros(ne))
        })
        .collect();
    LmpcProblem { n, m: problem.m, stages, x_init: coeffs.x_init_tilde, reference: None }
}

fn weakly_active<T: Scalar>(solution: &LmpcSolution<T>, active: &[Vec<usize>]) -> bool {
    let scale = solution.nu.iter().fold(T::one(), |acc, nu| acc.max(nu.amax()));
    let tiny = T::tol(1e-9) * scale;
    active.iter().zip(&solution.nu).any(|(rows, nu)| rows.iter().any(|&j| nu[j].abs() <= tiny))
}

fn annihilation<T: Scalar>(problem: &LmpcProblem<T>, active: &[Vec<usize>], dtau: &[DVector<T>]) -> T {
    problem
        .stages
        .iter()
        .zip(active)
        .zip(dtau)
        .fold(T::zero(), |acc, ((s, rows), d)| acc.max((pinned_rows(s, rows) * d).amax()))
}

/// Gradient for a single target.
///
/// The auxiliary problem is flattened and handed to the equality-constrained
/// solver; no active-set iterations take place.
pub fn solve_gradient<T: Scalar>(
    problem: &LmpcProblem<T>,
    solution: &LmpcSolution<T>,
    target: &GradTarget,
) -> Result<GradResult<T>, GradError> {
    let tol_act = lmpc::default_tol_act::<T>();
    let aux = build_aux_problem_with(problem, solution, target, tol_act)?;
    let active = extract_active_sets(solution, problem, tol_act);
    let (flat, layout) = lmpc::flatten_with_layout(&aux)?;
    let result = qp::solve_eq_qp(&flat.eq)?;
    let dtau = lmpc::unflatten(&result.z, &layout);
    let (n, m) = (problem.n, problem.m);
    Ok(GradResult {
        du1: dtau[0].rows(n, m).into_owned(),
        annihilation_residual: annihilation(problem, &active, &dtau),
        dtau,
        weakly_active: weakly_active(solution, &active),
        dependent_rows: result.stats.dropped_rows > 0,
    })
}

/// Gradient solver that factorizes the auxiliary KKT matrix once and reuses it
/// for every target.
#[derive(Debug)]
pub struct GradientSolver<T: Scalar> {
    problem: LmpcProblem<T>,
    tau: Vec<DVector<T>>,
    active: Vec<Vec<usize>>,
    layout: FlatLayout,
    kkt: Arc<KktFactorization<T>>,
    weakly_active: bool,
    solves: std::sync::atomic::AtomicUsize,
}

impl<T: Scalar> GradientSolver<T> {
    pub fn new(problem: &LmpcProblem<T>, solution: &LmpcSolution<T>) -> Result<Self, GradError> {
        Self::with_tolerance(problem, solution, lmpc::default_tol_act::<T>())
    }

    pub fn with_tolerance(problem: &LmpcProblem<T>, solution: &LmpcSolution<T>, tol_act: T) -> Result<Self, GradError> {
        check_fresh(problem, solution)?;
        let active = extract_active_sets(solution, problem, tol_act);
        let zero = AuxCoefficients {
            c_tilde: vec![DVector::zeros(problem.stage_dim()); problem.horizon()],
            x_init_tilde: DVector::zeros(problem.n),
        };
        let aux = aux_problem(problem, &active, zero);
        let (flat, layout) = lmpc::flatten_with_layout(&aux)?;
        let kkt = Arc::new(KktFactorization::new(&flat.eq.h, &flat.eq.a)?);
        Ok(GradientSolver {
            problem: problem.clone(),
            tau: solution.tau.clone(),
            weakly_active: weakly_active(solution, &active),
            active,
            layout,
            kkt,
            solves: Default::default(),
        })
    }

    /// Reuses a factorization of the unconstrained auxiliary KKT matrix.
    ///
    /// Valid only when no inequality row is active and the problem has no
    /// pinned equalities, so that the auxiliary problem contains just the cost
    /// Hessians and dynamics of `problem`; the caller guarantees that `kkt`
    /// factorizes exactly that matrix.
    pub fn with_factorization(
        problem: &LmpcProblem<T>,
        solution: &LmpcSolution<T>,
        kkt: Arc<KktFactorization<T>>,
    ) -> Result<Self, GradError> {
        check_fresh(problem, solution)?;
        let active = extract_active_sets(solution, problem, lmpc::default_tol_act::<T>());
        if active.iter().any(|a| !a.is_empty()) || problem.stages.iter().any(|s| s.eq.nrows() > 0) {
            return Err(GradError::InvalidTarget("shared factorization needs an inactive constraint set".into()));
        }
        let layout = lmpc::FlatLayout {
            n: problem.n,
            m: problem.m,
            horizon: problem.horizon(),
            eq_offsets: vec![problem.n * problem.horizon(); problem.horizon()],
            ineq_offsets: vec![0; problem.horizon()],
        };
        Ok(GradientSolver {
            problem: problem.clone(),
            tau: solution.tau.clone(),
            weakly_active: false,
            active,
            layout,
            kkt,
            solves: Default::default(),
        })
    }

    pub fn factorization(&self) -> Arc<KktFactorization<T>> {
        Arc::clone(&self.kkt)
    }

    pub fn active_sets(&self) -> &[Vec<usize>] {
        &self.active
    }

    pub fn stats(&self) -> GradStats {
        GradStats {
            factorizations: 1,
            solves: self.solves.load(std::sync::atomic::Ordering::Relaxed),
            active_set_iterations: 0,
            dropped_rows: self.kkt.dropped_rows().len(),
        }
    }

    /// Gradient for one target, as a back-substitution against the stored factorization.
    pub fn solve(&self, target: &GradTarget) -> Result<GradResult<T>, GradError> {
        let coeffs = AuxCoefficients::for_target(&self.problem, &self.tau, target)?;
        self.solve_coefficients(&coeffs)
    }

    /// Solves with explicit auxiliary coefficients.
    pub fn solve_coefficients(&self, coeffs: &AuxCoefficients<T>) -> Result<GradResult<T>, GradError> {
        let (n, m, nt) = (self.problem.n, self.problem.m, self.problem.horizon());
        let nm = n + m;
        if coeffs.c_tilde.len() != nt || coeffs.x_init_tilde.len() != n || coeffs.c_tilde.iter().any(|c| c.len() != nm)
        {
            return Err(GradError::InvalidTarget("auxiliary coefficient shapes".into()));
        }
        let mut g = DVector::zeros(nt * nm);
        for (t, c) in coeffs.c_tilde.iter().enumerate() {
            g.rows_mut(t * nm, nm).copy_from(c);
        }
        let mut b = DVector::zeros(self.kkt_rows());
        b.rows_mut(0, n).copy_from(&coeffs.x_init_tilde);
        let (z, _) = self.kkt.solve(&g, &b)?;
        self.solves.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let dtau = lmpc::unflatten(&z, &self.layout);
        Ok(GradResult {
            du1: dtau[0].rows(n, m).into_owned(),
            annihilation_residual: annihilation(&self.problem, &self.active, &dtau),
            dtau,
            weakly_active: self.weakly_active,
            dependent_rows: !self.kkt.dropped_rows().is_empty(),
        })
    }

    fn kkt_rows(&self) -> usize {
        self.layout.dynamics_rows() + self.active.iter().map(Vec::len).sum::<usize>()
            + self.problem.stages.iter().map(|s| s.eq.nrows()).sum::<usize>()
    }

    /// Gradients for many targets; runs in parallel when enabled.
    pub fn solve_batch(&self, targets: &[GradTarget]) -> Vec<Result<GradResult<T>, GradError>> {
        crate::parallel::map(targets, |t| self.solve(t))
    }

    /// `∂u*_0/∂x_init` as an m×n matrix.
    pub fn control_state_jacobian(&self) -> Result<DMatrix<T>, GradError> {
        let targets: Vec<_> = (0..self.problem.n).map(GradTarget::initial_state).collect();
        self.jacobian_of(&targets)
    }

    /// Stacks `du1` of every target as columns of an m×k matrix.
    pub fn jacobian_of(&self, targets: &[GradTarget]) -> Result<DMatrix<T>, GradError> {
        let mut jac = DMatrix::zeros(self.problem.m, targets.len());
        for (k, r) in self.solve_batch(targets).into_iter().enumerate() {
            jac.set_column(k, &r?.du1);
        }
        Ok(jac)
    }
}

/// Returns a copy of `problem` with the target parameter moved by `h`.
///
/// Matrix entries are perturbed symmetrically (`h/2` on `(i, j)` and `(j, i)`,
/// `h` on the diagonal) so the perturbed cost stays symmetric; the matching
/// analytic gradient is the symmetric one.
pub fn perturb<T: Scalar>(problem: &LmpcProblem<T>, target: &GradTarget, h: T) -> Result<LmpcProblem<T>, GradError> {
    let (n, m, nt) = (problem.n, problem.m, problem.horizon());
    let nm = n + m;
    let mut p = problem.clone();
    let bump = |mat: &mut DMatrix<T>, i: usize, j: usize| {
        if i == j {
            mat[(i, i)] += h;
        } else {
            let half = h * T::lit(0.5);
            mat[(i, j)] += half;
            mat[(j, i)] += half;
        }
    };
    let stages_of = |stage: Option<usize>| -> Result<Vec<usize>, GradError> {
        match stage {
            Some(t) => check_index("stage", t, nt).map(|_| vec![t]),
            None => Ok((0..nt).collect()),
        }
    };
    match target.kind {
        TargetKind::CostMatrix { stage, i, j } => {
            check_index("stage", stage, nt)?;
            check_index("row", i, nm)?;
            check_index("column", j, nm)?;
            bump(&mut p.stages[stage].cost_hessian, i, j);
        }
        TargetKind::CostVector { stage, i } => {
            check_index("stage", stage, nt)?;
            check_index("entry", i, nm)?;
            p.stages[stage].cost_linear[i] += h;
        }
        TargetKind::InitialState { i } => {
            check_index("state", i, n)?;
            p.x_init[i] += h;
        }
        TargetKind::StateWeight { stage, i, j } | TargetKind::ControlWeight { stage, i, j } => {
            let offset = if matches!(target.kind, TargetKind::StateWeight { .. }) { 0 } else { n };
            let dim = if offset == 0 { n } else { m };
            check_index("row", i, dim)?;
            check_index("column", j, dim)?;
            let reference = problem.reference.clone().ok_or(GradError::MissingReference)?;
            for t in stages_of(stage)? {
                let s = &mut p.stages[t];
                let old = &s.cost_hessian * &reference[t];
                bump(&mut s.cost_hessian, offset + i, offset + j);
                // c = -C τ̄ follows the weight
                let new = &s.cost_hessian * &reference[t];
                s.cost_linear += old - new;
            }
        }
    }
    Ok(p)
}

/// Central finite difference of `u*_0` along `target` with step `h`.
pub fn fd_gradient<T: Scalar>(problem: &LmpcProblem<T>, target: &GradTarget, h: T) -> Result<DVector<T>, GradError> {
    let plus = lmpc::solve_lmpc(&perturb(problem, target, h)?)?;
    let minus = lmpc::solve_lmpc(&perturb(problem, target, -h)?)?;
    Ok((plus.first_control(problem.n) - minus.first_control(problem.n)) / (h + h))
}

/// Central finite difference of the whole trajectory.
pub fn fd_trajectory<T: Scalar>(
    problem: &LmpcProblem<T>,
    target: &GradTarget,
    h: T,
) -> Result<Vec<DVector<T>>, GradError> {
    let plus = lmpc::solve_lmpc(&perturb(problem, target, h)?)?;
    let minus = lmpc::solve_lmpc(&perturb(problem, target, -h)?)?;
    Ok(plus.tau.iter().zip(&minus.tau).map(|(a, b)| (a - b) / (h + h)).collect())
}

/// Jacobian of the projection `u ↦ argmin_v ½‖v − u‖² s.t. G v ≤ l`.
///
/// Computed as a one-stage, state-free MPC problem: the projection has linear
/// cost `−u`, so each column is the negated gradient with respect to that cost.
pub fn constrain_operator_jacobian<T: Scalar>(
    g: &DMatrix<T>,
    l: &DVector<T>,
    u: &DVector<T>,
) -> Result<DMatrix<T>, GradError> {
    let m = u.len();
    if g.ncols() != m || g.nrows() != l.len() {
        return Err(GradError::Lmpc(LmpcError::DimensionMismatch("projection constraints".into())));
    }
    let stage = Stage::new(DMatrix::identity(m, m), -u, DMatrix::zeros(0, m), DVector::zeros(0))
        .with_inequalities(g.clone(), l.clone());
    let problem = LmpcProblem { n: 0, m, stages: vec![stage], x_init: DVector::zeros(0), reference: None };
    let solution = lmpc::solve_lmpc(&problem)?;
    let solver = GradientSolver::new(&problem, &solution)?;
    let targets: Vec<_> = (0..m).map(|i| GradTarget::new(TargetKind::CostVector { stage: 0, i })).collect();
    Ok(-solver.jacobian_of(&targets)?)
}

/// Every target of the (C, c, x_init) parametrization for a problem.
pub fn all_cost_targets<T: Scalar>(problem: &LmpcProblem<T>) -> Vec<GradTarget> {
    let (nm, nt) = (problem.stage_dim(), problem.horizon());
    let mut out = Vec::new();
    for stage in 0..nt {
        for i in 0..nm {
            for j in i..nm {
                out.push(GradTarget::symmetric(TargetKind::CostMatrix { stage, i, j }));
            }
            out.push(GradTarget::new(TargetKind::CostVector { stage, i }));
        }
    }
    out.extend((0..problem.n).map(GradTarget::initial_state));
    out
}

/// Every per-stage entry of the (Q, R) parametrization, symmetric form.
pub fn all_weight_targets<T: Scalar>(problem: &LmpcProblem<T>) -> Vec<GradTarget> {
    let (n, m, nt) = (problem.n, problem.m, problem.horizon());
    let mut out = Vec::new();
    for t in 0..nt {
        for i in 0..n {
            for j in i..n {
                out.push(GradTarget::symmetric(TargetKind::StateWeight { stage: Some(t), i, j }));
            }
        }
        for i in 0..m {
            for j in i..m {
                out.push(GradTarget::symmetric(TargetKind::ControlWeight { stage: Some(t), i, j }));
            }
        }
    }
    out
}
