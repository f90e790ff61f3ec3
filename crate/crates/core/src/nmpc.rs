//! Nonlinear MPC by sequential quadratic programming.
//!
//! Each iteration Taylor-expands the dynamics and constraints to first order
//! and the stage cost to second order around the current iterate, solves the
//! resulting LMPC problem, and takes its solution as the next iterate. The
//! converged problem is re-linearized once more with the multiplier-weighted
//! curvature of the dynamics and constraints added to the cost Hessian, which
//! makes that last linearization's KKT matrix the Jacobian of the nonlinear
//! optimality conditions; differentiating it with [`crate::grad`] then yields
//! the derivatives of the nonlinear solution.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grad::{GradError, GradResult, GradTarget, GradientSolver};
use crate::lmpc::{self, LmpcError, LmpcOptions, LmpcProblem, LmpcSolution, Stage};
use crate::scalar::Scalar;
use crate::systems::{Dynamics, SystemError};

/// Stage cost `𝒞_t(τ_t)`; `t` is the 0-based stage index.
pub trait StageCost<T: Scalar>: Send + Sync {
    fn value(&self, t: usize, tau: &DVector<T>) -> T;
    fn gradient(&self, t: usize, tau: &DVector<T>) -> DVector<T>;
    fn hessian(&self, t: usize, tau: &DVector<T>) -> DMatrix<T>;
    /// Tracking reference of stage `t`, if the cost is of tracking form.
    fn reference(&self, _t: usize) -> Option<DVector<T>> {
        None
    }
}

/// Stage inequalities `g_t(τ_t) ≤ 0`.
pub trait StageConstraint<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: usize, tau: &DVector<T>) -> DVector<T>;
    fn jacobian(&self, t: usize, tau: &DVector<T>) -> DMatrix<T>;
    /// `Σ_j w_j ∇²g_j`; zero for linear constraints.
    fn weighted_hessian(&self, _t: usize, tau: &DVector<T>, _w: &DVector<T>) -> DMatrix<T> {
        DMatrix::zeros(tau.len(), tau.len())
    }
}

/// `½(x−x̄_t)ᵀQ(x−x̄_t) + ½(u−ū_t)ᵀR(u−ū_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost<T: Scalar> {
    pub q: DMatrix<T>,
    pub r: DMatrix<T>,
    /// `τ̄_t = [x̄_t; ū_t]` for every stage.
    pub reference: Vec<DVector<T>>,
}

impl<T: Scalar> QuadraticCost<T> {
    pub fn new(q: DMatrix<T>, r: DMatrix<T>, reference: Vec<DVector<T>>) -> Self {
        QuadraticCost { q, r, reference }
    }

    fn weight(&self) -> DMatrix<T> {
        lmpc::block_diag(&self.q, &self.r)
    }
}

impl<T: Scalar> StageCost<T> for QuadraticCost<T> {
    fn value(&self, t: usize, tau: &DVector<T>) -> T {
        let e = tau - &self.reference[t];
        T::lit(0.5) * (e.transpose() * self.weight() * &e)[0]
    }

    fn gradient(&self, t: usize, tau: &DVector<T>) -> DVector<T> {
        self.weight() * (tau - &self.reference[t])
    }

    fn hessian(&self, _t: usize, _tau: &DVector<T>) -> DMatrix<T> {
        self.weight()
    }

    fn reference(&self, t: usize) -> Option<DVector<T>> {
        self.reference.get(t).cloned()
    }
}

/// `G τ ≤ l` at every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint<T: Scalar> {
    pub g: DMatrix<T>,
    pub l: DVector<T>,
}

impl<T: Scalar> StageConstraint<T> for LinearConstraint<T> {
    fn dim(&self) -> usize {
        self.g.nrows()
    }

    fn eval(&self, _t: usize, tau: &DVector<T>) -> DVector<T> {
        &self.g * tau - &self.l
    }

    fn jacobian(&self, _t: usize, _tau: &DVector<T>) -> DMatrix<T> {
        self.g.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NmpcError {
    DimensionMismatch(String),
    /// A callback's derivative disagrees with finite differences at construction.
    CallbackMismatch { what: String, error: f64 },
    CallbackFailure(String),
    /// The LMPC subproblem of iteration `iter` has no feasible trajectory.
    SubproblemInfeasible { iter: usize, stage: usize },
    Lmpc(LmpcError),
}

impl fmt::Display for NmpcError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NmpcError::DimensionMismatch(what) => write!(f, "dimension mismatch: {what}"),
            NmpcError::CallbackMismatch { what, error } => {
                write!(f, "{what} does not match finite differences (error {error:.3e})")
            }
            NmpcError::CallbackFailure(why) => write!(f, "callback failed: {why}"),
            NmpcError::SubproblemInfeasible { iter, stage } => {
                write!(f, "subproblem {iter} infeasible at stage {stage}")
            }
            NmpcError::Lmpc(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for NmpcError {}

impl From<SystemError> for NmpcError {
    fn from(e: SystemError) -> Self {
        NmpcError::CallbackFailure(e.to_string())
    }
}

impl From<LmpcError> for NmpcError {
    fn from(e: LmpcError) -> Self {
        NmpcError::Lmpc(e)
    }
}

/// A nonlinear MPC problem over `horizon` stages.
#[derive(Clone)]
pub struct NmpcProblem<T: Scalar> {
    pub horizon: usize,
    pub dynamics: Arc<dyn Dynamics<T>>,
    pub cost: Arc<dyn StageCost<T>>,
    pub constraint: Option<Arc<dyn StageConstraint<T>>>,
    pub x_init: DVector<T>,
}

impl<T: Scalar> fmt::Debug for NmpcProblem<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NmpcProblem")
            .field("horizon", &self.horizon)
            .field("n", &self.dynamics.state_dim())
            .field("m", &self.dynamics.control_dim())
            .field("x_init", &self.x_init)
            .finish_non_exhaustive()
    }
}

/// Seed of the point used for the derivative spot check.
const SPOT_CHECK_SEED: u64 = 0x5eed;

impl<T: Scalar> NmpcProblem<T> {
    /// Builds the problem after checking every callback derivative against
    /// central differences at a pseudo-random point near `x_init`.
    pub fn new(
        horizon: usize,
        dynamics: Arc<dyn Dynamics<T>>,
        cost: Arc<dyn StageCost<T>>,
        constraint: Option<Arc<dyn StageConstraint<T>>>,
        x_init: DVector<T>,
    ) -> Result<Self, NmpcError> {
        let problem = Self::new_unchecked(horizon, dynamics, cost, constraint, x_init)?;
        problem.spot_check()?;
        Ok(problem)
    }

    /// Builds the problem checking dimensions only.
    pub fn new_unchecked(
        horizon: usize,
        dynamics: Arc<dyn Dynamics<T>>,
        cost: Arc<dyn StageCost<T>>,
        constraint: Option<Arc<dyn StageConstraint<T>>>,
        x_init: DVector<T>,
    ) -> Result<Self, NmpcError> {
        if horizon == 0 {
            return Err(NmpcError::DimensionMismatch("horizon must be at least 1".into()));
        }
        if x_init.len() != dynamics.state_dim() {
            return Err(NmpcError::DimensionMismatch(format!(
                "x_init has length {}, dynamics state dimension is {}",
                x_init.len(),
                dynamics.state_dim()
            )));
        }
        Ok(NmpcProblem { horizon, dynamics, cost, constraint, x_init })
    }

    pub fn n(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn m(&self) -> usize {
        self.dynamics.control_dim()
    }

    fn split(&self, tau: &DVector<T>) -> (DVector<T>, DVector<T>) {
        let (n, m) = (self.n(), self.m());
        (tau.rows(0, n).into_owned(), tau.rows(n, m).into_owned())
    }

    fn spot_check(&self) -> Result<(), NmpcError> {
        let (n, m) = (self.n(), self.m());
        let nm = n + m;
        let mut rng = ChaCha8Rng::seed_from_u64(SPOT_CHECK_SEED);
        let mut tau = DVector::from_fn(nm, |_, _| T::lit(rng.gen_range(-0.5..0.5)));
        for i in 0..n {
            tau[i] += self.x_init[i];
        }
        let t = rng.gen_range(0..self.horizon);
        let h = T::tol(1e-6);
        let tol = T::tol(1e-5);
        let fd = |f: &dyn Fn(&DVector<T>) -> Result<DVector<T>, NmpcError>| -> Result<DMatrix<T>, NmpcError> {
            let base = f(&tau)?;
            let mut jac = DMatrix::zeros(base.len(), nm);
            for k in 0..nm {
                let mut tp = tau.clone();
                tp[k] += h;
                let mut tm = tau.clone();
                tm[k] -= h;
                jac.set_column(k, &((f(&tp)? - f(&tm)?) / (h + h)));
            }
            Ok(jac)
        };
        let compare = |what: &str, analytic: &DMatrix<T>, numeric: &DMatrix<T>| -> Result<(), NmpcError> {
            if analytic.shape() != numeric.shape() {
                return Err(NmpcError::DimensionMismatch(format!("{what} has shape {:?}", analytic.shape())));
            }
            let err = (analytic - numeric).amax();
            if !(err <= tol * (T::one() + numeric.amax())) {
                return Err(NmpcError::CallbackMismatch { what: what.into(), error: err.to_f64_lossy() });
            }
            Ok(())
        };

        let step = |tt: &DVector<T>| -> Result<DVector<T>, NmpcError> {
            let (x, u) = self.split(tt);
            Ok(self.dynamics.step(&x, &u)?)
        };
        let (x, u) = self.split(&tau);
        let (fx, fu) = self.dynamics.jacobians(&x, &u);
        let mut jac = DMatrix::zeros(n, nm);
        jac.view_mut((0, 0), (n, n)).copy_from(&fx);
        jac.view_mut((0, n), (n, m)).copy_from(&fu);
        compare("dynamics Jacobian", &jac, &fd(&step)?)?;

        let value = |tt: &DVector<T>| Ok(DVector::from_element(1, self.cost.value(t, tt)));
        let g_row = DMatrix::from_row_slice(1, nm, self.cost.gradient(t, &tau).as_slice());
        compare("cost gradient", &g_row, &fd(&value)?)?;
        let grad = |tt: &DVector<T>| Ok(self.cost.gradient(t, tt));
        compare("cost Hessian", &self.cost.hessian(t, &tau), &fd(&grad)?)?;

        if let Some(c) = &self.constraint {
            let eval = |tt: &DVector<T>| Ok(c.eval(t, tt));
            compare("constraint Jacobian", &c.jacobian(t, &tau), &fd(&eval)?)?;
        }
        Ok(())
    }

    /// Simulates the dynamics from `x_init` with the cost's reference controls
    /// (zero when the cost has no reference).
    pub fn cold_start(&self) -> Result<Vec<DVector<T>>, NmpcError> {
        let (n, m) = (self.n(), self.m());
        let mut x = self.x_init.clone();
        let mut out = Vec::with_capacity(self.horizon);
        for t in 0..self.horizon {
            let u = self.cost.reference(t).map_or_else(|| DVector::zeros(m), |r| r.rows(n, m).into_owned());
            let mut tau = DVector::zeros(n + m);
            tau.rows_mut(0, n).copy_from(&x);
            tau.rows_mut(n, m).copy_from(&u);
            out.push(tau);
            if t + 1 < self.horizon {
                x = self.dynamics.step(&x, &u)?;
            }
        }
        Ok(out)
    }

    /// True objective `Σ 𝒞_t(τ_t)`.
    pub fn objective(&self, tau: &[DVector<T>]) -> T {
        tau.iter().enumerate().fold(T::zero(), |acc, (t, tt)| acc + self.cost.value(t, tt))
    }

    /// `Σ ‖x_{t+1} − f(τ_t)‖₁ + Σ max(g, 0) + ‖x_0 − x_init‖₁`.
    pub fn violation(&self, tau: &[DVector<T>]) -> Result<T, NmpcError> {
        let n = self.n();
        let mut v = (tau[0].rows(0, n) - &self.x_init).lp_norm(1);
        for t in 0..tau.len() {
            let (x, u) = self.split(&tau[t]);
            if t + 1 < tau.len() {
                v += (tau[t + 1].rows(0, n) - self.dynamics.step(&x, &u)?).lp_norm(1);
            }
            if let Some(c) = &self.constraint {
                v += c.eval(t, &tau[t]).iter().fold(T::zero(), |acc, g| acc + g.max(T::zero()));
            }
        }
        Ok(v)
    }

    /// Maximum violation of the nonlinear KKT conditions.
    pub fn kkt_residual(&self, solution: &LmpcSolution<T>) -> Result<T, NmpcError> {
        let (n, nt) = (self.n(), self.horizon);
        let tau = &solution.tau;
        let mut worst = (tau[0].rows(0, n) - &self.x_init).amax();
        for t in 0..nt {
            let (x, u) = self.split(&tau[t]);
            let mut grad = self.cost.gradient(t, &tau[t]);
            if t + 1 < nt {
                let (fx, fu) = self.dynamics.jacobians(&x, &u);
                let lam = &solution.lambda[t];
                let mut fx_part = grad.rows_mut(0, n);
                fx_part += fx.transpose() * lam;
                let mut fu_part = grad.rows_mut(n, self.m());
                fu_part += fu.transpose() * lam;
                worst = worst.max((tau[t + 1].rows(0, n) - self.dynamics.step(&x, &u)?).amax());
            }
            if t > 0 {
                let mut xpart = grad.rows_mut(0, n);
                xpart -= &solution.lambda[t - 1];
            }
            if let Some(c) = &self.constraint {
                let nu = &solution.nu[t];
                grad += c.jacobian(t, &tau[t]).transpose() * nu;
                let g = c.eval(t, &tau[t]);
                for j in 0..g.len() {
                    worst = worst.max(g[j]).max(-nu[j]).max((nu[j] * g[j]).abs());
                }
            }
            let start = if t == 0 { n } else { 0 };
            worst = worst.max(grad.rows(start, grad.len() - start).amax());
        }
        Ok(worst)
    }
}

/// Result of [`linearize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization<T: Scalar> {
    pub problem: LmpcProblem<T>,
    /// Number of cost-Hessian eigenvalues raised to the convexity floor.
    pub clipped_eigenvalues: usize,
}

/// Smallest eigenvalue kept in a linearized cost Hessian.
pub const HESSIAN_FLOOR: f64 = 1e-8;

fn project_psd<T: Scalar>(h: &DMatrix<T>) -> (DMatrix<T>, usize) {
    let sym = (h + h.transpose()) * T::lit(0.5);
    let floor = T::lit(HESSIAN_FLOOR);
    let eig = SymmetricEigen::new(sym.clone());
    let clipped = eig.eigenvalues.iter().filter(|&&v| v < floor).count();
    if clipped == 0 {
        return (sym, 0);
    }
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let v = &eig.eigenvectors;
    (v * DMatrix::from_diagonal(&vals) * v.transpose(), clipped)
}

/// Taylor expansion of the problem around `tau_p`.
///
/// `C_t = ∇²𝒞_t` (symmetrized, eigenvalues floored at [`HESSIAN_FLOOR`]),
/// `c_t = ∇𝒞_t − C_t τ^p_t`, `F_t = ∇f`, `f_t = f − ∇f τ^p_t`, `G_t = ∇g`,
/// `l_t = ∇g τ^p_t − g`, all evaluated at `τ^p_t`.
pub fn linearize<T: Scalar>(problem: &NmpcProblem<T>, tau_p: &[DVector<T>]) -> Result<Linearization<T>, NmpcError> {
    linearize_impl(problem, tau_p, None)
}

/// As [`linearize`], with `Σ λ_i ∇²f_i + Σ ν_j ∇²g_j` added to each cost
/// Hessian and no convexity floor (the reduced Hessian is checked by the solver).
pub fn linearize_with_curvature<T: Scalar>(
    problem: &NmpcProblem<T>,
    tau_p: &[DVector<T>],
    multipliers: &LmpcSolution<T>,
) -> Result<Linearization<T>, NmpcError> {
    linearize_impl(problem, tau_p, Some(multipliers))
}

fn linearize_impl<T: Scalar>(
    problem: &NmpcProblem<T>,
    tau_p: &[DVector<T>],
    multipliers: Option<&LmpcSolution<T>>,
) -> Result<Linearization<T>, NmpcError> {
    let (n, m, nt) = (problem.n(), problem.m(), problem.horizon);
    let nm = n + m;
    if tau_p.len() != nt || tau_p.iter().any(|t| t.len() != nm) {
        return Err(NmpcError::DimensionMismatch(format!("iterate must hold {nt} vectors of length {nm}")));
    }
    let mut stages = Vec::with_capacity(nt);
    let mut clipped_total = 0;
    let mut reference = Some(Vec::with_capacity(nt));
    for (t, tp) in tau_p.iter().enumerate() {
        let (x, u) = problem.split(tp);
        let hess = problem.cost.hessian(t, tp);
        let c_mat = match multipliers {
            None => {
                let (c, clipped) = project_psd(&hess);
                clipped_total += clipped;
                c
            }
            Some(sol) => {
                let mut c = (&hess + hess.transpose()) * T::lit(0.5);
                if t + 1 < nt {
                    c += problem.dynamics.weighted_hessian(&x, &u, &sol.lambda[t]);
                }
                if let Some(con) = &problem.constraint {
                    c += con.weighted_hessian(t, tp, &sol.nu[t]);
                }
                c
            }
        };
        let c_vec = problem.cost.gradient(t, tp) - &c_mat * tp;
        let (fx, fu) = problem.dynamics.jacobians(&x, &u);
        let mut f_mat = DMatrix::zeros(n, nm);
        f_mat.view_mut((0, 0), (n, n)).copy_from(&fx);
        f_mat.view_mut((0, n), (n, m)).copy_from(&fu);
        let f_vec = problem.dynamics.step(&x, &u)? - &f_mat * tp;
        let mut stage = Stage::new(c_mat, c_vec, f_mat, f_vec);
        if let Some(con) = &problem.constraint {
            let g_mat = con.jacobian(t, tp);
            let l_vec = &g_mat * tp - con.eval(t, tp);
            stage = stage.with_inequalities(g_mat, l_vec);
        }
        if !stage.cost_hessian.iter().chain(stage.cost_linear.iter()).chain(stage.offset.iter()).all(|v| v.is_finite())
        {
            return Err(NmpcError::CallbackFailure(format!("non-finite linearization at stage {t}")));
        }
        stages.push(stage);
        match (problem.cost.reference(t), reference.as_mut()) {
            (Some(r), Some(list)) => list.push(r),
            _ => reference = None,
        }
    }
    let lin = LmpcProblem { n, m, stages, x_init: problem.x_init.clone(), reference };
    lin.validate()?;
    Ok(Linearization { problem: lin, clipped_eigenvalues: clipped_total })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqpOptions {
    pub max_iter: usize,
    /// Converged once `‖τ^{p+1} − τ^p‖∞ ≤ tol_step`.
    pub tol_step: f64,
    pub max_halvings: usize,
    pub qp_max_iter: usize,
    /// Re-linearize the converged iterate with constraint curvature for differentiation.
    pub include_curvature: bool,
}

impl Default for SqpOptions {
    fn default() -> Self {
        SqpOptions { max_iter: 50, tol_step: 1e-8, max_halvings: 10, qp_max_iter: 500, include_curvature: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqpState<T: Scalar> {
    pub tau_p: Vec<DVector<T>>,
    /// Number of SQP steps that moved the iterate by more than the tolerance.
    pub iter: usize,
    pub merit: T,
    pub step_norm: T,
    pub converged: bool,
    /// Nonlinear KKT residual of the returned solution (diagnostic).
    pub kkt_residual: T,
    pub halvings: usize,
    pub clipped_eigenvalues: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmpcSolution<T: Scalar> {
    /// Solution of the final linearization.
    pub solution: LmpcSolution<T>,
    /// The final linearization itself.
    pub linearization: LmpcProblem<T>,
    pub state: SqpState<T>,
    /// Whether `linearization` carries the constraint curvature.
    pub curvature_included: bool,
}

impl<T: Scalar> NmpcSolution<T> {
    pub fn first_control(&self) -> DVector<T> {
        self.solution.first_control(self.linearization.n)
    }
}

fn pin_initial_state<T: Scalar>(tau: &mut [DVector<T>], x_init: &DVector<T>) {
    tau[0].rows_mut(0, x_init.len()).copy_from(x_init);
}

fn subproblem<T: Scalar>(
    lin: &LmpcProblem<T>,
    warm: Option<&LmpcSolution<T>>,
    qp_max_iter: usize,
    iter: usize,
) -> Result<LmpcSolution<T>, NmpcError> {
    let opts = LmpcOptions { max_iter: qp_max_iter, warm_start: warm.map(|s| s.active.clone()) };
    lmpc::solve_lmpc_with(lin, &opts).map_err(|e| match e {
        LmpcError::Infeasible { stage } => NmpcError::SubproblemInfeasible { iter, stage },
        other => NmpcError::Lmpc(other),
    })
}

/// Runs SQP from `tau_init` (its first state block is replaced by `x_init`).
///
/// Hitting `max_iter` is not an error: the last iterate is returned with
/// `state.converged == false`.
pub fn solve_nmpc<T: Scalar>(
    problem: &NmpcProblem<T>,
    tau_init: &[DVector<T>],
    opts: &SqpOptions,
) -> Result<NmpcSolution<T>, NmpcError> {
    let tol = T::lit(opts.tol_step);
    let mut tau: Vec<DVector<T>> = tau_init.to_vec();
    if tau.len() != problem.horizon {
        return Err(NmpcError::DimensionMismatch(format!(
            "initial guess has {} stages, horizon is {}",
            tau.len(),
            problem.horizon
        )));
    }
    pin_initial_state(&mut tau, &problem.x_init);
    let mut iter = 0;
    let mut halvings = 0;
    let mut converged = false;
    let mut step_norm = T::max_value().unwrap_or_else(T::one);
    let mut last: Option<(Linearization<T>, LmpcSolution<T>)> = None;
    let mut merit = problem.objective(&tau);
    let mut viol = problem.violation(&tau)?;
    // one extra pass so the final subproblem is solved at the returned iterate
    for pass in 0..=opts.max_iter {
        let lin = linearize(problem, &tau)?;
        let sol = subproblem(&lin.problem, last.as_ref().map(|(_, s)| s), opts.qp_max_iter, pass + 1)?;
        let full: Vec<DVector<T>> = sol.tau.clone();
        let raw_norm = full.iter().zip(&tau).fold(T::zero(), |acc, (a, b)| acc.max((a - b).amax()));
        last = Some((lin, sol));
        if raw_norm <= tol {
            step_norm = raw_norm;
            converged = true;
            break;
        }
        if pass == opts.max_iter {
            step_norm = raw_norm;
            break;
        }
        let mut alpha = T::one();
        let mut candidate = full.clone();
        let mut c_merit = problem.objective(&candidate);
        let mut c_viol = problem.violation(&candidate)?;
        let mut k = 0;
        while c_merit > merit && c_viol > viol && k < opts.max_halvings {
            alpha *= T::lit(0.5);
            candidate = tau.iter().zip(&full).map(|(a, b)| a + (b - a) * alpha).collect();
            c_merit = problem.objective(&candidate);
            c_viol = problem.violation(&candidate)?;
            k += 1;
        }
        halvings += k;
        step_norm = candidate.iter().zip(&tau).fold(T::zero(), |acc, (a, b)| acc.max((a - b).amax()));
        tau = candidate;
        merit = c_merit;
        viol = c_viol;
        iter += 1;
    }
    let (lin, sol) = last.expect("at least one subproblem is solved");
    let clipped = lin.clipped_eigenvalues;
    let mut result = (lin.problem, sol, false);

    if opts.include_curvature {
        let tau_now = result.1.tau.clone();
        let curved = linearize_with_curvature(problem, &tau_now, &result.1)?;
        let trivial = curved.problem.stages.iter().zip(&result.0.stages).all(|(a, b)| a.cost_hessian == b.cost_hessian);
        if !trivial {
            // an indefinite reduced Hessian leaves the cost-only linearization in place
            if let Ok(s) = subproblem(&curved.problem, Some(&result.1), opts.qp_max_iter, iter + 1) {
                result = (curved.problem, s, true);
            }
        }
    }
    let (linearization, solution, curvature_included) = result;
    let kkt_residual = problem.kkt_residual(&solution)?;
    Ok(NmpcSolution {
        state: SqpState {
            tau_p: solution.tau.clone(),
            iter,
            merit: problem.objective(&solution.tau),
            step_norm,
            converged,
            kkt_residual,
            halvings,
            clipped_eigenvalues: clipped,
        },
        solution,
        linearization,
        curvature_included,
    })
}

/// Gradients of the first control on the final linearization.
///
/// Weight targets use the tracking reference reported by the cost.
pub fn nmpc_gradients<T: Scalar>(
    solution: &NmpcSolution<T>,
    targets: &[GradTarget],
) -> Result<Vec<GradResult<T>>, GradError> {
    let solver = GradientSolver::new(&solution.linearization, &solution.solution)?;
    solver.solve_batch(targets).into_iter().collect()
}

/// Previous solution shifted forward by one stage, for warm-starting the next
/// closed-loop step. The appended stage repeats the last control.
pub fn shift_trajectory<T: Scalar>(
    tau: &[DVector<T>],
    dynamics: &dyn Dynamics<T>,
    x_next: &DVector<T>,
) -> Result<Vec<DVector<T>>, NmpcError> {
    let n = dynamics.state_dim();
    let m = dynamics.control_dim();
    let mut out: Vec<DVector<T>> = tau.iter().skip(1).cloned().collect();
    let last = tau.last().ok_or_else(|| NmpcError::DimensionMismatch("empty trajectory".into()))?;
    let (x, u) = (last.rows(0, n).into_owned(), last.rows(n, m).into_owned());
    let mut tail = DVector::zeros(n + m);
    tail.rows_mut(0, n).copy_from(&dynamics.step(&x, &u)?);
    tail.rows_mut(n, m).copy_from(&u);
    out.push(tail);
    pin_initial_state(&mut out, x_next);
    Ok(out)
}
