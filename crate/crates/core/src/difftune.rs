//! Closed-loop tuning of MPC cost weights.
//!
//! A rollout applies the first optimal control of an MPC controller to a plant
//! for `N` steps. Along the way the sensitivities of states and controls with
//! respect to the cost weights are propagated forward:
//!
//! ```text
//! ∂u_k/∂θ     = ∂h/∂x · ∂x_k/∂θ + ∂h/∂θ
//! ∂x_{k+1}/∂θ = ∂f/∂x · ∂x_k/∂θ + ∂f/∂u · ∂u_k/∂θ,    ∂x_0/∂θ = 0
//! ```
//!
//! where `h` is the MPC control law, differentiated through its optimality
//! conditions. The loss gradient follows by the chain rule and the weights are
//! updated by projected gradient descent.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grad::{GradError, GradTarget, GradientSolver};
use crate::lmpc::{self, LmpcError, LmpcOptions, LmpcProblem, LmpcSolution};
use crate::nmpc::{self, LinearConstraint, NmpcError, NmpcProblem, QuadraticCost, SqpOptions, StageConstraint};
use crate::qp::{KktFactorization, QpResult, QpStats, QpStatus};
use crate::scalar::Scalar;
use crate::systems::{Dynamics, SystemError};

/// Default parameter box.
pub const DEFAULT_BOUNDS: (f64, f64) = (0.01, 1000.0);

/// Diagonal cost weights `θ = (diag Q, diag R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadCostParams<T: Scalar> {
    pub q_diag: DVector<T>,
    pub r_diag: DVector<T>,
    pub bounds: (T, T),
}

impl<T: Scalar> QuadCostParams<T> {
    /// Builds the parameters, clamped into `bounds`.
    pub fn new(q_diag: DVector<T>, r_diag: DVector<T>, bounds: (T, T)) -> Self {
        let mut p = QuadCostParams { q_diag, r_diag, bounds };
        p.project();
        p
    }

    pub fn identity(n: usize, m: usize) -> Self {
        let (lo, hi) = DEFAULT_BOUNDS;
        Self::new(DVector::from_element(n, T::one()), DVector::from_element(m, T::one()), (T::lit(lo), T::lit(hi)))
    }

    /// Number of learnable scalars `M = n + m`.
    pub fn dim(&self) -> usize {
        self.q_diag.len() + self.r_diag.len()
    }

    pub fn theta(&self) -> DVector<T> {
        let n = self.q_diag.len();
        let mut th = DVector::zeros(self.dim());
        th.rows_mut(0, n).copy_from(&self.q_diag);
        th.rows_mut(n, self.r_diag.len()).copy_from(&self.r_diag);
        th
    }

    pub fn with_theta(&self, theta: &DVector<T>) -> Self {
        let n = self.q_diag.len();
        Self::new(theta.rows(0, n).into_owned(), theta.rows(n, self.r_diag.len()).into_owned(), self.bounds)
    }

    fn project(&mut self) {
        let (lo, hi) = self.bounds;
        let clamp = |v: &mut T| *v = v.max(lo).min(hi);
        self.q_diag.iter_mut().for_each(clamp);
        self.r_diag.iter_mut().for_each(clamp);
    }

    pub fn q(&self) -> DMatrix<T> {
        DMatrix::from_diagonal(&self.q_diag)
    }

    pub fn r(&self) -> DMatrix<T> {
        DMatrix::from_diagonal(&self.r_diag)
    }

    /// Gradient targets matching the order of [`QuadCostParams::theta`].
    pub fn targets(&self) -> Vec<GradTarget> {
        (0..self.q_diag.len())
            .map(GradTarget::shared_state_diag)
            .chain((0..self.r_diag.len()).map(GradTarget::shared_control_diag))
            .collect()
    }
}

/// `θ ← clamp(θ − α·grad, lo, hi)`.
pub fn update_params<T: Scalar>(params: &QuadCostParams<T>, grad: &DVector<T>, alpha: T) -> QuadCostParams<T> {
    params.with_theta(&(params.theta() - grad * alpha))
}

#[derive(Debug, Clone, PartialEq)]
pub enum DiffTuneError {
    DimensionMismatch(String),
    /// The controller could not produce a control at closed-loop step `step`.
    ControllerFailure { step: usize, reason: String },
    Plant { step: usize, error: SystemError },
    InvalidConfig(String),
}

impl fmt::Display for DiffTuneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiffTuneError::DimensionMismatch(what) => write!(f, "dimension mismatch: {what}"),
            DiffTuneError::ControllerFailure { step, reason } => write!(f, "controller failed at step {step}: {reason}"),
            DiffTuneError::Plant { step, error } => write!(f, "plant failed at step {step}: {error}"),
            DiffTuneError::InvalidConfig(why) => write!(f, "invalid configuration: {why}"),
        }
    }
}

impl std::error::Error for DiffTuneError {}

/// Outcome flags of one controller evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepStatus {
    /// The SQP loop stopped at its iteration limit.
    pub not_converged: bool,
    /// Gradients could not be computed; the previous step's Jacobians were reused.
    pub reused_jacobians: bool,
    /// Some active constraint had a vanishing multiplier.
    pub weakly_active: bool,
    /// At least one inequality row of the first stage was active.
    pub saturated: bool,
}

/// Control and its derivatives at one closed-loop step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlStep<T: Scalar> {
    pub u: DVector<T>,
    /// `∂u/∂x`, m×n.
    pub du_dx: DMatrix<T>,
    /// `∂u/∂θ`, m×M.
    pub du_dtheta: DMatrix<T>,
    pub status: StepStatus,
}

/// Open-loop plan from one MPC solve and its full trajectory derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan<T: Scalar> {
    pub tau: Vec<DVector<T>>,
    /// `∂τ_t/∂θ` for every stage, (n+m)×M.
    pub dtau_dtheta: Vec<DMatrix<T>>,
}

/// An MPC control law with derivatives.
pub trait MpcController<T: Scalar> {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn horizon(&self) -> usize;

    /// Solves the MPC problem at closed-loop step `k` from state `x`.
    fn control(&mut self, k: usize, x: &DVector<T>, params: &QuadCostParams<T>) -> Result<ControlStep<T>, String>;

    /// Solves once from `x` at step `k` and differentiates the whole plan.
    fn plan(&mut self, k: usize, x: &DVector<T>, params: &QuadCostParams<T>) -> Result<Plan<T>, String>;

    /// Forgets warm-start state so every rollout starts identically.
    fn reset(&mut self) {}
}

/// Reference `τ̄_k = [x̄_k; ū_k]` sampled at every closed-loop step; indices
/// past the end repeat the last sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSamples<T: Scalar> {
    pub samples: Arc<Vec<DVector<T>>>,
}

impl<T: Scalar> ReferenceSamples<T> {
    pub fn new(samples: Vec<DVector<T>>) -> Self {
        assert!(!samples.is_empty(), "reference needs at least one sample");
        ReferenceSamples { samples: Arc::new(samples) }
    }

    pub fn get(&self, k: usize) -> &DVector<T> {
        &self.samples[k.min(self.samples.len() - 1)]
    }

    pub fn window(&self, k: usize, len: usize) -> Vec<DVector<T>> {
        (k..k + len).map(|i| self.get(i).clone()).collect()
    }
}

fn stack_targets<T: Scalar>(
    solver: &GradientSolver<T>,
    targets: &[GradTarget],
) -> Result<(DMatrix<T>, DMatrix<T>, Vec<DMatrix<T>>, bool), GradError> {
    let du_dx = solver.control_state_jacobian()?;
    let results: Vec<_> = solver.solve_batch(targets).into_iter().collect::<Result<_, _>>()?;
    let m = du_dx.nrows();
    let mut du_dtheta = DMatrix::zeros(m, targets.len());
    let horizon = results.first().map_or(0, |r| r.dtau.len());
    let nm = results.first().map_or(0, |r| r.dtau[0].len());
    let mut dtau = vec![DMatrix::zeros(nm, targets.len()); horizon];
    let mut weak = false;
    for (j, r) in results.iter().enumerate() {
        du_dtheta.set_column(j, &r.du1);
        for (t, d) in r.dtau.iter().enumerate() {
            dtau[t].set_column(j, d);
        }
        weak |= r.weakly_active;
    }
    Ok((du_dx, du_dtheta, dtau, weak))
}

/// Linear MPC with diagonal tracking weights and optional stage inequalities.
///
/// When a solve activates no inequality row, its KKT matrix depends only on
/// the weights and the dynamics. That factorization is cached per weight
/// vector and reused for both the solve and its gradients.
#[derive(Debug)]
pub struct LinearMpc<T: Scalar> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub ineq: DMatrix<T>,
    pub ineq_rhs: DVector<T>,
    pub horizon: usize,
    pub reference: ReferenceSamples<T>,
    pub qp_max_iter: usize,
    cache: Option<(DVector<T>, Arc<KktFactorization<T>>)>,
}

impl<T: Scalar> LinearMpc<T> {
    pub fn new(
        a: DMatrix<T>,
        b: DMatrix<T>,
        ineq: DMatrix<T>,
        ineq_rhs: DVector<T>,
        horizon: usize,
        reference: ReferenceSamples<T>,
    ) -> Self {
        LinearMpc { a, b, ineq, ineq_rhs, horizon, reference, qp_max_iter: 500, cache: None }
    }

    pub fn problem(&self, k: usize, x: &DVector<T>, params: &QuadCostParams<T>) -> Result<LmpcProblem<T>, LmpcError> {
        LmpcProblem::tracking(
            &self.a,
            &self.b,
            &params.q(),
            &params.r(),
            self.reference.window(k, self.horizon),
            &self.ineq,
            &self.ineq_rhs,
            x.clone(),
        )
    }

    fn unconstrained_kkt(&mut self, problem: &LmpcProblem<T>, theta: &DVector<T>) -> Result<Arc<KktFactorization<T>>, String> {
        if let Some((key, kkt)) = &self.cache {
            if key == theta {
                return Ok(Arc::clone(kkt));
            }
        }
        let mut bare = problem.clone();
        for s in &mut bare.stages {
            s.ineq = DMatrix::zeros(0, s.ineq.ncols());
            s.ineq_rhs = DVector::zeros(0);
        }
        let flat = lmpc::flatten(&bare).map_err(|e| e.to_string())?;
        let kkt = Arc::new(KktFactorization::new(&flat.eq.h, &flat.eq.a).map_err(|e| e.to_string())?);
        self.cache = Some((theta.clone(), Arc::clone(&kkt)));
        Ok(kkt)
    }

    /// Solves the MPC problem, preferring the cached unconstrained factorization.
    fn solve(&mut self, problem: &LmpcProblem<T>, theta: &DVector<T>) -> Result<(LmpcSolution<T>, GradientSolver<T>), String> {
        let kkt = self.unconstrained_kkt(problem, theta)?;
        let (flat, layout) = lmpc::flatten_with_layout(problem).map_err(|e| e.to_string())?;
        let (z, lambda) = kkt.solve(&flat.eq.g, &flat.eq.b).map_err(|e| e.to_string())?;
        let margin = lmpc::default_tol_act::<T>();
        let slack = &flat.l - &flat.g_ineq * &z;
        if slack.iter().all(|&s| s > margin) {
            let q = flat.g_ineq.nrows();
            let result = QpResult {
                z,
                lambda,
                nu: DVector::zeros(q),
                active_rows: Vec::new(),
                status: QpStatus::Optimal,
                stats: QpStats::default(),
                blocking_row: None,
            };
            let solution = lmpc::solution_from_qp(problem, &layout, &result);
            let grad = GradientSolver::with_factorization(problem, &solution, kkt).map_err(|e| e.to_string())?;
            return Ok((solution, grad));
        }
        let opts = LmpcOptions { max_iter: self.qp_max_iter, warm_start: None };
        let solution = lmpc::solve_lmpc_with(problem, &opts).map_err(|e| e.to_string())?;
        let active = lmpc::extract_active_sets(&solution, problem, margin);
        let grad = if active.iter().all(Vec::is_empty) {
            GradientSolver::with_factorization(problem, &solution, kkt)
        } else {
            GradientSolver::new(problem, &solution)
        }
        .map_err(|e| e.to_string())?;
        Ok((solution, grad))
    }
}

impl<T: Scalar> MpcController<T> for LinearMpc<T> {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn control(&mut self, k: usize, x: &DVector<T>, params: &QuadCostParams<T>) -> Result<ControlStep<T>, String> {
        let problem = self.problem(k, x, params).map_err(|e| e.to_string())?;
        let theta = params.theta();
        let (solution, grad) = self.solve(&problem, &theta)?;
        let n = self.state_dim();
        let u = solution.first_control(n);
        let saturated = !lmpc::extract_active_sets(&solution, &problem, lmpc::default_tol_act::<T>())[0].is_empty();
        match stack_targets(&grad, &params.targets()) {
            Ok((du_dx, du_dtheta, _, weak)) => Ok(ControlStep {
                u,
                du_dx,
                du_dtheta,
                status: StepStatus { weakly_active: weak, saturated, ..StepStatus::default() },
            }),
            Err(_) => Ok(ControlStep {
                u,
                du_dx: DMatrix::zeros(0, 0),
                du_dtheta: DMatrix::zeros(0, 0),
                status: StepStatus { reused_jacobians: true, saturated, ..StepStatus::default() },
            }),
        }
    }

    fn plan(&mut self, k: usize, x: &DVector<T>, params: &QuadCostParams<T>) -> Result<Plan<T>, String> {
        let problem = self.problem(k, x, params).map_err(|e| e.to_string())?;
        let (solution, grad) = self.solve(&problem, &params.theta())?;
        let (_, _, dtau, _) = stack_targets(&grad, &params.targets()).map_err(|e| e.to_string())?;
        Ok(Plan { tau: solution.tau, dtau_dtheta: dtau })
    }
}

/// Nonlinear MPC solved by SQP, warm-started from the shifted previous solution.
pub struct NonlinearMpc<T: Scalar> {
    pub model: Arc<dyn Dynamics<T>>,
    pub constraint: Option<LinearConstraint<T>>,
    pub horizon: usize,
    pub reference: ReferenceSamples<T>,
    pub sqp: SqpOptions,
    previous: Option<Vec<DVector<T>>>,
}

impl<T: Scalar> fmt::Debug for NonlinearMpc<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearMpc").field("horizon", &self.horizon).field("sqp", &self.sqp).finish_non_exhaustive()
    }
}

impl<T: Scalar> NonlinearMpc<T> {
    /// Builds the controller, spot-checking the model derivatives once.
    pub fn new(
        model: Arc<dyn Dynamics<T>>,
        constraint: Option<LinearConstraint<T>>,
        horizon: usize,
        reference: ReferenceSamples<T>,
    ) -> Result<Self, NmpcError> {
        let ctrl = NonlinearMpc { model, constraint, horizon, reference, sqp: SqpOptions::default(), previous: None };
        let x0 = ctrl.reference.get(0).rows(0, ctrl.model.state_dim()).into_owned();
        let n = ctrl.model.state_dim();
        let m = ctrl.model.control_dim();
        let params = QuadCostParams::identity(n, m);
        ctrl.problem(0, &x0, &params, true)?;
        Ok(ctrl)
    }

    fn problem(&self, k: usize, x: &DVector<T>, params: &QuadCostParams<T>, checked: bool) -> Result<NmpcProblem<T>, NmpcError> {
        let cost = Arc::new(QuadraticCost::new(params.q(), params.r(), self.reference.window(k, self.horizon)));
        let con = self.constraint.clone().map(|c| Arc::new(c) as Arc<dyn StageConstraint<T>>);
        if checked {
            NmpcProblem::new(self.horizon, Arc::clone(&self.model), cost, con, x.clone())
        } else {
            NmpcProblem::new_unchecked(self.horizon, Arc::clone(&self.model), cost, con, x.clone())
        }
    }

    fn solve(&mut self, k: usize, x: &DVector<T>, params: &QuadCostParams<T>) -> Result<(nmpc::NmpcSolution<T>, bool), String> {
        let problem = self.problem(k, x, params, false).map_err(|e| e.to_string())?;
        let guess = match &self.previous {
            Some(prev) if prev.len() == self.horizon => nmpc::shift_trajectory(prev, self.model.as_ref(), x),
            _ => problem.cold_start(),
        }
        .map_err(|e| e.to_string())?;
        let sol = nmpc::solve_nmpc(&problem, &guess, &self.sqp).map_err(|e| e.to_string())?;
        self.previous = Some(sol.solution.tau.clone());
        let converged = sol.state.converged;
        Ok((sol, converged))
    }
}

impl<T: Scalar> MpcController<T> for NonlinearMpc<T> {
    fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    fn control_dim(&self) -> usize {
        self.model.control_dim()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn control(&mut self, k: usize, x: &DVector<T>, params: &QuadCostParams<T>) -> Result<ControlStep<T>, String> {
        let (sol, converged) = self.solve(k, x, params)?;
        let u = sol.first_control();
        let saturated = !lmpc::extract_active_sets(&sol.solution, &sol.linearization, lmpc::default_tol_act::<T>())[0]
            .is_empty();
        let status = StepStatus { not_converged: !converged, saturated, ..StepStatus::default() };
        let grads = GradientSolver::new(&sol.linearization, &sol.solution)
            .and_then(|g| stack_targets(&g, &params.targets()));
        match grads {
            Ok((du_dx, du_dtheta, _, weak)) => {
                Ok(ControlStep { u, du_dx, du_dtheta, status: StepStatus { weakly_active: weak, ..status } })
            }
            Err(_) => Ok(ControlStep {
                u,
                du_dx: DMatrix::zeros(0, 0),
                du_dtheta: DMatrix::zeros(0, 0),
                status: StepStatus { reused_jacobians: true, ..status },
            }),
        }
    }

    fn plan(&mut self, k: usize, x: &DVector<T>, params: &QuadCostParams<T>) -> Result<Plan<T>, String> {
        let (sol, _) = self.solve(k, x, params)?;
        let grad = GradientSolver::new(&sol.linearization, &sol.solution).map_err(|e| e.to_string())?;
        let (_, _, dtau, _) = stack_targets(&grad, &params.targets()).map_err(|e| e.to_string())?;
        Ok(Plan { tau: sol.solution.tau, dtau_dtheta: dtau })
    }

    fn reset(&mut self) {
        self.previous = None;
    }
}

/// How the tracking error is aggregated into the scalar loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `Σ_k ‖p_k − p̄_k‖²`.
    SumSquared,
    /// `sqrt(Σ_k ‖p_k − p̄_k‖² / N)`.
    Rmse,
}

/// Tracking loss on selected state components plus an optional control penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingLoss<T: Scalar> {
    /// State indices counted as position.
    pub positions: Vec<usize>,
    /// Weight of `Σ_k ‖u_k‖²`.
    pub control_penalty: T,
    pub kind: LossKind,
}

impl<T: Scalar> TrackingLoss<T> {
    pub fn positions(positions: Vec<usize>, kind: LossKind) -> Self {
        TrackingLoss { positions, control_penalty: T::zero(), kind }
    }

    fn squared_error(&self, x: &DVector<T>, xr: &DVector<T>) -> T {
        self.positions.iter().fold(T::zero(), |acc, &i| acc + (x[i] - xr[i]) * (x[i] - xr[i]))
    }

    /// Loss of states `x_1..x_N` against references and controls `u_0..u_{N-1}`.
    pub fn value(&self, states: &[DVector<T>], refs: &[DVector<T>], controls: &[DVector<T>]) -> T {
        let sse = states.iter().zip(refs).fold(T::zero(), |acc, (x, r)| acc + self.squared_error(x, r));
        let effort = controls.iter().fold(T::zero(), |acc, u| acc + u.norm_squared());
        let track = match self.kind {
            LossKind::SumSquared => sse,
            LossKind::Rmse => (sse / T::from_usize(states.len().max(1)).unwrap_or_else(T::one)).sqrt(),
        };
        track + self.control_penalty * effort
    }

    /// `∂L/∂x_k` for each `k`, with `∂L/∂u_k` for the control penalty.
    pub fn gradients(
        &self,
        states: &[DVector<T>],
        refs: &[DVector<T>],
        controls: &[DVector<T>],
    ) -> (Vec<DVector<T>>, Vec<DVector<T>>) {
        let two = T::lit(2.0);
        let count = T::from_usize(states.len().max(1)).unwrap_or_else(T::one);
        let scale = match self.kind {
            LossKind::SumSquared => T::one(),
            LossKind::Rmse => {
                let sse = states.iter().zip(refs).fold(T::zero(), |acc, (x, r)| acc + self.squared_error(x, r));
                let rmse = (sse / count).sqrt();
                if rmse > T::zero() {
                    T::one() / (two * count * rmse)
                } else {
                    T::zero()
                }
            }
        };
        let dx = states
            .iter()
            .zip(refs)
            .map(|(x, r)| {
                let mut g = DVector::zeros(x.len());
                for &i in &self.positions {
                    g[i] = two * (x[i] - r[i]) * scale;
                }
                g
            })
            .collect();
        let du = controls.iter().map(|u| u * (two * self.control_penalty)).collect();
        (dx, du)
    }
}

/// Root-mean-square position error over a trajectory.
pub fn position_rmse<T: Scalar>(positions: &[usize], states: &[DVector<T>], refs: &[DVector<T>]) -> T {
    TrackingLoss::<T>::positions(positions.to_vec(), LossKind::Rmse).value(states, refs, &[])
}

/// Sensitivities at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityState<T: Scalar> {
    /// `∂x_k/∂θ`, n×M.
    pub dx_dtheta: DMatrix<T>,
    /// `∂u_k/∂θ`, m×M.
    pub du_dtheta: DMatrix<T>,
}

impl<T: Scalar> SensitivityState<T> {
    pub fn zero(n: usize, m: usize, params: usize) -> Self {
        SensitivityState { dx_dtheta: DMatrix::zeros(n, params), du_dtheta: DMatrix::zeros(m, params) }
    }
}

/// One step of the forward recursion.
///
/// Takes `∂x_k/∂θ` from `state` and returns `∂u_k/∂θ` together with `∂x_{k+1}/∂θ`.
pub fn propagate_sensitivity<T: Scalar>(
    state: &SensitivityState<T>,
    fx: &DMatrix<T>,
    fu: &DMatrix<T>,
    hx: &DMatrix<T>,
    htheta: &DMatrix<T>,
) -> Result<SensitivityState<T>, DiffTuneError> {
    let (n, mm) = state.dx_dtheta.shape();
    let m = fu.ncols();
    if fx.shape() != (n, n) || fu.nrows() != n || hx.shape() != (m, n) || htheta.shape() != (m, mm) {
        return Err(DiffTuneError::DimensionMismatch("sensitivity Jacobians".into()));
    }
    let du = hx * &state.dx_dtheta + htheta;
    let dx_next = fx * &state.dx_dtheta + fu * &du;
    Ok(SensitivityState { dx_dtheta: dx_next, du_dtheta: du })
}

/// Optional additive Gaussian noise on the measured state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateNoise {
    pub std_dev: f64,
    pub seed: u64,
}

/// Closed-loop experiment description.
#[derive(Clone)]
pub struct Experiment<T: Scalar> {
    pub plant: Arc<dyn Dynamics<T>>,
    pub x0: DVector<T>,
    /// State references `x̄_0..x̄_N`; only `x̄_1..x̄_N` enter the loss.
    pub references: Vec<DVector<T>>,
    pub steps: usize,
    pub loss: TrackingLoss<T>,
    pub noise: Option<StateNoise>,
}

impl<T: Scalar> fmt::Debug for Experiment<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Experiment").field("x0", &self.x0).field("steps", &self.steps).field("loss", &self.loss).finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopLog<T: Scalar> {
    /// `x_0..x_N`.
    pub states: Vec<DVector<T>>,
    /// `u_0..u_{N-1}`.
    pub controls: Vec<DVector<T>>,
    /// `x̄_1..x̄_N`.
    pub references: Vec<DVector<T>>,
    pub status: Vec<StepStatus>,
    pub loss: T,
    pub rmse: T,
    /// `∂x_k/∂θ` for `k = 0..N` (empty when sensitivities were not requested).
    pub dx_dtheta: Vec<DMatrix<T>>,
    /// `∂u_k/∂θ` for `k = 0..N-1`.
    pub du_dtheta: Vec<DMatrix<T>>,
}

impl<T: Scalar> ClosedLoopLog<T> {
    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    pub fn reused_jacobians(&self) -> usize {
        self.status.iter().filter(|s| s.reused_jacobians).count()
    }

    pub fn without_sensitivities(mut self) -> Self {
        self.dx_dtheta.clear();
        self.du_dtheta.clear();
        self
    }
}

/// Runs the closed loop for `experiment.steps` steps.
///
/// With `sensitivities` set, derivatives are propagated along the way.
pub fn rollout<T: Scalar>(
    experiment: &Experiment<T>,
    controller: &mut dyn MpcController<T>,
    params: &QuadCostParams<T>,
    sensitivities: bool,
) -> Result<ClosedLoopLog<T>, DiffTuneError> {
    let plant = experiment.plant.as_ref();
    let (n, m) = (plant.state_dim(), plant.control_dim());
    if controller.state_dim() != n || controller.control_dim() != m || experiment.x0.len() != n {
        return Err(DiffTuneError::DimensionMismatch("plant, controller and initial state disagree".into()));
    }
    if experiment.references.len() <= experiment.steps {
        return Err(DiffTuneError::DimensionMismatch(format!(
            "{} steps need {} reference samples, got {}",
            experiment.steps,
            experiment.steps + 1,
            experiment.references.len()
        )));
    }
    controller.reset();
    let mut noise = match experiment.noise {
        Some(noise) => {
            let normal = Normal::new(0.0, noise.std_dev)
                .map_err(|e| DiffTuneError::InvalidConfig(format!("noise standard deviation: {e}")))?;
            Some((ChaCha8Rng::seed_from_u64(noise.seed), normal))
        }
        None => None,
    };
    let big_m = params.dim();
    let mut x = experiment.x0.clone();
    let mut states = vec![x.clone()];
    let mut controls = Vec::with_capacity(experiment.steps);
    let mut status = Vec::with_capacity(experiment.steps);
    let mut sens = SensitivityState::zero(n, m, big_m);
    let mut dx_log = Vec::new();
    let mut du_log = Vec::new();
    let mut last_jac: Option<(DMatrix<T>, DMatrix<T>)> = None;
    for k in 0..experiment.steps {
        let step = controller
            .control(k, &x, params)
            .map_err(|reason| DiffTuneError::ControllerFailure { step: k, reason })?;
        let mut st = step.status;
        let (hx, ht) = if st.reused_jacobians {
            last_jac.clone().unwrap_or_else(|| (DMatrix::zeros(m, n), DMatrix::zeros(m, big_m)))
        } else {
            (step.du_dx, step.du_dtheta)
        };
        if sensitivities && !st.reused_jacobians {
            last_jac = Some((hx.clone(), ht.clone()));
        }
        if sensitivities {
            let (fx, fu) = plant.jacobians(&x, &step.u);
            dx_log.push(sens.dx_dtheta.clone());
            sens = propagate_sensitivity(&sens, &fx, &fu, &hx, &ht)?;
            du_log.push(sens.du_dtheta.clone());
        }
        let mut next = plant.step(&x, &step.u).map_err(|error| DiffTuneError::Plant { step: k, error })?;
        if let Some((rng, normal)) = noise.as_mut() {
            for v in next.iter_mut() {
                *v += T::lit(normal.sample(rng));
            }
        }
        st.reused_jacobians |= step.status.reused_jacobians;
        controls.push(step.u);
        status.push(st);
        x = next;
        states.push(x.clone());
    }
    if sensitivities {
        dx_log.push(sens.dx_dtheta);
    }
    let references: Vec<_> = experiment.references[1..=experiment.steps].to_vec();
    let loss = experiment.loss.value(&states[1..], &references, &controls);
    let rmse = position_rmse(&experiment.loss.positions, &states[1..], &references);
    Ok(ClosedLoopLog { states, controls, references, status, loss, rmse, dx_dtheta: dx_log, du_dtheta: du_log })
}

/// `∇_θL = Σ_k ∂L/∂x_k ∂x_k/∂θ + Σ_k ∂L/∂u_k ∂u_k/∂θ` over a logged rollout.
pub fn loss_gradient<T: Scalar>(log: &ClosedLoopLog<T>, loss: &TrackingLoss<T>) -> Result<DVector<T>, DiffTuneError> {
    let steps = log.steps();
    if log.dx_dtheta.len() != steps + 1 || log.du_dtheta.len() != steps {
        return Err(DiffTuneError::DimensionMismatch("rollout was logged without sensitivities".into()));
    }
    let big_m = log.dx_dtheta[0].ncols();
    let (dl_dx, dl_du) = loss.gradients(&log.states[1..], &log.references, &log.controls);
    let mut grad = DVector::zeros(big_m);
    for k in 0..steps {
        grad += log.dx_dtheta[k + 1].transpose() * &dl_dx[k];
        grad += log.du_dtheta[k].transpose() * &dl_du[k];
    }
    Ok(grad)
}

/// Central finite difference of the closed-loop loss with respect to `θ`.
pub fn fd_loss_gradient<T: Scalar>(
    experiment: &Experiment<T>,
    controller: &mut dyn MpcController<T>,
    params: &QuadCostParams<T>,
    h: T,
) -> Result<DVector<T>, DiffTuneError> {
    let theta = params.theta();
    let mut grad = DVector::zeros(theta.len());
    for j in 0..theta.len() {
        let mut tp = theta.clone();
        tp[j] += h;
        let mut tm = theta.clone();
        tm[j] -= h;
        // perturb without projection so the difference is symmetric
        let perturbed = |th: DVector<T>| QuadCostParams {
            q_diag: th.rows(0, params.q_diag.len()).into_owned(),
            r_diag: th.rows(params.q_diag.len(), params.r_diag.len()).into_owned(),
            bounds: params.bounds,
        };
        let lp = rollout(experiment, controller, &perturbed(tp), false)?.loss;
        let lm = rollout(experiment, controller, &perturbed(tm), false)?.loss;
        grad[j] = (lp - lm) / (h + h);
    }
    Ok(grad)
}

/// One row of a tuning history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord<T: Scalar> {
    /// 1-based trial number.
    pub trial: usize,
    pub rmse: T,
    pub loss: T,
    /// Parameters the trial was run with.
    pub params: QuadCostParams<T>,
    pub gradient: DVector<T>,
    pub reused_jacobians: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult<T: Scalar> {
    pub history: Vec<TrialRecord<T>>,
    /// Closed-loop logs of every trial (sensitivities stripped).
    pub logs: Vec<ClosedLoopLog<T>>,
    /// Parameters of the last trial.
    pub params: QuadCostParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneError<T: Scalar> {
    pub error: DiffTuneError,
    /// Trials completed before the failure.
    pub partial: TuneResult<T>,
}

impl<T: Scalar> fmt::Display for TuneError<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} completed trials)", self.error, self.partial.history.len())
    }
}

impl<T: Scalar> std::error::Error for TuneError<T> {}

/// Closed-loop tuning: rollout, gradient, projected update, repeated `trials` times.
///
/// The parameters are updated between trials only, so trial `k` runs with
/// the parameters after `k − 1` updates.
pub fn tune<T: Scalar>(
    experiment: &Experiment<T>,
    controller: &mut dyn MpcController<T>,
    params0: &QuadCostParams<T>,
    trials: usize,
    alpha: T,
) -> Result<TuneResult<T>, TuneError<T>> {
    tune_with_progress(experiment, controller, params0, trials, alpha, |_| {})
}

pub fn tune_with_progress<T: Scalar>(
    experiment: &Experiment<T>,
    controller: &mut dyn MpcController<T>,
    params0: &QuadCostParams<T>,
    trials: usize,
    alpha: T,
    mut progress: impl FnMut(&TrialRecord<T>),
) -> Result<TuneResult<T>, TuneError<T>> {
    let mut result = TuneResult { history: Vec::new(), logs: Vec::new(), params: params0.clone() };
    if trials == 0 {
        return Err(TuneError { error: DiffTuneError::InvalidConfig("trials must be at least 1".into()), partial: result });
    }
    let mut params = params0.clone();
    for trial in 1..=trials {
        let outcome = rollout(experiment, controller, &params, true)
            .and_then(|log| loss_gradient(&log, &experiment.loss).map(|g| (log, g)));
        let (log, grad) = match outcome {
            Ok(v) => v,
            Err(error) => return Err(TuneError { error, partial: result }),
        };
        let record = TrialRecord {
            trial,
            rmse: log.rmse,
            loss: log.loss,
            params: params.clone(),
            gradient: grad.clone(),
            reused_jacobians: log.reused_jacobians(),
        };
        progress(&record);
        result.history.push(record);
        result.logs.push(log.without_sensitivities());
        result.params = params.clone();
        if trial < trials {
            params = update_params(&params, &grad, alpha);
        }
    }
    Ok(result)
}

/// Loss over one MPC plan: `loss_horizon` predicted states from stage 0 on.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopSetup<T: Scalar> {
    pub x0: DVector<T>,
    /// References for the predicted states `x_0..x_{L-1}`.
    pub references: Vec<DVector<T>>,
    pub loss_horizon: usize,
    pub loss: TrackingLoss<T>,
}

/// Open-loop loss and its gradient from a single MPC solve.
pub fn open_loop_loss<T: Scalar>(
    setup: &OpenLoopSetup<T>,
    controller: &mut dyn MpcController<T>,
    params: &QuadCostParams<T>,
) -> Result<(T, DVector<T>), DiffTuneError> {
    let n = controller.state_dim();
    let len = setup.loss_horizon;
    if len > controller.horizon() {
        return Err(DiffTuneError::InvalidConfig(format!(
            "open-loop loss horizon {len} exceeds the MPC horizon {}; a single plan only predicts that far",
            controller.horizon()
        )));
    }
    if setup.references.len() < len {
        return Err(DiffTuneError::DimensionMismatch("open-loop references shorter than the loss horizon".into()));
    }
    controller.reset();
    let plan = controller
        .plan(0, &setup.x0, params)
        .map_err(|reason| DiffTuneError::ControllerFailure { step: 0, reason })?;
    let states: Vec<_> = plan.tau[..len].iter().map(|t| t.rows(0, n).into_owned()).collect();
    let controls: Vec<_> = plan.tau[..len].iter().map(|t| t.rows(n, t.len() - n).into_owned()).collect();
    let refs = &setup.references[..len];
    let value = setup.loss.value(&states, refs, &controls);
    let (dl_dx, dl_du) = setup.loss.gradients(&states, refs, &controls);
    let mut grad = DVector::zeros(params.dim());
    for t in 0..len {
        let d = &plan.dtau_dtheta[t];
        grad += d.rows(0, n).transpose() * &dl_dx[t];
        grad += d.rows(n, d.nrows() - n).transpose() * &dl_du[t];
    }
    Ok((value, grad))
}

/// Open-loop learning baseline: one plan per trial, gradient over the plan.
pub fn open_loop_tune<T: Scalar>(
    setup: &OpenLoopSetup<T>,
    controller: &mut dyn MpcController<T>,
    params0: &QuadCostParams<T>,
    trials: usize,
    alpha: T,
) -> Result<Vec<(T, QuadCostParams<T>)>, DiffTuneError> {
    if trials == 0 {
        return Err(DiffTuneError::InvalidConfig("trials must be at least 1".into()));
    }
    let mut params = params0.clone();
    let mut history = Vec::with_capacity(trials);
    for trial in 1..=trials {
        let (loss, grad) = open_loop_loss(setup, controller, &params)?;
        history.push((loss, params.clone()));
        if trial < trials {
            params = update_params(&params, &grad, alpha);
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{box_constraints, LinearSystem, ReferenceKind};
    use approx::assert_relative_eq;

    fn di_experiment(u_bd: Option<f64>, steps: usize, horizon: usize) -> (Experiment<f64>, LinearMpc<f64>) {
        let sys = LinearSystem::double_integrator(0.01).with_bound(u_bd);
        let (a, b) = sys.discrete();
        let (g, l) = match u_bd {
            Some(bd) => box_constraints(2, 1, bd),
            None => (DMatrix::zeros(0, 3), DVector::zeros(0)),
        };
        let samples: Vec<_> = (0..steps + horizon + 1)
            .map(|k| {
                let x = ReferenceKind::DiSine.sample(k, 0.01);
                DVector::from_vec(vec![x[0], x[1], 0.0])
            })
            .collect();
        let references = samples.iter().take(steps + 1).map(|t| t.rows(0, 2).into_owned()).collect();
        let ctrl = LinearMpc::new(a, b, g, l, horizon, ReferenceSamples::new(samples));
        let exp = Experiment {
            plant: Arc::new(sys),
            x0: DVector::zeros(2),
            references,
            steps,
            loss: TrackingLoss::positions(vec![0], LossKind::SumSquared),
            noise: None,
        };
        (exp, ctrl)
    }

    #[test]
    fn projection_examples() {
        let p = QuadCostParams::new(DVector::from_vec(vec![1.0, 0.02, 999.0]), DVector::zeros(0), (0.01, 1000.0));
        let next = update_params(&p, &DVector::from_vec(vec![0.0, 10.0, -500.0]), 0.01);
        assert_eq!(next.q_diag, DVector::from_vec(vec![1.0, 0.01, 1000.0]));
        let same = update_params(&update_params(&next, &DVector::zeros(3), 0.01), &DVector::zeros(3), 0.01);
        assert_eq!(same, next);
    }

    #[test]
    fn first_step_sensitivity_is_the_parameter_jacobian() {
        let state = SensitivityState::zero(2, 1, 3);
        let fx = DMatrix::identity(2, 2);
        let fu = DMatrix::from_column_slice(2, 1, &[0.0, 0.01]);
        let hx = DMatrix::from_row_slice(1, 2, &[-1.0, -2.0]);
        let ht = DMatrix::from_row_slice(1, 3, &[0.1, 0.2, 0.3]);
        let next = propagate_sensitivity(&state, &fx, &fu, &hx, &ht).unwrap();
        assert_eq!(next.du_dtheta, ht);
        // no forcing keeps everything at zero
        let zero = propagate_sensitivity(&SensitivityState::zero(2, 1, 3), &fx, &fu, &hx, &DMatrix::zeros(1, 3)).unwrap();
        assert_eq!(zero.dx_dtheta.amax(), 0.0);
        assert_eq!(zero.du_dtheta.amax(), 0.0);
    }

    #[test]
    fn equilibrium_rollout_has_zero_loss() {
        let sys = LinearSystem::double_integrator(0.01);
        let (a, b) = sys.discrete();
        let samples = vec![DVector::zeros(3); 40];
        let mut ctrl = LinearMpc::new(a, b, DMatrix::zeros(0, 3), DVector::zeros(0), 10, ReferenceSamples::new(samples));
        let exp = Experiment {
            plant: Arc::new(sys),
            x0: DVector::zeros(2),
            references: vec![DVector::zeros(2); 21],
            steps: 20,
            loss: TrackingLoss::positions(vec![0], LossKind::SumSquared),
            noise: None,
        };
        let params = QuadCostParams::identity(2, 1);
        let log = rollout(&exp, &mut ctrl, &params, true).unwrap();
        assert_eq!(log.loss, 0.0);
        assert!(log.states.iter().all(|x| x.amax() == 0.0));
        assert_eq!(loss_gradient(&log, &exp.loss).unwrap().amax(), 0.0);
    }

    #[test]
    fn short_rollout_gradient_matches_finite_difference() {
        let (exp, mut ctrl) = di_experiment(None, 30, 10);
        let params = QuadCostParams::new(DVector::from_vec(vec![2.0, 0.5]), DVector::from_vec(vec![0.3]), (0.01, 1000.0));
        let log = rollout(&exp, &mut ctrl, &params, true).unwrap();
        let analytic = loss_gradient(&log, &exp.loss).unwrap();
        let fd = fd_loss_gradient(&exp, &mut ctrl, &params, 1e-4).unwrap();
        assert!((&analytic - &fd).amax() <= 1e-3 * (1.0 + fd.amax()), "{analytic} vs {fd}");
    }

    #[test]
    fn bound_clips_an_aggressive_first_control() {
        let params = QuadCostParams::new(DVector::from_vec(vec![1000.0, 1.0]), DVector::from_vec(vec![0.01]), (0.01, 1000.0));
        let x = DVector::from_vec(vec![-5.0, 0.0]);
        let (_, mut free) = di_experiment(None, 50, 20);
        let unconstrained = free.control(0, &x, &params).unwrap();
        assert!(unconstrained.u[0] > 1.0, "instance must saturate: {}", unconstrained.u[0]);
        assert!(!unconstrained.status.saturated);
        let (_, mut boxed) = di_experiment(Some(1.0), 50, 20);
        let step = boxed.control(0, &x, &params).unwrap();
        assert_relative_eq!(step.u[0], 1.0, epsilon = 1e-9);
        assert!(step.status.saturated);
        // the first control is pinned, so it is insensitive to the weights
        assert!(step.du_dtheta.amax() < 1e-9, "{}", step.du_dtheta);
    }

    #[test]
    fn zero_step_size_keeps_everything_constant() {
        let (exp, mut ctrl) = di_experiment(Some(2.0), 40, 10);
        let res = tune(&exp, &mut ctrl, &QuadCostParams::identity(2, 1), 3, 0.0).unwrap();
        assert!(res.history.windows(2).all(|w| w[0].rmse == w[1].rmse && w[0].params == w[1].params));
    }

    #[test]
    fn open_loop_rejects_long_loss_horizon() {
        let (_, mut ctrl) = di_experiment(None, 10, 10);
        let setup = OpenLoopSetup {
            x0: DVector::zeros(2),
            references: vec![DVector::zeros(2); 20],
            loss_horizon: 11,
            loss: TrackingLoss::positions(vec![0], LossKind::Rmse),
        };
        assert!(matches!(
            open_loop_loss(&setup, &mut ctrl, &QuadCostParams::identity(2, 1)),
            Err(DiffTuneError::InvalidConfig(_))
        ));
    }

    #[test]
    fn rmse_loss_gradient_matches_value() {
        let loss = TrackingLoss::positions(vec![0, 1], LossKind::Rmse);
        let states = vec![DVector::from_vec(vec![0.3, -0.2]), DVector::from_vec(vec![1.0, 0.5])];
        let refs = vec![DVector::zeros(2), DVector::from_vec(vec![0.5, 0.5])];
        let (dx, _) = loss.gradients(&states, &refs, &[]);
        let h = 1e-6;
        for k in 0..2 {
            for i in 0..2 {
                let mut sp = states.clone();
                sp[k][i] += h;
                let mut sm = states.clone();
                sm[k][i] -= h;
                let fd = (loss.value(&sp, &refs, &[]) - loss.value(&sm, &refs, &[])) / (2.0 * h);
                assert_relative_eq!(dx[k][i], fd, epsilon = 1e-8);
            }
        }
    }
}
