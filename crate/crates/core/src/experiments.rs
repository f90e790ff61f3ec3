//! Experiment descriptions for the benchmark plants.
//!
//! An [`ExperimentConfig`] names a plant, the MPC horizon, the closed-loop
//! length and the learning schedule. [`ExperimentConfig::build`] turns it into
//! a ready-to-run [`Setup`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::difftune::{
    self, DiffTuneError, Experiment, LinearMpc, LossKind, TrackingLoss, MpcController, StateNoise, NonlinearMpc,
    OpenLoopSetup, QuadCostParams, ReferenceSamples, TuneResult,
};
use crate::grad::GradTarget;
use crate::nmpc::LinearConstraint;
use crate::systems::{box_constraints, Dynamics, LinearSystem, Quadrotor, ReferenceKind, Unicycle};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    DoubleIntegrator,
    Unicycle,
    Quadrotor,
}

impl SystemKind {
    pub fn dims(self) -> (usize, usize) {
        match self {
            SystemKind::DoubleIntegrator => (2, 1),
            SystemKind::Unicycle => (3, 2),
            SystemKind::Quadrotor => (13, 4),
        }
    }

    pub fn default_reference(self) -> ReferenceKind {
        match self {
            SystemKind::DoubleIntegrator => ReferenceKind::DiSine,
            SystemKind::Unicycle => ReferenceKind::UnicycleCircle,
            SystemKind::Quadrotor => ReferenceKind::Figure8,
        }
    }

    /// State components treated as position by the loss.
    pub fn positions(self) -> Vec<usize> {
        match self {
            SystemKind::DoubleIntegrator => vec![0],
            SystemKind::Unicycle => vec![0, 1],
            SystemKind::Quadrotor => vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    ClosedLoop,
    OpenLoop,
}

/// Serializable experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub system: SystemKind,
    /// MPC horizon in steps.
    #[serde(alias = "T")]
    pub horizon: usize,
    /// Closed-loop steps.
    #[serde(alias = "N")]
    pub steps: usize,
    pub dt: f64,
    pub trials: usize,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_bd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_init: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_init: Option<Vec<f64>>,
    #[serde(default = "default_bounds")]
    pub bounds: [f64; 2],
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    /// Predicted steps entering the open-loop loss; must not exceed `horizon`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_horizon: Option<usize>,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceKind>,
    /// Standard deviation of additive state noise; zero or absent disables it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    /// Gradient-check targets, e.g. `q_1`, `r_1`, `x0_2` (1-based).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<String>>,
}

fn default_bounds() -> [f64; 2] {
    [difftune::DEFAULT_BOUNDS.0, difftune::DEFAULT_BOUNDS.1]
}

fn default_loss() -> LossKind {
    LossKind::SumSquared
}

/// Everything needed to run one tuning experiment.
pub struct Setup {
    pub experiment: Experiment<f64>,
    pub controller: Box<dyn MpcController<f64>>,
    pub params: QuadCostParams<f64>,
    /// Present in open-loop mode.
    pub open_loop: Option<OpenLoopSetup<f64>>,
}

/// Trial history of either learning mode.
#[derive(Debug, Clone, PartialEq)]
pub enum RunResult {
    ClosedLoop(TuneResult<f64>),
    /// Open-loop losses per trial and the closed-loop evaluation of each trial's parameters.
    OpenLoop { losses: Vec<f64>, evaluation: TuneResult<f64> },
}

impl ExperimentConfig {
    /// Minimal config for `system` with everything else at its default.
    pub fn new(system: SystemKind, horizon: usize, steps: usize, dt: f64, trials: usize, alpha: f64) -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            description: None,
            system,
            horizon,
            steps,
            dt,
            trials,
            alpha,
            u_bd: None,
            q_init: None,
            r_init: None,
            bounds: default_bounds(),
            seed: 0,
            mode: Mode::ClosedLoop,
            loss_horizon: None,
            loss: default_loss(),
            x0: None,
            reference: None,
            noise_std: None,
            targets: None,
        }
    }

    pub fn validate(&self) -> Result<(), DiffTuneError> {
        let bad = |why: String| Err(DiffTuneError::InvalidConfig(why));
        let (n, m) = self.system.dims();
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.horizon == 0 || self.steps == 0 || self.trials == 0 {
            return bad("horizon, steps and trials must be positive".into());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) || !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("dt must be positive and alpha non-negative".into());
        }
        if !(self.bounds[0] > 0.0 && self.bounds[0] <= self.bounds[1]) {
            return bad(format!("bounds {:?} must satisfy 0 < lo <= hi", self.bounds));
        }
        if let Some(bd) = self.u_bd {
            if !(bd.is_finite() && bd >= 0.0) {
                return bad("u_bd must be finite and non-negative".into());
            }
        }
        let lengths = [(&self.q_init, n, "q_init"), (&self.r_init, m, "r_init"), (&self.x0, n, "x0")];
        for (v, len, name) in lengths {
            if let Some(v) = v {
                if v.len() != len {
                    return bad(format!("{name} needs {len} entries, got {}", v.len()));
                }
            }
        }
        if let Some(r) = self.reference {
            if r.state_dim() != n {
                return bad(format!("reference {r:?} does not match the {n}-dimensional state"));
            }
        }
        if self.mode == Mode::OpenLoop {
            let len = self.loss_horizon.unwrap_or(self.horizon);
            if len > self.horizon {
                return bad(format!(
                    "open-loop loss horizon {len} exceeds the MPC horizon {}: the loss of a single plan can only be \
                     shorter than or equal to the planning horizon",
                    self.horizon
                ));
            }
        }
        if let Some(std) = self.noise_std {
            if !(std.is_finite() && std >= 0.0) {
                return bad("noise_std must be finite and non-negative".into());
            }
        }
        if let Some(targets) = &self.targets {
            for t in targets {
                self.parse_target(t)?;
            }
        }
        Ok(())
    }

    /// Parses `q_i`, `r_i` or `x0_i` (1-based) into a gradient target.
    pub fn parse_target(&self, name: &str) -> Result<GradTarget, DiffTuneError> {
        let (n, m) = self.system.dims();
        let err = || DiffTuneError::InvalidConfig(format!("unknown gradient target {name:?}"));
        let (prefix, idx) = name.rsplit_once('_').ok_or_else(err)?;
        let i: usize = idx.parse().map_err(|_| err())?;
        let limit = match prefix {
            "q" | "x0" => n,
            "r" => m,
            _ => return Err(err()),
        };
        if i == 0 || i > limit {
            return Err(err());
        }
        Ok(match prefix {
            "q" => GradTarget::shared_state_diag(i - 1),
            "r" => GradTarget::shared_control_diag(i - 1),
            _ => GradTarget::initial_state(i - 1),
        })
    }

    /// `q_1.., r_1..`, matching the parameter vector.
    pub fn parameter_names(&self) -> Vec<String> {
        let (n, m) = self.system.dims();
        (1..=n).map(|i| format!("q_{i}")).chain((1..=m).map(|i| format!("r_{i}"))).collect()
    }

    pub fn initial_params(&self) -> QuadCostParams<f64> {
        let (n, m) = self.system.dims();
        let q = self.q_init.clone().unwrap_or_else(|| vec![1.0; n]);
        let r = self.r_init.clone().unwrap_or_else(|| vec![1.0; m]);
        QuadCostParams::new(DVector::from_vec(q), DVector::from_vec(r), (self.bounds[0], self.bounds[1]))
    }

    fn reference_kind(&self) -> ReferenceKind {
        self.reference.unwrap_or_else(|| self.system.default_reference())
    }

    /// Initial plant state; defaults to the reference at `t = 0` with zero velocity.
    pub fn initial_state(&self) -> DVector<f64> {
        if let Some(x0) = &self.x0 {
            return DVector::from_vec(x0.clone());
        }
        let reference = self.reference_kind().at_time(0.0);
        match self.system {
            SystemKind::DoubleIntegrator => DVector::from_vec(vec![reference[0], 0.0]),
            SystemKind::Unicycle => reference,
            SystemKind::Quadrotor => Quadrotor::rest_state(reference.fixed_rows::<3>(0).into_owned()),
        }
    }

    fn plant(&self) -> Arc<dyn Dynamics<f64>> {
        match self.system {
            SystemKind::DoubleIntegrator => Arc::new(LinearSystem::double_integrator(self.dt).with_bound(self.u_bd)),
            SystemKind::Unicycle => Arc::new(Unicycle { dt: self.dt, ..Unicycle::default() }),
            SystemKind::Quadrotor => Arc::new(Quadrotor { dt: self.dt, ..Quadrotor::default() }),
        }
    }

    /// Control reference: hover thrust for the quadrotor, zero otherwise.
    fn control_reference(&self) -> DVector<f64> {
        match self.system {
            SystemKind::Quadrotor => Quadrotor { dt: self.dt, ..Quadrotor::default() }.hover_control(),
            _ => DVector::zeros(self.system.dims().1),
        }
    }

    fn stage_constraints(&self, plant: &dyn Dynamics<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let (n, m) = self.system.dims();
        match (self.system, self.u_bd) {
            (SystemKind::Unicycle, _) => plant.constraints(),
            (_, Some(bd)) => box_constraints(n, m, bd),
            _ => (DMatrix::zeros(0, n + m), DVector::zeros(0)),
        }
    }

    /// Closed-loop setup ignoring `mode`.
    pub fn closed_loop_setup(&self) -> Result<Setup, DiffTuneError> {
        self.validate()?;
        let kind = self.reference_kind();
        let plant = self.plant();
        let ubar = self.control_reference();
        let samples: Vec<DVector<f64>> = (0..self.steps + self.horizon + 1)
            .map(|k| {
                let x = kind.sample(k, self.dt);
                DVector::from_iterator(x.len() + ubar.len(), x.iter().chain(ubar.iter()).copied())
            })
            .collect();
        let references = (0..=self.steps).map(|k| kind.sample(k, self.dt)).collect();
        let reference = ReferenceSamples::new(samples);
        let (g, l) = self.stage_constraints(plant.as_ref());
        let controller: Box<dyn MpcController<f64>> = match self.system {
            SystemKind::DoubleIntegrator => {
                let (a, b) = LinearSystem::double_integrator(self.dt).discrete();
                Box::new(LinearMpc::new(a, b, g, l, self.horizon, reference))
            }
            _ => {
                let constraint = (g.nrows() > 0).then_some(LinearConstraint { g, l });
                let ctrl = NonlinearMpc::new(Arc::clone(&plant), constraint, self.horizon, reference)
                    .map_err(|e| DiffTuneError::InvalidConfig(format!("model check failed: {e}")))?;
                Box::new(ctrl)
            }
        };
        let noise = self.noise_std.filter(|s| *s > 0.0).map(|std_dev| StateNoise { std_dev, seed: self.seed });
        let experiment = Experiment {
            plant,
            x0: self.initial_state(),
            references,
            steps: self.steps,
            loss: TrackingLoss::positions(self.system.positions(), self.loss),
            noise,
        };
        Ok(Setup { experiment, controller, params: self.initial_params(), open_loop: None })
    }

    /// Builds the setup; open-loop mode adds the single-plan loss description.
    pub fn build(&self) -> Result<Setup, DiffTuneError> {
        let mut setup = self.closed_loop_setup()?;
        if self.mode == Mode::OpenLoop {
            let len = self.loss_horizon.unwrap_or(self.horizon);
            let kind = self.reference_kind();
            setup.open_loop = Some(OpenLoopSetup {
                x0: setup.experiment.x0.clone(),
                references: (0..len).map(|k| kind.sample(k, self.dt)).collect(),
                loss_horizon: len,
                loss: TrackingLoss::positions(self.system.positions(), self.loss),
            });
        }
        Ok(setup)
    }

    /// Runs the configured learning scheme.
    ///
    /// Open-loop mode learns on single plans and then evaluates every trial's
    /// parameters in closed loop, so both modes report comparable RMSE.
    pub fn run(&self) -> Result<RunResult, DiffTuneError> {
        let mut setup = self.build()?;
        match setup.open_loop.take() {
            None => difftune::tune(&setup.experiment, setup.controller.as_mut(), &setup.params, self.trials, self.alpha)
                .map(RunResult::ClosedLoop)
                .map_err(|e| e.error),
            Some(ol) => {
                let history =
                    difftune::open_loop_tune(&ol, setup.controller.as_mut(), &setup.params, self.trials, self.alpha)?;
                let losses = history.iter().map(|(l, _)| *l).collect();
                let mut evaluation = TuneResult { history: Vec::new(), logs: Vec::new(), params: setup.params.clone() };
                for (trial, (_, params)) in history.into_iter().enumerate() {
                    let log = difftune::rollout(&setup.experiment, setup.controller.as_mut(), &params, false)?;
                    evaluation.history.push(difftune::TrialRecord {
                        trial: trial + 1,
                        rmse: log.rmse,
                        loss: log.loss,
                        params: params.clone(),
                        gradient: DVector::zeros(params.dim()),
                        reused_jacobians: 0,
                    });
                    evaluation.logs.push(log);
                    evaluation.params = params;
                }
                Ok(RunResult::OpenLoop { losses, evaluation })
            }
        }
    }
}

impl RunResult {
    pub fn tune_result(&self) -> &TuneResult<f64> {
        match self {
            RunResult::ClosedLoop(r) => r,
            RunResult::OpenLoop { evaluation, .. } => evaluation,
        }
    }
}
