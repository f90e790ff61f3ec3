//! JSON documents for problems, solutions and gradients.
//!
//! Every document carries `schema_version`. Per-stage data are arrays indexed
//! by stage; matrices are arrays of rows. Empty matrices keep their column
//! count in a sibling `*_cols` field so a zero-row constraint block still
//! round-trips with the right shape.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "n": 2, "m": 1,
//!   "x_init": [0.0, 0.0],
//!   "stages": [
//!     { "cost_hessian": [[1,0,0],[0,1,0],[0,0,1]], "cost_linear": [0,0,0],
//!       "dynamics": [[1,0.01,0],[0,1,0.01]], "offset": [0,0],
//!       "ineq": [[0,0,1],[0,0,-1]], "ineq_rhs": [1,1] }
//!   ]
//! }
//! ```

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::grad::GradResult;
use crate::lmpc::{LmpcProblem, LmpcSolution, Stage};
use crate::qp::QpStats;
use crate::scalar::Scalar;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum IoError {
    Parse(String),
    /// A matrix has ragged rows or a field has the wrong length.
    Shape(String),
    Version(u32),
}

impl fmt::Display for IoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoError::Parse(msg) => write!(f, "parse error: {msg}"),
            IoError::Shape(msg) => write!(f, "malformed document: {msg}"),
            IoError::Version(v) => write!(f, "unsupported schema_version {v} (expected {SCHEMA_VERSION})"),
        }
    }
}

impl std::error::Error for IoError {}

type Rows = Vec<Vec<f64>>;

fn rows_of<T: Scalar>(m: &DMatrix<T>) -> Rows {
    m.row_iter().map(|r| r.iter().map(|v| v.to_f64_lossy()).collect()).collect()
}

fn matrix_of<T: Scalar>(rows: &Rows, cols: Option<usize>, what: &str) -> Result<DMatrix<T>, IoError> {
    let ncols = rows.first().map(Vec::len).or(cols).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(IoError::Shape(format!("{what} has ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| T::lit(rows[i][j])))
}

fn vec_of<T: Scalar>(v: &DVector<T>) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

fn dvec<T: Scalar>(v: &[f64]) -> DVector<T> {
    DVector::from_iterator(v.len(), v.iter().map(|&x| T::lit(x)))
}

fn check_version(v: u32) -> Result<(), IoError> {
    if v == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(IoError::Version(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageDoc {
    cost_hessian: Rows,
    cost_linear: Vec<f64>,
    dynamics: Rows,
    offset: Vec<f64>,
    #[serde(default)]
    ineq: Rows,
    #[serde(default)]
    ineq_rhs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    eq: Rows,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    eq_rhs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemDoc {
    schema_version: u32,
    n: usize,
    m: usize,
    x_init: Vec<f64>,
    stages: Vec<StageDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference: Option<Rows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolutionDoc {
    schema_version: u32,
    objective: f64,
    tau: Rows,
    lambda: Rows,
    nu: Rows,
    eq_multipliers: Rows,
    active: Vec<Vec<usize>>,
    stats: QpStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradDoc {
    schema_version: u32,
    du1: Vec<f64>,
    dtau: Rows,
    weakly_active: bool,
    dependent_rows: bool,
    annihilation_residual: f64,
}

pub fn problem_to_json<T: Scalar>(problem: &LmpcProblem<T>) -> String {
    let doc = ProblemDoc {
        schema_version: SCHEMA_VERSION,
        n: problem.n,
        m: problem.m,
        x_init: vec_of(&problem.x_init),
        stages: problem
            .stages
            .iter()
            .map(|s| StageDoc {
                cost_hessian: rows_of(&s.cost_hessian),
                cost_linear: vec_of(&s.cost_linear),
                dynamics: rows_of(&s.dynamics),
                offset: vec_of(&s.offset),
                ineq: rows_of(&s.ineq),
                ineq_rhs: vec_of(&s.ineq_rhs),
                eq: rows_of(&s.eq),
                eq_rhs: vec_of(&s.eq_rhs),
            })
            .collect(),
        reference: problem.reference.as_ref().map(|r| r.iter().map(vec_of).collect()),
    };
    serde_json::to_string_pretty(&doc).expect("problem document serializes")
}

/// Parses and validates a problem document.
pub fn problem_from_json<T: Scalar>(text: &str) -> Result<LmpcProblem<T>, IoError> {
    let doc: ProblemDoc = serde_json::from_str(text).map_err(|e| IoError::Parse(e.to_string()))?;
    check_version(doc.schema_version)?;
    let nm = doc.n + doc.m;
    let stages = doc
        .stages
        .iter()
        .enumerate()
        .map(|(t, s)| {
            Ok(Stage {
                cost_hessian: matrix_of(&s.cost_hessian, Some(nm), &format!("stage {t} cost_hessian"))?,
                cost_linear: dvec(&s.cost_linear),
                dynamics: matrix_of(&s.dynamics, Some(nm), &format!("stage {t} dynamics"))?,
                offset: dvec(&s.offset),
                ineq: matrix_of(&s.ineq, Some(nm), &format!("stage {t} ineq"))?,
                ineq_rhs: dvec(&s.ineq_rhs),
                eq: matrix_of(&s.eq, Some(nm), &format!("stage {t} eq"))?,
                eq_rhs: dvec(&s.eq_rhs),
            })
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    let problem = LmpcProblem {
        n: doc.n,
        m: doc.m,
        stages,
        x_init: dvec(&doc.x_init),
        reference: doc.reference.map(|r| r.iter().map(|v| dvec(v)).collect()),
    };
    problem.validate().map_err(|e| IoError::Shape(e.to_string()))?;
    Ok(problem)
}

pub fn solution_to_json<T: Scalar>(solution: &LmpcSolution<T>) -> String {
    let doc = SolutionDoc {
        schema_version: SCHEMA_VERSION,
        objective: solution.objective.to_f64_lossy(),
        tau: solution.tau.iter().map(vec_of).collect(),
        lambda: solution.lambda.iter().map(vec_of).collect(),
        nu: solution.nu.iter().map(vec_of).collect(),
        eq_multipliers: solution.eq_multipliers.iter().map(vec_of).collect(),
        active: solution.active.clone(),
        stats: solution.stats,
    };
    serde_json::to_string_pretty(&doc).expect("solution document serializes")
}

pub fn solution_from_json<T: Scalar>(text: &str) -> Result<LmpcSolution<T>, IoError> {
    let doc: SolutionDoc = serde_json::from_str(text).map_err(|e| IoError::Parse(e.to_string()))?;
    check_version(doc.schema_version)?;
    let vs = |rows: &Rows| rows.iter().map(|v| dvec(v)).collect::<Vec<DVector<T>>>();
    Ok(LmpcSolution {
        tau: vs(&doc.tau),
        lambda: vs(&doc.lambda),
        nu: vs(&doc.nu),
        eq_multipliers: vs(&doc.eq_multipliers),
        active: doc.active,
        objective: T::lit(doc.objective),
        stats: doc.stats,
    })
}

pub fn grad_to_json<T: Scalar>(grad: &GradResult<T>) -> String {
    let doc = GradDoc {
        schema_version: SCHEMA_VERSION,
        du1: vec_of(&grad.du1),
        dtau: grad.dtau.iter().map(vec_of).collect(),
        weakly_active: grad.weakly_active,
        dependent_rows: grad.dependent_rows,
        annihilation_residual: grad.annihilation_residual.to_f64_lossy(),
    };
    serde_json::to_string_pretty(&doc).expect("gradient document serializes")
}

pub fn grad_from_json<T: Scalar>(text: &str) -> Result<GradResult<T>, IoError> {
    let doc: GradDoc = serde_json::from_str(text).map_err(|e| IoError::Parse(e.to_string()))?;
    check_version(doc.schema_version)?;
    Ok(GradResult {
        du1: dvec(&doc.du1),
        dtau: doc.dtau.iter().map(|v| dvec(v)).collect(),
        weakly_active: doc.weakly_active,
        dependent_rows: doc.dependent_rows,
        annihilation_residual: T::lit(doc.annihilation_residual),
    })
}

/// A closed-loop trajectory: states `x_0..x_N`, controls and references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDoc {
    pub schema_version: u32,
    pub trial: usize,
    pub rmse: f64,
    pub loss: f64,
    pub params: Vec<f64>,
    pub states: Rows,
    pub controls: Rows,
    pub references: Rows,
}

impl TrajectoryDoc {
    pub fn from_log(trial: usize, params: &DVector<f64>, log: &crate::difftune::ClosedLoopLog<f64>) -> Self {
        TrajectoryDoc {
            schema_version: SCHEMA_VERSION,
            trial,
            rmse: log.rmse,
            loss: log.loss,
            params: params.as_slice().to_vec(),
            states: log.states.iter().map(vec_of).collect(),
            controls: log.controls.iter().map(vec_of).collect(),
            references: log.references.iter().map(vec_of).collect(),
        }
    }
}
