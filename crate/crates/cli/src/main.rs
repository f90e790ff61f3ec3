use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use diffmpc::difftune::{tune_with_progress, ControlStep, MpcController, QuadCostParams, TrialRecord, TuneResult};
use diffmpc::experiments::{ExperimentConfig, RunResult};
use diffmpc::grad::TargetKind;
use diffmpc::io::{problem_from_json, solution_to_json, TrajectoryDoc};
use diffmpc::lmpc::{solve_lmpc, LmpcError};

/// Analytic gradients above this relative error fail `gradcheck`.
const GRADCHECK_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "diffmpc", version, about = "Differentiable MPC tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tunes the cost weights of an experiment and writes per-trial results.
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a gnuplot script plotting the RMSE history.
        #[arg(long)]
        emit_plot_script: bool,
    },
    /// Compares analytic first-control gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Solves one linear MPC problem given as JSON.
    Solve {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with its process exit code.
#[derive(Debug)]
enum CliError {
    Internal(String),
    Input(String),
    Infeasible(String),
    GradcheckFailed(usize),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Input(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::GradcheckFailed(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Internal(why) => write!(f, "error: {why}"),
            CliError::Input(why) => write!(f, "input error: {why}"),
            CliError::Infeasible(why) => write!(f, "infeasible: {why}"),
            CliError::GradcheckFailed(n) => write!(f, "gradient check failed for {n} interior entries"),
        }
    }
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Tune { config, out, emit_plot_script } => cmd_tune(&config, &out, emit_plot_script),
        Command::Gradcheck { config } => cmd_gradcheck(&config),
        Command::Solve { input, out } => cmd_solve(&input, &out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}

fn read_input(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let cfg: ExperimentConfig =
        serde_json::from_str(&read_input(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    cfg.validate().map_err(|e| CliError::Input(e.to_string()))?;
    Ok(cfg)
}

fn results_csv(cfg: &ExperimentConfig, history: &[TrialRecord<f64>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["trial".to_string(), "rmse".into(), "loss".into()];
    header.extend(cfg.parameter_names());
    w.write_record(&header).map_err(internal)?;
    for rec in history {
        let mut row = vec![rec.trial.to_string(), rec.rmse.to_string(), rec.loss.to_string()];
        row.extend(rec.params.theta().iter().map(f64::to_string));
        w.write_record(&row).map_err(internal)?;
    }
    w.into_inner().map_err(internal)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

fn write_bundle(cfg: &ExperimentConfig, out: &Path, result: &TuneResult<f64>, seconds: f64, failure: Option<&str>) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(internal)?;
    write_file(&out.join("results.csv"), results_csv(cfg, &result.history)?)?;
    let pairs = result.history.iter().zip(&result.logs);
    for (name, entry) in [("first", pairs.clone().next()), ("last", pairs.clone().next_back())] {
        if let Some((rec, log)) = entry {
            let doc = TrajectoryDoc::from_log(rec.trial, &rec.params.theta(), log);
            write_file(&out.join(format!("trajectory_trial_{name}.json")), serde_json::to_string_pretty(&doc).map_err(internal)?)?;
        }
    }
    let metadata = serde_json::json!({
        "schema_version": diffmpc::io::SCHEMA_VERSION,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "threads": diffmpc::parallel::thread_count(),
        "wall_time_s": seconds,
        "trials_completed": result.history.len(),
        "final_params": result.params.theta().as_slice(),
        "final_param_names": cfg.parameter_names(),
        "failure": failure,
        "config": cfg,
    });
    write_file(&out.join("metadata.json"), serde_json::to_string_pretty(&metadata).map_err(internal)?)
}

fn plot_script() -> &'static str {
    "set datafile separator ','\n\
     set key autotitle columnhead\n\
     set xlabel 'trial'\n\
     set ylabel 'RMSE'\n\
     set terminal pngcairo size 800,500\n\
     set output 'rmse.png'\n\
     plot 'results.csv' using 1:2 with linespoints title 'RMSE'\n"
}

fn cmd_tune(config: &Path, out: &Path, emit_plot_script: bool) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let start = Instant::now();
    let report = |rec: &TrialRecord<f64>| eprintln!("trial {:>3}  rmse {:.6}  loss {:.6}", rec.trial, rec.rmse, rec.loss);
    let mut setup = cfg.build().map_err(|e| CliError::Input(e.to_string()))?;
    let outcome = if setup.open_loop.is_some() {
        let res = cfg.run().map_err(internal)?;
        res.tune_result().history.iter().for_each(report);
        match res {
            RunResult::OpenLoop { evaluation, .. } | RunResult::ClosedLoop(evaluation) => Ok(evaluation),
        }
    } else {
        tune_with_progress(&setup.experiment, setup.controller.as_mut(), &setup.params, cfg.trials, cfg.alpha, report)
            .map_err(|e| (e.partial, e.error.to_string()))
    };
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok(result) => {
            write_bundle(&cfg, out, &result, seconds, None)?;
            if emit_plot_script {
                write_file(&out.join("plot_rmse.gp"), plot_script())?;
            }
            Ok(())
        }
        Err((partial, why)) => {
            write_bundle(&cfg, out, &partial, seconds, Some(&why))?;
            Err(CliError::Internal(format!("experiment failed after {} trials: {why}", partial.history.len())))
        }
    }
}

/// Maps a target name to either a parameter column or an initial-state column.
enum Column {
    Param(usize),
    State(usize),
}

fn column(cfg: &ExperimentConfig, name: &str) -> Result<Column, CliError> {
    let n = cfg.system.dims().0;
    let target = cfg.parse_target(name).map_err(|e| CliError::Input(e.to_string()))?;
    Ok(match target.kind {
        TargetKind::StateWeight { i, .. } => Column::Param(i),
        TargetKind::ControlWeight { i, .. } => Column::Param(n + i),
        TargetKind::InitialState { i } => Column::State(i),
        _ => return Err(CliError::Input(format!("unsupported target {name}"))),
    })
}

fn first_step(
    ctrl: &mut dyn MpcController<f64>,
    x: &nalgebra::DVector<f64>,
    params: &QuadCostParams<f64>,
) -> Result<ControlStep<f64>, CliError> {
    ctrl.reset();
    ctrl.control(0, x, params).map_err(CliError::Internal)
}

fn cmd_gradcheck(config: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let names = cfg.targets.clone().unwrap_or_default();
    let mut setup = cfg.closed_loop_setup().map_err(|e| CliError::Input(e.to_string()))?;
    let ctrl = setup.controller.as_mut();
    let (x0, params) = (setup.experiment.x0.clone(), setup.params.clone());
    let base = first_step(ctrl, &x0, &params)?;
    let unreliable = base.status.saturated || base.status.weakly_active;
    println!("{:<8} {:>3} {:>16} {:>16} {:>10}  note", "target", "u", "analytic", "fd", "rel_err");
    let mut failures = 0;
    for name in &names {
        let (analytic, plus, minus) = match column(&cfg, name)? {
            Column::Param(j) => {
                let shift = |s: f64| {
                    let mut theta = params.theta();
                    theta[j] += s;
                    params.with_theta(&theta)
                };
                let plus = first_step(ctrl, &x0, &shift(FD_STEP))?.u;
                let minus = first_step(ctrl, &x0, &shift(-FD_STEP))?.u;
                (base.du_dtheta.column(j).into_owned(), plus, minus)
            }
            Column::State(i) => {
                let shift = |s: f64| {
                    let mut x = x0.clone();
                    x[i] += s;
                    x
                };
                let plus = first_step(ctrl, &shift(FD_STEP), &params)?.u;
                let minus = first_step(ctrl, &shift(-FD_STEP), &params)?.u;
                (base.du_dx.column(i).into_owned(), plus, minus)
            }
        };
        let fd = (plus - minus) / (2.0 * FD_STEP);
        for k in 0..analytic.len() {
            let err = (analytic[k] - fd[k]).abs() / (1.0 + fd[k].abs());
            let note = if unreliable {
                "saturated, fd unreliable"
            } else if err > GRADCHECK_TOL {
                failures += 1;
                "FAIL"
            } else {
                "ok"
            };
            println!("{name:<8} {:>3} {:>16.8e} {:>16.8e} {err:>10.2e}  {note}", k + 1, analytic[k], fd[k]);
        }
    }
    if failures > 0 {
        return Err(CliError::GradcheckFailed(failures));
    }
    Ok(())
}

fn cmd_solve(input: &Path, out: &Path) -> Result<(), CliError> {
    let problem = problem_from_json::<f64>(&read_input(input)?).map_err(|e| CliError::Input(e.to_string()))?;
    let solution = solve_lmpc(&problem).map_err(|e| match e {
        LmpcError::Infeasible { stage } => CliError::Infeasible(format!("constraints are contradictory at stage {stage}")),
        LmpcError::DimensionMismatch(why) => CliError::Input(why),
        other => internal(other),
    })?;
    write_file(out, solution_to_json(&solution))?;
    println!("objective {}", solution.objective);
    for (t, rows) in solution.active.iter().enumerate().filter(|(_, rows)| !rows.is_empty()) {
        println!("stage {t}: active rows {rows:?}");
    }
    println!("active-set iterations {}", solution.stats.iterations);
    Ok(())
}
