//! Command-line front end for the `oscool` library.
//!
//! Subcommands map one-to-one onto the library's public surface:
//!
//! * `analyze`  — stationary analysis of a model file (JSON to stdout);
//! * `steady`   — minimum-power constant cooling feedback (JSON to stdout);
//! * `bridge`   — finite-horizon cooling schedule (gains CSV + summary JSON);
//! * `simulate` — Monte Carlo ensemble under a chosen control law
//!   (trajectories CSV + summary JSON);
//! * `demo-inertial` — the built-in single-oscillator showcase: cool from
//!   temperature 1/2 to 1/16 over [0, 1], then hold with constant feedback
//!   until t = 2, emitting trajectory, control, covariance and gain tables.
//!
//! Exit codes: 0 on success, 2 when the input violates a documented
//! precondition (including command-line usage errors), 3 when a numerical
//! solver fails.  Artifacts land in `--out`, else `$OSCOOL_OUT_DIR`,
//! else the current directory.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;

use oscool::analysis::{design_steady_feedback, invariant_gaussian, write_covariance_csv};
use oscool::bridge::{solve_bridge, write_gains_csv, BridgeSolution, DEFAULT_STEPS};
use oscool::model::OscillatorModel;
use oscool::sim::{
    empirical_covariance, energy_ledger, girsanov_cost, girsanov_cost_between, simulate_ensemble,
    write_controls_csv, write_trajectories_csv, ControlLaw, CovarianceEstimate, EnergyLedger,
    SimConfig, DEFAULT_DT,
};
use oscool::Error;

/// Environment variable consulted for the artifact directory when
/// `--out` is not given.
const OUT_DIR_ENV: &str = "OSCOOL_OUT_DIR";

/// How many trajectories the CSV exports keep; summaries always use the
/// full ensemble.
const CSV_TRAJECTORY_LIMIT: usize = 100;

#[derive(Parser)]
#[command(
    name = "oscool",
    version,
    about = "Cooling control for networks of stochastic oscillators",
    propagate_version = true
)]
struct Cli {
    /// Directory for emitted artifacts (falls back to $OSCOOL_OUT_DIR, then `.`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stationary analysis: stability, controllability, fluctuation--dissipation,
    /// reversibility, and the invariant Gaussian.
    Analyze {
        /// Model description (JSON).
        model: PathBuf,
    },
    /// Design the minimum-power constant velocity feedback that holds the
    /// network at a reduced effective temperature.
    Steady {
        /// Model description (JSON).
        model: PathBuf,
        /// Target effective temperature (0 < teff <= model temperature).
        #[arg(long)]
        teff: f64,
    },
    /// Solve the finite-horizon cooling problem and export the gain schedule.
    Bridge {
        /// Model description (JSON).
        model: PathBuf,
        /// Target effective temperature (0 < teff <= model temperature).
        #[arg(long)]
        teff: f64,
        /// Start of the control window.
        #[arg(long, default_value_t = 0.0)]
        t0: f64,
        /// End of the control window.
        #[arg(long, default_value_t = 1.0)]
        t1: f64,
        /// Time-grid resolution for the two-point boundary-value solve.
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        steps: usize,
    },
    /// Simulate an ensemble from thermal equilibrium under a control law.
    Simulate {
        /// Model description (JSON).
        model: PathBuf,
        /// Control law applied to every trajectory.
        #[arg(long, value_enum, default_value_t = LawKind::None)]
        law: LawKind,
        /// Target effective temperature (required by steady/bridge/switched laws).
        #[arg(long)]
        teff: Option<f64>,
        /// Start of the run (and of the schedule window, when one is solved).
        #[arg(long, default_value_t = 0.0)]
        t0: f64,
        /// End of the schedule window for bridge/switched laws.
        #[arg(long, default_value_t = 1.0)]
        t1: f64,
        /// Time-grid resolution for the schedule solve.
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        steps: usize,
        /// End of the simulation (defaults: t1, or 2*t1 - t0 for switched).
        #[arg(long)]
        tend: Option<f64>,
        /// Euler--Maruyama step size.
        #[arg(long, default_value_t = DEFAULT_DT)]
        dt: f64,
        /// Number of trajectories.
        #[arg(long, default_value_t = 1000)]
        ntraj: usize,
        /// Master seed for the per-trajectory noise streams.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run the built-in single-oscillator demo: solve the [0, 1] cooling
    /// schedule to temperature 1/16, simulate the switched law to t = 2,
    /// and emit trajectory/control/covariance/gain tables plus a summary.
    DemoInertial {
        /// Number of trajectories.
        #[arg(long, default_value_t = 1000)]
        ntraj: usize,
        /// Master seed for the per-trajectory noise streams.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum LawKind {
    /// Free dynamics, no control.
    None,
    /// Constant velocity feedback holding the reduced temperature.
    Steady,
    /// Finite-horizon schedule; no control after its window ends.
    Bridge,
    /// Schedule during its window, constant feedback afterwards.
    Switched,
}

impl LawKind {
    fn name(self) -> &'static str {
        match self {
            LawKind::None => "none",
            LawKind::Steady => "steady",
            LawKind::Bridge => "bridge",
            LawKind::Switched => "switched",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out_dir = resolve_out_dir(cli.out.as_deref());
    match run(cli.command, &out_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn resolve_out_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(dir) = flag {
        return dir.to_path_buf();
    }
    if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    PathBuf::from(".")
}

fn run(command: Command, out_dir: &Path) -> oscool::Result<()> {
    match command {
        Command::Analyze { model } => {
            let model = OscillatorModel::from_json_file(model)?;
            let report = invariant_gaussian(&model)?;
            print_json(&report)
        }
        Command::Steady { model, teff } => {
            let model = OscillatorModel::from_json_file(model)?;
            let design = design_steady_feedback(&model, model.temp(), teff)?;
            print_json(&design)
        }
        Command::Bridge {
            model,
            teff,
            t0,
            t1,
            steps,
        } => {
            let model = OscillatorModel::from_json_file(model)?;
            let sol = solve_bridge(&model, model.temp(), teff, t0, t1, steps)?;
            let gains_csv = out_dir.join("gains.csv");
            write_gains_csv(&sol, artifact(&gains_csv)?)?;
            print_json(&BridgeSummary::new(&sol, &gains_csv))
        }
        Command::Simulate {
            model,
            law,
            teff,
            t0,
            t1,
            steps,
            tend,
            dt,
            ntraj,
            seed,
        } => {
            let model = OscillatorModel::from_json_file(model)?;
            simulate(
                &model, law, teff, t0, t1, steps, tend, dt, ntraj, seed, out_dir,
            )
        }
        Command::DemoInertial { ntraj, seed } => demo_inertial(ntraj, seed, out_dir),
    }
}

/// Open `path` for buffered writing, mapping I/O failures onto the
/// validation error class (the target directory is caller input).
fn artifact(path: &Path) -> oscool::Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::InvalidArgument {
            name: "out",
            reason: format!("cannot create `{}`: {e}", path.display()),
        })
}

fn print_json<T: Serialize>(value: &T) -> oscool::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> oscool::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text.as_bytes()).map_err(|e| Error::InvalidArgument {
        name: "out",
        reason: format!("cannot write `{}`: {e}", path.display()),
    })
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[derive(Serialize)]
struct BridgeSummary {
    t0: f64,
    t1: f64,
    steps: usize,
    sigma: f64,
    expected_cost: f64,
    boundary_residual: f64,
    terminal_cov_residual: f64,
    iterations: usize,
    gains_csv: String,
}

impl BridgeSummary {
    fn new(sol: &BridgeSolution, gains_csv: &Path) -> Self {
        BridgeSummary {
            t0: sol.t0(),
            t1: sol.t1(),
            steps: sol.times().len() - 1,
            sigma: sol.sigma(),
            expected_cost: sol.expected_cost,
            boundary_residual: sol.boundary_residual,
            terminal_cov_residual: sol.terminal_cov_residual,
            iterations: sol.iterations,
            gains_csv: gains_csv.display().to_string(),
        }
    }
}

#[derive(Serialize)]
struct SimulateSummary {
    law: &'static str,
    t0: f64,
    t_end: f64,
    dt: f64,
    n_traj: usize,
    seed: u64,
    /// Monte Carlo control-cost estimate over the whole run, with its
    /// standard error.
    cost_estimate: f64,
    cost_se: f64,
    /// Planned cost of the schedule, when one was solved.
    #[serde(skip_serializing_if = "Option::is_none")]
    expected_cost: Option<f64>,
    final_covariance: CovarianceEstimate,
    ledger: EnergyLedger,
    trajectories_csv: String,
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    model: &OscillatorModel,
    law_kind: LawKind,
    teff: Option<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
    tend: Option<f64>,
    dt: f64,
    ntraj: usize,
    seed: u64,
    out_dir: &Path,
) -> oscool::Result<()> {
    let need_teff = || {
        teff.ok_or_else(|| Error::InvalidArgument {
            name: "teff",
            reason: format!("the `{}` law needs --teff", law_kind.name()),
        })
    };
    let steady_gain = |teff: f64| -> oscool::Result<DMatrix<f64>> {
        Ok(design_steady_feedback(model, model.temp(), teff)?.u)
    };
    let schedule = |teff: f64| -> oscool::Result<BridgeSolution> {
        solve_bridge(model, model.temp(), teff, t0, t1, steps)
    };

    let law = match law_kind {
        LawKind::None => ControlLaw::NoControl,
        LawKind::Steady => ControlLaw::SteadyFeedback(steady_gain(need_teff()?)?),
        LawKind::Bridge => ControlLaw::Schedule(schedule(need_teff()?)?),
        LawKind::Switched => {
            let teff = need_teff()?;
            ControlLaw::Switched {
                schedule: schedule(teff)?,
                steady_gain: steady_gain(teff)?,
            }
        }
    };
    let expected_cost = match &law {
        ControlLaw::Schedule(s) | ControlLaw::Switched { schedule: s, .. } => Some(s.expected_cost),
        _ => None,
    };
    let t_end = tend.unwrap_or(match law_kind {
        LawKind::Switched => 2.0 * t1 - t0,
        _ => t1,
    });

    let initial = model.boltzmann_state(model.temp())?;
    let config = SimConfig::new(t0, t_end, ntraj, seed).with_dt(dt);
    let ens = simulate_ensemble(model, &initial, &law, &config)?;

    let trajectories_csv = out_dir.join("trajectories.csv");
    write_trajectories_csv(
        &ens,
        Some(CSV_TRAJECTORY_LIMIT),
        artifact(&trajectories_csv)?,
    )?;

    let (cost_estimate, cost_se) = girsanov_cost(model, &ens)?;
    let summary = SimulateSummary {
        law: law_kind.name(),
        t0,
        t_end,
        dt,
        n_traj: ntraj,
        seed,
        cost_estimate,
        cost_se,
        expected_cost,
        final_covariance: empirical_covariance(&ens, ens.steps())?,
        ledger: energy_ledger(model, &ens)?,
        trajectories_csv: trajectories_csv.display().to_string(),
    };
    write_json(&summary, &out_dir.join("summary.json"))?;
    print_json(&summary)
}

#[derive(Serialize)]
struct DemoSummary {
    temp: f64,
    temp_eff: f64,
    /// Scalar constant velocity gain holding the reduced temperature.
    steady_gain: f64,
    /// Stationary input power of that constant feedback.
    steady_power: f64,
    /// Planned cost of the [t0, t1] schedule.
    expected_cost: f64,
    /// Monte Carlo cost estimate over the schedule window, with standard error.
    cost_estimate: f64,
    cost_se: f64,
    boundary_residual: f64,
    terminal_cov_residual: f64,
    iterations: usize,
    /// Empirical state covariance when the schedule hands over.
    terminal_cov: CovarianceEstimate,
    /// Empirical state covariance at the end of the run.
    final_cov: CovarianceEstimate,
    /// Time average of the empirical covariance over the holding phase.
    steady_state_cov: Vec<Vec<f64>>,
    ledger: EnergyLedger,
    n_traj: usize,
    seed: u64,
    dt: f64,
    trajectories_csv: String,
    controls_csv: String,
    covariance_csv: String,
    gains_csv: String,
}

/// The built-in showcase: a unit oscillator at temperature 1/2 is steered
/// to effective temperature 1/16 over [0, 1] by the finite-horizon
/// schedule, then held there by the constant feedback until t = 2.
fn demo_inertial(ntraj: usize, seed: u64, out_dir: &Path) -> oscool::Result<()> {
    let temp = 0.5;
    let temp_eff = 1.0 / 16.0;
    let (t0, t1, t_end) = (0.0, 1.0, 2.0);
    let model = OscillatorModel::scalar(1.0, 1.0, 1.0, 1.0, temp)?;

    let steady = design_steady_feedback(&model, temp, temp_eff)?;
    let sol = solve_bridge(&model, temp, temp_eff, t0, t1, DEFAULT_STEPS)?;

    let gains_csv = out_dir.join("gains.csv");
    write_gains_csv(&sol, artifact(&gains_csv)?)?;

    let config = SimConfig::new(t0, t_end, ntraj, seed);
    let initial = model.boltzmann_state(temp)?;
    let law = ControlLaw::Switched {
        schedule: sol.clone(),
        steady_gain: steady.u.clone(),
    };
    let ens = simulate_ensemble(&model, &initial, &law, &config)?;

    let trajectories_csv = out_dir.join("trajectories.csv");
    write_trajectories_csv(
        &ens,
        Some(CSV_TRAJECTORY_LIMIT),
        artifact(&trajectories_csv)?,
    )?;
    let controls_csv = out_dir.join("controls.csv");
    write_controls_csv(&ens, Some(CSV_TRAJECTORY_LIMIT), artifact(&controls_csv)?)?;

    // Empirical covariance at every grid node; also feeds the holding-phase
    // time average.
    let covariance_csv = out_dir.join("covariance_vs_time.csv");
    let estimates: Vec<CovarianceEstimate> = (0..=ens.steps())
        .map(|k| empirical_covariance(&ens, k))
        .collect::<oscool::Result<_>>()?;
    let covs: Vec<DMatrix<f64>> = estimates.iter().map(|e| e.cov.clone()).collect();
    write_covariance_csv(ens.times(), &covs, artifact(&covariance_csv)?)?;

    let hold_nodes: Vec<usize> = (0..=ens.steps())
        .filter(|&k| ens.times()[k] >= t1)
        .collect();
    let d = 2 * model.n();
    let mut steady_state_cov = DMatrix::<f64>::zeros(d, d);
    for &k in &hold_nodes {
        steady_state_cov += &covs[k];
    }
    steady_state_cov /= hold_nodes.len() as f64;

    let handover = ens.step_index_at(t1)?;
    let (cost_estimate, cost_se) = girsanov_cost_between(&model, &ens, t0, t1)?;
    let summary = DemoSummary {
        temp,
        temp_eff,
        steady_gain: steady.u[(0, 0)],
        steady_power: steady.power,
        expected_cost: sol.expected_cost,
        cost_estimate,
        cost_se,
        boundary_residual: sol.boundary_residual,
        terminal_cov_residual: sol.terminal_cov_residual,
        iterations: sol.iterations,
        terminal_cov: empirical_covariance(&ens, handover)?,
        final_cov: empirical_covariance(&ens, ens.steps())?,
        steady_state_cov: rows(&steady_state_cov),
        ledger: energy_ledger(&model, &ens)?,
        n_traj: ntraj,
        seed,
        dt: config.dt,
        trajectories_csv: trajectories_csv.display().to_string(),
        controls_csv: controls_csv.display().to_string(),
        covariance_csv: covariance_csv.display().to_string(),
        gains_csv: gains_csv.display().to_string(),
    };
    write_json(&summary, &out_dir.join("summary.json"))?;
    print_json(&summary)
}
