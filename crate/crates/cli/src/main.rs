use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use aoed_core::config::ExperimentConfig;
use aoed_core::experiments::{self, FieldChoice, Sweep};
use aoed_core::io::{fmt, read_data_samples, read_table, schemas, write_summary};

#[derive(Parser)]
#[command(name = "aoed", version, about = "A-optimal sensor placement for elliptic coefficient inversion")]
struct Cli {
    /// TOML experiment configuration; defaults apply to every missing key.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, created if missing.
    #[arg(short, long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Field {
    Truth,
    Zero,
    PriorMean,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Param,
    Sensor,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the state equation for a parameter field; also writes noisy data for `map`.
    Forward {
        #[arg(long, value_enum, default_value = "truth")]
        field: Field,
    },
    /// MAP point with all sensors active.
    Map {
        /// Data table from `forward`; noisy truth observations when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Objective estimate and gradient at one design.
    OedEval {
        /// Design table (sensor, x, y, w); all-ones when omitted.
        #[arg(long)]
        design: Option<PathBuf>,
    },
    /// Sparse design optimization for one penalty weight.
    OedSolve {
        /// Penalty weight; the first configured value when omitted.
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Optimal against random designs for every configured penalty weight.
    CompareDesigns,
    /// Iteration counters across problem sizes.
    ScalingStudy {
        #[arg(long, value_enum, default_value = "both")]
        sweep: SweepArg,
    },
    /// Finite-difference derivative checks; nonzero exit status on failure.
    Gradcheck,
    /// Covariance-smoothed trace limit on a dense operator.
    DeltaCheck,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn read_design(path: &Path) -> Result<Vec<f64>> {
    let rows = read_table(path, &schemas::DESIGN)?;
    rows.iter()
        .map(|r| Ok(aoed_core::io::parse_f64(&r[3])?))
        .collect()
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(cli.config.as_deref())?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let threads = experiments::configure_threads()?;
    log::info!("{threads} worker threads");

    match cli.command {
        Command::Forward { field } => {
            let field = match field {
                Field::Truth => FieldChoice::Truth,
                Field::Zero => FieldChoice::Zero,
                Field::PriorMean => FieldChoice::PriorMean,
            };
            let r = experiments::run_forward(&cfg, field, out)?;
            println!("nodes {}  sensors {}", r.u.len(), r.observations.len());
        }
        Command::Map { data } => {
            let d = match data {
                Some(p) => {
                    let n_s = experiments::Problem::from_config(&cfg)?.model.num_sensors();
                    let mut all = read_data_samples(&p, n_s)?;
                    if all.is_empty() {
                        bail!("{} holds no samples", p.display());
                    }
                    Some(all.swap_remove(0))
                }
                None => None,
            };
            let r = experiments::run_map(&cfg, d, out)?;
            let s = &r.solution;
            println!(
                "cost {:.6e}  |g| {:.3e}  newton {}  cg {}  converged {}  relative error {:.4}",
                s.cost, s.grad_norm, s.newton_iterations, s.cg_iterations, s.converged, r.relative_error
            );
        }
        Command::OedEval { design } => {
            let w = design.as_deref().map(read_design).transpose()?;
            let r = experiments::run_oed_eval(&cfg, w, out)?;
            println!(
                "psi_hat {:.6e}  forward-like solves {} (predicted {})",
                r.psi_hat, r.counters.forward_like_solves, r.predicted_forward_like
            );
        }
        Command::OedSolve { gamma } => {
            let gamma = gamma.or(cfg.oed.gammas.first().copied()).unwrap_or(0.008);
            let r = experiments::run_oed_solve(&cfg, gamma, out)?;
            println!(
                "gamma {gamma}  iterations {}  active {}",
                r.total_iterations, r.n_active
            );
        }
        Command::CompareDesigns => {
            let r = experiments::run_effectiveness_study(&cfg, Some(out))?;
            let mut entries = vec![("prior_trace".to_string(), fmt(r.prior_trace))];
            for b in &r.budgets {
                println!(
                    "gamma {}  active {}  V_bar {:.4}  E_bar {:.4}  dominates {}  E_bar rank {}/{}",
                    b.gamma,
                    b.optimal.n_active,
                    b.optimal.v_bar,
                    b.optimal.e_bar,
                    b.dominates(),
                    b.e_bar_rank(),
                    b.random.len()
                );
                let g = b.gamma;
                entries.push((format!("gamma_{g}_n_active"), b.optimal.n_active.to_string()));
                entries.push((format!("gamma_{g}_binary_gap"), fmt(b.binary_gap)));
                entries.push((format!("gamma_{g}_dominates"), b.dominates().to_string()));
                entries.push((format!("gamma_{g}_e_bar_rank"), b.e_bar_rank().to_string()));
            }
            write_summary(out.join("compare_summary.csv"), &entries)?;
        }
        Command::ScalingStudy { sweep } => {
            let sweeps: &[Sweep] = match sweep {
                SweepArg::Param => &[Sweep::ParamDim],
                SweepArg::Sensor => &[Sweep::SensorDim],
                SweepArg::Both => &[Sweep::ParamDim, Sweep::SensorDim],
            };
            for &s in sweeps {
                for r in experiments::run_scaling_study(&cfg, s, Some(out))? {
                    println!(
                        "{:?}  n {}  n_s {}  inner {}  outer {}  quasi-newton {}  solves {} / {}",
                        r.sweep,
                        r.n_params,
                        r.n_sensors,
                        r.inner_cg,
                        r.outer_cg,
                        r.outer_iterations,
                        r.forward_like_solves,
                        r.predicted_forward_like
                    );
                }
            }
        }
        Command::Gradcheck => {
            let rep = experiments::run_gradcheck(&cfg)?;
            rep.write(&out.join("gradcheck.csv"))?;
            println!("{:<22} {:<40} {:>12} {:>10}  result", "suite", "component", "rel error", "tolerance");
            for r in &rep.rows {
                println!(
                    "{:<22} {:<40} {:>12.3e} {:>10.0e}  {}",
                    r.suite,
                    r.component,
                    r.rel_error,
                    r.tolerance,
                    if r.pass { "ok" } else { "FAIL" }
                );
            }
            return Ok(rep.passed());
        }
        Command::DeltaCheck => {
            for r in experiments::run_delta_check(cfg.seed, Some(out))? {
                println!(
                    "delta {:<8e} trace {:.10e}  exact {:.10e}  deficit {:.3e}",
                    r.delta,
                    r.trace_estimate,
                    r.exact_trace,
                    (r.exact_trace - r.trace_estimate) / r.exact_trace
                );
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
