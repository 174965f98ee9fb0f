//! Experiment drivers: forward and MAP runs, OED evaluation and solves, design comparison,
//! scaling sweeps, derivative checks and the δ-limit table.

use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::design::{binary_gap, count_active, random_designs, solve_outer, OuterSolveRecord, PenaltySpec};
use crate::error::Result;
use crate::fem::FemSpace;
use crate::forward::{
    generate_data_samples, generate_data_samples_from, synthesize_data, DataSample, ForwardModel, ScenarioConfig,
    SensorGrid, TruthField,
};
use crate::hessian::{HessianContext, HessianMode};
use crate::io::{fmt, schemas, write_data_samples, write_summary, write_table};
use crate::krylov::{CounterSnapshot, SolveCounters};
use crate::map::{eval_cost, eval_gradient, solve_map, MapOptions, MapSolution};
use crate::oed::{average_posterior_variance, OedEvaluator, OedOptions};
use crate::prior::{relative_error, PriorModel, PriorSpec};
use crate::rng::{streams, substream};
use crate::trace::{default_delta_check, prior_trace_exact, DeltaRow, ProbeSet};
use crate::vecops::{add, dot, max_abs, scaled, sub};
use crate::vtk;

/// Forward model, prior and truth on one mesh.
pub struct Problem {
    pub scenario: ScenarioConfig,
    pub model: ForwardModel,
    pub prior: PriorModel,
    pub truth: Vec<f64>,
}

impl Problem {
    /// Prior anchored at the truth values of the anchor points.
    pub fn build(scenario: &ScenarioConfig, prior_spec: &PriorSpec, truth: TruthField) -> Result<Self> {
        let mesh = scenario.build_mesh()?;
        let space = Arc::new(FemSpace::new(mesh));
        let model = ForwardModel::new(space.clone(), scenario, Arc::new(SolveCounters::new()))?;
        let anchor_values: Vec<f64> = prior_spec.anchors.iter().map(|&p| truth.eval(p)).collect();
        let prior = PriorModel::new(space, prior_spec.clone(), &anchor_values)?;
        let truth = truth.nodal(model.mesh());
        Ok(Self {
            scenario: scenario.clone(),
            model,
            prior,
            truth,
        })
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Self::build(&cfg.scenario, &cfg.prior, cfg.truth)
    }

    pub fn counters(&self) -> &Arc<SolveCounters> {
        self.model.counters()
    }

    /// Noisy observations of the truth.
    pub fn truth_data(&self, seed: u64) -> Result<Vec<f64>> {
        let mut rng = substream(seed, streams::TRUTH_NOISE, 0);
        synthesize_data(&self.model, &self.truth, &mut rng)
    }

    pub fn training_samples(&self, cfg: &ExperimentConfig) -> Result<Vec<DataSample>> {
        generate_data_samples(&self.prior, &self.model, cfg.oed.n_d, cfg.seed)
    }

    pub fn evaluation_samples(&self, cfg: &ExperimentConfig) -> Result<Vec<DataSample>> {
        generate_data_samples_from(
            &self.prior,
            &self.model,
            cfg.oed.n_eval,
            cfg.seed,
            streams::EVAL_PRIOR_DRAWS,
            streams::EVAL_NOISE,
        )
    }
}

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "AOED_THREADS";

/// Sizes the global thread pool from `AOED_THREADS` when set; returns the thread count in use.
pub fn configure_threads() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| crate::error::OedError::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        // A pool that is already built keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

fn map_options(cfg: &ExperimentConfig) -> MapOptions {
    cfg.solver.oed_options().map
}

// ---------------------------------------------------------------------------------------------
// forward / map

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FieldChoice {
    Truth,
    Zero,
    PriorMean,
}

pub struct ForwardOutput {
    pub m: Vec<f64>,
    pub u: Vec<f64>,
    pub observations: Vec<f64>,
}

pub fn run_forward(cfg: &ExperimentConfig, field: FieldChoice, out: &Path) -> Result<ForwardOutput> {
    let pb = Problem::from_config(cfg)?;
    let m = match field {
        FieldChoice::Truth => pb.truth.clone(),
        FieldChoice::Zero => vec![0.0; pb.model.num_nodes()],
        FieldChoice::PriorMean => pb.prior.mean().to_vec(),
    };
    let u = pb.model.solve_state(&m)?;
    let nodes = pb.model.mesh().nodes();
    let rows: Vec<Vec<String>> = (0..m.len())
        .map(|k| vec![k.to_string(), fmt(nodes[k][0]), fmt(nodes[k][1]), fmt(m[k]), fmt(u[k])])
        .collect();
    write_table(out.join("forward.csv"), &schemas::FORWARD, &rows)?;
    vtk::write_mesh_fields(out.join("forward.vtk"), pb.model.mesh(), &[("m", &m), ("u", &u)])?;
    let observations = pb.model.observe(&u);
    let mut rng = substream(cfg.seed, streams::TRUTH_NOISE, 0);
    let noisy = DataSample {
        d: synthesize_data(&pb.model, &m, &mut rng)?,
        index: 0,
        master_seed: cfg.seed,
        m: m.clone(),
    };
    write_data_samples(out.join("data.csv"), &pb.model, std::slice::from_ref(&noisy))?;
    Ok(ForwardOutput { m, u, observations })
}

pub struct MapOutput {
    pub solution: MapSolution,
    pub relative_error: f64,
}

/// MAP point with all sensors active, from `data` or from noisy observations of the truth.
pub fn run_map(cfg: &ExperimentConfig, data: Option<Vec<f64>>, out: &Path) -> Result<MapOutput> {
    let pb = Problem::from_config(cfg)?;
    let d = match data {
        Some(d) => d,
        None => pb.truth_data(cfg.seed)?,
    };
    let w = vec![1.0; pb.model.num_sensors()];
    let sol = solve_map(&pb.model, &pb.prior, &w, &d, None, &map_options(cfg))?;
    let err = relative_error(pb.prior.mass(), &sol.m, &pb.truth)?;
    let rows: Vec<Vec<String>> = sol
        .history
        .iter()
        .map(|r| {
            vec![
                r.iteration.to_string(),
                fmt(r.cost),
                fmt(r.grad_norm),
                r.cg_iterations.to_string(),
                fmt(r.step_length),
                format!("{:?}", r.mode),
            ]
        })
        .collect();
    write_table(out.join("map_history.csv"), &schemas::MAP_HISTORY, &rows)?;
    vtk::write_mesh_fields(
        out.join("map.vtk"),
        pb.model.mesh(),
        &[("m_map", &sol.m), ("u", &sol.u), ("m_true", &pb.truth)],
    )?;
    write_summary(
        out.join("map_summary.csv"),
        &[
            ("cost".into(), fmt(sol.cost)),
            ("grad_norm".into(), fmt(sol.grad_norm)),
            ("newton_iterations".into(), sol.newton_iterations.to_string()),
            ("cg_iterations".into(), sol.cg_iterations.to_string()),
            ("converged".into(), sol.converged.to_string()),
            ("relative_error".into(), fmt(err)),
        ],
    )?;
    Ok(MapOutput {
        solution: sol,
        relative_error: err,
    })
}

// ---------------------------------------------------------------------------------------------
// OED evaluation and solve

fn counter_entries(c: &CounterSnapshot) -> Vec<(String, String)> {
    vec![
        ("forward_like_solves".into(), c.forward_like_solves.to_string()),
        ("state_solves".into(), c.state_solves.to_string()),
        ("adjoint_solves".into(), c.adjoint_solves.to_string()),
        ("incremental_solves".into(), c.incremental_solves.to_string()),
        ("inner_cg_iterations".into(), c.inner_cg_iters.to_string()),
        ("outer_cg_iterations".into(), c.outer_cg_iters.to_string()),
        ("newton_iterations".into(), c.newton_iters.to_string()),
        ("oed_iterations".into(), c.oed_iters.to_string()),
    ]
}

pub struct OedEvalOutput {
    pub psi_hat: f64,
    pub grad: Vec<f64>,
    pub counters: CounterSnapshot,
    pub predicted_forward_like: u64,
}

pub fn run_oed_eval(cfg: &ExperimentConfig, w: Option<Vec<f64>>, out: &Path) -> Result<OedEvalOutput> {
    let pb = Problem::from_config(cfg)?;
    let samples = pb.training_samples(cfg)?;
    let probes = ProbeSet::generate(&pb.prior, cfg.oed.n_tr, cfg.seed)?;
    let ev = OedEvaluator::new(&pb.model, &pb.prior, &samples, &probes, cfg.solver.oed_options())?;
    let w = w.unwrap_or_else(|| vec![1.0; pb.model.num_sensors()]);
    let e = ev.objective_and_gradient(&w)?;
    let grad = e.grad.clone().unwrap_or_default();
    let rows: Vec<Vec<String>> = pb
        .model
        .sensors()
        .iter()
        .enumerate()
        .map(|(j, x)| vec![j.to_string(), fmt(x[0]), fmt(x[1]), fmt(w[j]), fmt(grad[j])])
        .collect();
    write_table(out.join("oed_eval.csv"), &schemas::OED_EVAL, &rows)?;
    let mut entries = vec![
        ("psi_hat".to_string(), fmt(e.psi_hat)),
        ("reliable".to_string(), e.reliable.to_string()),
        ("predicted_forward_like".to_string(), e.predicted_forward_like.to_string()),
    ];
    entries.extend(counter_entries(&e.counters));
    write_summary(out.join("oed_eval_summary.csv"), &entries)?;
    Ok(OedEvalOutput {
        psi_hat: e.psi_hat,
        grad,
        counters: e.counters,
        predicted_forward_like: e.predicted_forward_like,
    })
}

pub fn write_outer_record(out: &Path, prefix: &str, model: &ForwardModel, rec: &OuterSolveRecord) -> Result<()> {
    let rows: Vec<Vec<String>> = rec
        .history
        .iter()
        .map(|h| {
            vec![
                h.stage.to_string(),
                h.penalty.clone(),
                fmt(h.mu),
                h.iteration.to_string(),
                fmt(h.psi_hat),
                fmt(h.penalty_value),
                fmt(h.barrier_objective),
                fmt(h.grad_norm),
                h.n_active.to_string(),
            ]
        })
        .collect();
    write_table(out.join(format!("{prefix}_history.csv")), &schemas::OED_HISTORY, &rows)?;
    let rows: Vec<Vec<String>> = model
        .sensors()
        .iter()
        .enumerate()
        .map(|(j, x)| vec![j.to_string(), fmt(x[0]), fmt(x[1]), fmt(rec.w[j])])
        .collect();
    write_table(out.join(format!("{prefix}_design.csv")), &schemas::DESIGN, &rows)?;
    vtk::write_sensor_overlay(out.join(format!("{prefix}_design.vtk")), model.sensors(), &rec.w)?;
    Ok(())
}

pub fn run_oed_solve(cfg: &ExperimentConfig, gamma: f64, out: &Path) -> Result<OuterSolveRecord> {
    let pb = Problem::from_config(cfg)?;
    let samples = pb.training_samples(cfg)?;
    let probes = ProbeSet::generate(&pb.prior, cfg.oed.n_tr, cfg.seed)?;
    let ev = OedEvaluator::new(&pb.model, &pb.prior, &samples, &probes, cfg.solver.oed_options())?;
    let w0 = vec![cfg.outer.initial_weight; pb.model.num_sensors()];
    let rec = solve_outer(&ev, &w0, &cfg.oed.penalty(gamma), &cfg.outer)?;
    write_outer_record(out, &format!("oed_gamma_{gamma}"), &pb.model, &rec)?;
    Ok(rec)
}

// ---------------------------------------------------------------------------------------------
// design comparison

#[derive(Debug, Clone, Serialize)]
pub struct CloudRow {
    pub design_id: String,
    pub kind: String,
    pub gamma: f64,
    pub n_active: usize,
    /// MAP error against the truth for the truth data.
    pub e_rel: f64,
    /// tr(H⁻¹) at the truth-data MAP point.
    pub trace: f64,
    pub v_bar: f64,
    pub e_bar: f64,
}

impl CloudRow {
    fn to_record(&self) -> Vec<String> {
        vec![
            self.design_id.clone(),
            self.kind.clone(),
            fmt(self.gamma),
            self.n_active.to_string(),
            fmt(self.e_rel),
            fmt(self.trace),
            fmt(self.v_bar),
            fmt(self.e_bar),
        ]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetResult {
    pub gamma: f64,
    pub optimal: CloudRow,
    pub random: Vec<CloudRow>,
    pub final_weights: Vec<f64>,
    pub binary_gap: f64,
    pub outer_iterations: usize,
}

impl BudgetResult {
    /// Optimal V̄ strictly below every random design's.
    pub fn dominates(&self) -> bool {
        self.random.iter().all(|r| self.optimal.v_bar < r.v_bar)
    }

    /// Number of random designs with a smaller Ē_rel than the optimal one.
    pub fn e_bar_rank(&self) -> usize {
        self.random.iter().filter(|r| r.e_bar < self.optimal.e_bar).count()
    }

    /// Ē_rel within the lowest decile of all designs of this budget.
    pub fn e_bar_in_lowest_decile(&self) -> bool {
        let total = self.random.len() + 1;
        (self.e_bar_rank() + 1) as f64 <= (0.1 * total as f64).ceil()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectivenessResult {
    pub budgets: Vec<BudgetResult>,
    pub prior_trace: f64,
}

pub struct DesignEvaluator<'p> {
    pb: &'p Problem,
    fresh: Vec<DataSample>,
    truth_d: Vec<f64>,
    map_opts: MapOptions,
    prior_trace: f64,
    parallel: bool,
}

impl<'p> DesignEvaluator<'p> {
    pub fn new(pb: &'p Problem, cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            pb,
            fresh: pb.evaluation_samples(cfg)?,
            truth_d: pb.truth_data(cfg.seed)?,
            map_opts: map_options(cfg),
            prior_trace: prior_trace_exact(&pb.prior),
            parallel: cfg.solver.parallel,
        })
    }

    pub fn prior_trace(&self) -> f64 {
        self.prior_trace
    }

    pub fn evaluate(&self, id: String, kind: &str, gamma: f64, w: &[f64]) -> Result<CloudRow> {
        let pb = self.pb;
        let sol = solve_map(&pb.model, &pb.prior, w, &self.truth_d, None, &self.map_opts)?;
        let e_rel = relative_error(pb.prior.mass(), &sol.m, &pb.truth)?;
        let ctx: HessianContext<'_> = sol.hessian(&pb.model, &pb.prior, w, HessianMode::GaussNewton)?;
        let trace = ctx.posterior_trace_gn_exact(self.prior_trace)?;
        let s = average_posterior_variance(
            &pb.model,
            &pb.prior,
            w,
            &self.fresh,
            &self.map_opts,
            self.prior_trace,
            self.parallel,
        )?;
        Ok(CloudRow {
            design_id: id,
            kind: kind.into(),
            gamma,
            n_active: count_active(w, 0.5),
            e_rel,
            trace,
            v_bar: s.v_bar,
            e_bar: s.e_bar,
        })
    }
}

/// Optimal designs for each γ against `n_random` random designs with the same number of
/// active sensors; writes `design_cloud.csv` after every evaluated design.
pub fn run_effectiveness_study(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<EffectivenessResult> {
    let pb = Problem::from_config(cfg)?;
    let samples = pb.training_samples(cfg)?;
    let probes = ProbeSet::generate(&pb.prior, cfg.oed.n_tr, cfg.seed)?;
    let ev = OedEvaluator::new(&pb.model, &pb.prior, &samples, &probes, cfg.solver.oed_options())?;
    let de = DesignEvaluator::new(&pb, cfg)?;
    let ns = pb.model.num_sensors();
    let mut rows: Vec<CloudRow> = Vec::new();
    let mut budgets = Vec::new();
    let flush = |rows: &[CloudRow]| -> Result<()> {
        if let Some(o) = out {
            let recs: Vec<Vec<String>> = rows.iter().map(CloudRow::to_record).collect();
            write_table(o.join("design_cloud.csv"), &schemas::CLOUD, &recs)?;
        }
        Ok(())
    };
    for (bi, &gamma) in cfg.oed.gammas.iter().enumerate() {
        ev.reset();
        let w0 = vec![cfg.outer.initial_weight; ns];
        let rec = solve_outer(&ev, &w0, &cfg.oed.penalty(gamma), &cfg.outer)?;
        if let Some(o) = out {
            write_outer_record(o, &format!("optimal_{bi}"), &pb.model, &rec)?;
        }
        let n_active = rec.w_binary.iter().filter(|&&x| x > 0.5).count();
        log::info!("γ = {gamma}: {n_active} active sensors after {} iterations", rec.total_iterations);
        let optimal = de.evaluate(format!("optimal_{bi}"), "optimal", gamma, &rec.w_binary)?;
        rows.push(optimal.clone());
        flush(&rows)?;
        let designs = random_designs(ns, cfg.oed.n_random, n_active, cfg.seed.wrapping_add(bi as u64))?;
        let mut random = Vec::with_capacity(designs.len());
        for (ri, w) in designs.iter().enumerate() {
            let row = de.evaluate(format!("random_{bi}_{ri}"), "random", gamma, w)?;
            rows.push(row.clone());
            random.push(row);
            flush(&rows)?;
        }
        budgets.push(BudgetResult {
            gamma,
            optimal,
            random,
            binary_gap: binary_gap(&rec.w),
            final_weights: rec.w,
            outer_iterations: rec.total_iterations,
        });
    }
    Ok(EffectivenessResult {
        budgets,
        prior_trace: de.prior_trace(),
    })
}

// ---------------------------------------------------------------------------------------------
// scaling

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Sweep {
    ParamDim,
    SensorDim,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub sweep: Sweep,
    pub n_params: usize,
    pub n_sensors: usize,
    pub inner_cg: u64,
    pub outer_cg: u64,
    pub outer_iterations: usize,
    pub newton_iterations: u64,
    pub forward_like_solves: u64,
    pub predicted_forward_like: u64,
}

impl ScalingRow {
    fn to_record(&self) -> Vec<String> {
        vec![
            match self.sweep {
                Sweep::ParamDim => "param".into(),
                Sweep::SensorDim => "sensor".into(),
            },
            self.n_params.to_string(),
            self.n_sensors.to_string(),
            self.inner_cg.to_string(),
            self.outer_cg.to_string(),
            self.outer_iterations.to_string(),
            self.newton_iterations.to_string(),
            self.forward_like_solves.to_string(),
            self.predicted_forward_like.to_string(),
        ]
    }
}

/// Largest over smallest value; 1 for constant or empty input.
pub fn spread(values: &[f64]) -> f64 {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || hi == lo {
        1.0
    } else {
        hi / lo
    }
}

fn scaling_point(cfg: &ExperimentConfig, sweep: Sweep, cells: usize, sensors: usize) -> Result<ScalingRow> {
    let sc = &cfg.scaling;
    let mut scenario = cfg.scenario.clone();
    scenario.nx = cells;
    scenario.ny = cells;
    scenario.sensors = SensorGrid::Count { count: sensors };
    let pb = Problem::build(&scenario, &cfg.prior, cfg.truth)?;
    let samples = generate_data_samples(&pb.prior, &pb.model, sc.n_d, cfg.seed)?;
    let probes = ProbeSet::generate(&pb.prior, sc.n_tr, cfg.seed)?;
    let ev = OedEvaluator::new(&pb.model, &pb.prior, &samples, &probes, cfg.solver.oed_options())?;
    let ns = pb.model.num_sensors();
    let e = ev.objective_and_gradient(&vec![1.0; ns])?;
    ev.reset();
    let spec = PenaltySpec {
        gamma: sc.gamma,
        epsilons: if sc.l1_only { vec![] } else { cfg.oed.epsilons.clone() },
    };
    let rec = solve_outer(&ev, &vec![cfg.outer.initial_weight; ns], &spec, &cfg.outer)?;
    log::info!(
        "scaling point n = {}, n_s = {ns}: inner {}, outer {}, quasi-Newton {}",
        pb.model.num_nodes(),
        e.counters.inner_cg_iters,
        e.counters.outer_cg_iters,
        rec.total_iterations
    );
    Ok(ScalingRow {
        sweep,
        n_params: pb.model.num_nodes(),
        n_sensors: ns,
        inner_cg: e.counters.inner_cg_iters,
        outer_cg: e.counters.outer_cg_iters,
        outer_iterations: rec.total_iterations,
        newton_iterations: e.counters.newton_iters,
        forward_like_solves: e.counters.forward_like_solves,
        predicted_forward_like: e.predicted_forward_like,
    })
}

pub fn run_scaling_study(cfg: &ExperimentConfig, sweep: Sweep, out: Option<&Path>) -> Result<Vec<ScalingRow>> {
    let sc = &cfg.scaling;
    let points: Vec<(usize, usize)> = match sweep {
        Sweep::ParamDim => sc.param_cells.iter().map(|&c| (c, sc.param_sweep_sensors)).collect(),
        Sweep::SensorDim => sc.sensor_counts.iter().map(|&s| (sc.sensor_sweep_cells, s)).collect(),
    };
    let mut rows = Vec::new();
    for (cells, sensors) in points {
        rows.push(scaling_point(cfg, sweep, cells, sensors)?);
        if let Some(o) = out {
            let name = match sweep {
                Sweep::ParamDim => "scaling_param.csv",
                Sweep::SensorDim => "scaling_sensor.csv",
            };
            let recs: Vec<Vec<String>> = rows.iter().map(ScalingRow::to_record).collect();
            write_table(o.join(name), &schemas::SCALING, &recs)?;
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------------------------
// derivative checks

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub suite: String,
    pub component: String,
    pub reference: f64,
    pub value: f64,
    pub rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(suite: &str, component: String, reference: f64, value: f64, rel_error: f64, tolerance: f64) -> Self {
        Self {
            suite: suite.into(),
            component,
            reference,
            value,
            rel_error,
            tolerance,
            pass: rel_error <= tolerance,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub rows: Vec<CheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn max_error(&self, suite: &str) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.suite == suite)
            .map(|r| r.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn suite_passed(&self, suite: &str) -> bool {
        self.rows.iter().filter(|r| r.suite == suite).all(|r| r.pass)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let recs: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.suite.clone(),
                    r.component.clone(),
                    fmt(r.reference),
                    fmt(r.value),
                    fmt(r.rel_error),
                    fmt(r.tolerance),
                    r.pass.to_string(),
                ]
            })
            .collect();
        write_table(path, &schemas::GRADCHECK, &recs)
    }
}

/// Tolerances of the derivative checks.
pub mod tolerances {
    pub const INNER_GRADIENT: f64 = 1e-5;
    pub const HESSIAN_FD: f64 = 1e-6;
    pub const HESSIAN_SYMMETRY: f64 = 1e-10;
    pub const HESSIAN_REDUCED: f64 = 1e-9;
    pub const OED_GRADIENT: f64 = 1e-4;
    pub const ADJOINT_IDENTITY: f64 = 1e-10;
}

/// Smooth deterministic test direction number `k` on the mesh nodes.
pub fn test_direction(nodes: &[[f64; 2]], k: usize) -> Vec<f64> {
    let a = 1.0 + k as f64;
    nodes
        .iter()
        .map(|x| (a * 2.1 * x[0] + 0.7).sin() * (a * 1.3 * x[1] - 0.4).cos() + 0.3 * (k as f64 - 1.0) * x[0] * x[1])
        .collect()
}

/// Coarse problem for the derivative checks: 16 × 16 cells (289 nodes).
pub fn gradcheck_problem(cfg: &ExperimentConfig, sensors: SensorGrid) -> Result<Problem> {
    let mut scenario = cfg.scenario.clone();
    scenario.nx = 16;
    scenario.ny = 16;
    scenario.sensors = sensors;
    Problem::build(&scenario, &cfg.prior, cfg.truth)
}

/// Inner-problem checks: gradient vs FD of J, Hessian vs FD of the gradient, symmetry and
/// sequential vs block-eliminated Hessian.
pub fn inner_checks(cfg: &ExperimentConfig) -> Result<Vec<CheckRow>> {
    let pb = gradcheck_problem(cfg, cfg.scenario.sensors)?;
    let model = &pb.model;
    let prior = &pb.prior;
    let nodes = model.mesh().nodes();
    let d = pb.truth_data(cfg.seed)?;
    let w: Vec<f64> = (0..model.num_sensors()).map(|j| 0.25 + 0.5 * ((j * 7) % 11) as f64 / 10.0).collect();
    let m: Vec<f64> = add(prior.mean(), &scaled(0.3, &test_direction(nodes, 5)));
    let mut rows = Vec::new();
    let g = eval_gradient(model, prior, &m, &w, &d)?;
    for k in 0..3 {
        let dir = test_direction(nodes, k);
        let an = dot(&g, &dir);
        let mut best = f64::INFINITY;
        let mut best_fd = f64::NAN;
        for h in [1e-3, 1e-4, 1e-5, 1e-6] {
            let jp = eval_cost(model, prior, &add(&m, &scaled(h, &dir)), &w, &d)?;
            let jm = eval_cost(model, prior, &add(&m, &scaled(-h, &dir)), &w, &d)?;
            let fd = (jp - jm) / (2.0 * h);
            let err = (fd - an).abs() / an.abs().max(f64::MIN_POSITIVE);
            if err < best {
                best = err;
                best_fd = fd;
            }
        }
        rows.push(CheckRow::new("inner_gradient", format!("direction {k}"), best_fd, an, best, tolerances::INNER_GRADIENT));
    }
    let (u, op) = model.solve_state_with(&m)?;
    let p = model.solve_adjoint(&op, &u, &w, &d)?;
    let ctx = HessianContext::new(model, prior, &m, &u, &p, &w, &op, HessianMode::Full)?;
    for k in 0..3 {
        let y = test_direction(nodes, k + 3);
        let hy = ctx.apply(&y)?;
        let mut best = f64::INFINITY;
        for h in [1e-3, 1e-4, 1e-5] {
            let gp = eval_gradient(model, prior, &add(&m, &scaled(h, &y)), &w, &d)?;
            let gm = eval_gradient(model, prior, &add(&m, &scaled(-h, &y)), &w, &d)?;
            let fd = scaled(0.5 / h, &sub(&gp, &gm));
            best = best.min(max_abs(&sub(&fd, &hy)) / max_abs(&hy));
        }
        rows.push(CheckRow::new("hessian_fd", format!("direction {k}"), 0.0, 0.0, best, tolerances::HESSIAN_FD));
    }
    for mode in [HessianMode::Full, HessianMode::GaussNewton] {
        let ctx = HessianContext::new(model, prior, &m, &u, &p, &w, &op, mode)?;
        let a = test_direction(nodes, 7);
        let b = test_direction(nodes, 8);
        let l = dot(&a, &ctx.apply(&b)?);
        let r = dot(&b, &ctx.apply(&a)?);
        rows.push(CheckRow::new(
            "hessian_symmetry",
            format!("{mode:?}"),
            l,
            r,
            (l - r).abs() / l.abs().max(r.abs()),
            tolerances::HESSIAN_SYMMETRY,
        ));
        let mut worst: f64 = 0.0;
        for k in 0..20 {
            let y = test_direction(nodes, 10 + k);
            let h1 = ctx.apply(&y)?;
            let h2 = ctx.reduced_apply(&y)?;
            worst = worst.max(max_abs(&sub(&h1, &h2)) / max_abs(&h1));
        }
        rows.push(CheckRow::new("hessian_reduced", format!("{mode:?}"), 0.0, 0.0, worst, tolerances::HESSIAN_REDUCED));
    }
    Ok(rows)
}

/// OED gradient vs central differences of Ψ̂ on a 3-sensor problem (n_d = 2, n_tr = 3).
pub fn oed_gradient_checks(cfg: &ExperimentConfig, mode: HessianMode, flip: bool) -> Result<Vec<CheckRow>> {
    let pb = gradcheck_problem(cfg, SensorGrid::Lattice { nx: 3, ny: 1 })?;
    let samples = generate_data_samples(&pb.prior, &pb.model, 2, cfg.seed)?;
    let probes = ProbeSet::generate(&pb.prior, 3, cfg.seed)?;
    let mut opts = OedOptions::tight(mode);
    opts.flip_variance_term = flip;
    opts.parallel = cfg.solver.parallel;
    let ev = OedEvaluator::new(&pb.model, &pb.prior, &samples, &probes, opts)?;
    let w = vec![0.35, 0.6, 0.85];
    let g = ev.objective_and_gradient(&w)?.grad.expect("gradient");
    let suite = if flip { "oed_gradient_mutated" } else { "oed_gradient" };
    let mut rows = Vec::new();
    for j in 0..w.len() {
        let mut best = f64::INFINITY;
        let mut best_fd = f64::NAN;
        for h in [1e-3, 1e-4, 1e-5] {
            let mut wp = w.clone();
            wp[j] += h;
            let mut wm = w.clone();
            wm[j] -= h;
            let fd = (ev.objective(&wp)?.psi_hat - ev.objective(&wm)?.psi_hat) / (2.0 * h);
            let err = (fd - g[j]).abs() / g[j].abs().max(f64::MIN_POSITIVE);
            if err < best {
                best = err;
                best_fd = fd;
            }
        }
        rows.push(CheckRow::new(suite, format!("{mode:?} sensor {j}"), best_fd, g[j], best, tolerances::OED_GRADIENT));
    }
    if !flip {
        let id = ev.adjoint_identity_check(&w)?;
        for (name, v) in [("q_hat", id.q_hat), ("v_hat", id.v_hat), ("gradient_forms", id.gradient_forms)] {
            rows.push(CheckRow::new("adjoint_identity", format!("{mode:?} {name}"), 0.0, v, v, tolerances::ADJOINT_IDENTITY));
        }
    }
    Ok(rows)
}

/// All derivative checks, plus the sign-mutation probe that must be detected.
pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<GradcheckReport> {
    let mut rows = inner_checks(cfg)?;
    for mode in [HessianMode::GaussNewton, HessianMode::Full] {
        rows.extend(oed_gradient_checks(cfg, mode, false)?);
    }
    let mutated = oed_gradient_checks(cfg, HessianMode::GaussNewton, true)?;
    let detected = mutated.iter().any(|r| !r.pass);
    let worst = mutated.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    rows.push(CheckRow {
        suite: "mutation".into(),
        component: "flipped variance-term sign detected".into(),
        reference: tolerances::OED_GRADIENT,
        value: worst,
        rel_error: worst,
        tolerance: tolerances::OED_GRADIENT,
        pass: detected,
    });
    Ok(GradcheckReport { rows })
}

// ---------------------------------------------------------------------------------------------
// δ limit

pub fn run_delta_check(seed: u64, out: Option<&Path>) -> Result<Vec<DeltaRow>> {
    let rows = default_delta_check(seed)?;
    if let Some(o) = out {
        let recs: Vec<Vec<String>> = rows
            .iter()
            .map(|r| vec![fmt(r.delta), fmt(r.trace_estimate), fmt(r.exact_trace)])
            .collect();
        write_table(o.join("delta_check.csv"), &schemas::DELTA, &recs)?;
    }
    Ok(rows)
}
