//! MAP point by inexact Newton-CG with Armijo backtracking.

use serde::{Deserialize, Serialize};

use crate::error::{OedError, Result};
use crate::forward::{ForwardModel, StateOperator};
use crate::hessian::{HessianContext, HessianMode};
use crate::krylov::{cg_solve, CgOptions, CgStatus, CgTag};
use crate::prior::PriorModel;
use crate::vecops::{add, dot, scaled};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MapOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_newton: usize,
    /// Newton iterations that use the Gauss–Newton Hessian before switching to the full one.
    pub gn_iterations: usize,
    pub cg_maxiter: usize,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    /// Reference gradient norm for the relative tolerance; the initial norm when absent.
    pub reference_grad_norm: Option<f64>,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 0.0,
            max_newton: 50,
            gn_iterations: 5,
            cg_maxiter: 500,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 25,
            reference_grad_norm: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NewtonRecord {
    pub iteration: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub cg_iterations: usize,
    pub step_length: f64,
    pub mode: HessianMode,
}

#[derive(Debug)]
pub struct MapSolution {
    pub m: Vec<f64>,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub op: StateOperator,
    pub cost: f64,
    pub grad_norm: f64,
    pub initial_grad_norm: f64,
    pub reference_grad_norm: f64,
    pub newton_iterations: usize,
    pub cg_iterations: usize,
    pub converged: bool,
    pub state_solves: usize,
    pub adjoint_solves: usize,
    pub history: Vec<NewtonRecord>,
}

/// Misfit-plus-prior cost J(m) with its state.
pub fn eval_cost(model: &ForwardModel, prior: &PriorModel, m: &[f64], w: &[f64], d: &[f64]) -> Result<f64> {
    model.check_design(w, d)?;
    let u = model.solve_state(m)?;
    Ok(cost_at_state(model, prior, m, &u, w, d))
}

fn cost_at_state(model: &ForwardModel, prior: &PriorModel, m: &[f64], u: &[f64], w: &[f64], d: &[f64]) -> f64 {
    let r: Vec<f64> = model.observe(u).iter().zip(d).map(|(a, b)| a - b).collect();
    0.5 * dot(&r, &model.weight_residual(w, &r)) + prior.cost(m)
}

/// R(m − m_pr) + C(u)ᵀ p
fn gradient_at(model: &ForwardModel, prior: &PriorModel, m: &[f64], u: &[f64], p: &[f64], op: &StateOperator) -> Vec<f64> {
    let space = model.space();
    let t: Vec<f64> = op.kappa().iter().zip(space.grad_dot(u, p)).map(|(k, g)| k * g).collect();
    add(&prior.gradient(m), &space.scatter_third(&t))
}

/// Gradient of J at m (one state and one adjoint solve).
pub fn eval_gradient(model: &ForwardModel, prior: &PriorModel, m: &[f64], w: &[f64], d: &[f64]) -> Result<Vec<f64>> {
    model.check_design(w, d)?;
    let (u, op) = model.solve_state_with(m)?;
    let p = model.solve_adjoint(&op, &u, w, d)?;
    Ok(gradient_at(model, prior, m, &u, &p, &op))
}

fn dual_norm(prior: &PriorModel, g: &[f64]) -> f64 {
    dot(g, &prior.apply_r_inv(g)).max(0.0).sqrt()
}

/// Minimizes J starting from `m0` (the prior mean when `None`).
pub fn solve_map(
    model: &ForwardModel,
    prior: &PriorModel,
    w: &[f64],
    d: &[f64],
    m0: Option<&[f64]>,
    opts: &MapOptions,
) -> Result<MapSolution> {
    model.check_design(w, d)?;
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(OedError::InvalidArgument("design weights must be finite and nonnegative".into()));
    }
    let mut m = m0.map(|v| v.to_vec()).unwrap_or_else(|| prior.mean().to_vec());
    if m.len() != model.num_nodes() {
        return Err(OedError::DimensionMismatch {
            what: "initial parameter",
            expected: model.num_nodes(),
            got: m.len(),
        });
    }
    let mut state_solves = 0;
    let mut adjoint_solves = 0;
    let (mut u, mut op) = model.solve_state_with(&m)?;
    state_solves += 1;
    let mut cost = cost_at_state(model, prior, &m, &u, w, d);
    let mut p = model.solve_adjoint(&op, &u, w, d)?;
    adjoint_solves += 1;
    let mut g = gradient_at(model, prior, &m, &u, &p, &op);
    let mut gnorm = dual_norm(prior, &g);
    let g0 = gnorm;
    let gref = opts.reference_grad_norm.unwrap_or(g0);
    let tol = opts.atol.max(opts.rtol * gref);
    let mut history = Vec::new();
    let mut cg_total = 0;
    let mut iters = 0;
    let mut converged = gnorm <= tol;
    while !converged && iters < opts.max_newton {
        let mode = if iters < opts.gn_iterations {
            HessianMode::GaussNewton
        } else {
            HessianMode::Full
        };
        let ctx = HessianContext::new(model, prior, &m, &u, &p, w, &op, mode)?;
        let eta = (gnorm / gref).sqrt().min(0.5);
        let cg_opts = CgOptions {
            rtol: eta,
            atol: 0.0,
            maxiter: opts.cg_maxiter,
        };
        let neg_g = scaled(-1.0, &g);
        let res = cg_solve(
            |x| ctx.apply(x),
            &neg_g,
            |r| Ok(prior.apply_r_inv(r)),
            &cg_opts,
            Some(model.counters()),
            CgTag::Inner,
        )?;
        cg_total += res.iterations;
        let mut dir = match res.status {
            CgStatus::NegativeCurvature { iteration: 0 } => prior.apply_r_inv(&neg_g),
            _ => res.x,
        };
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            dir = prior.apply_r_inv(&neg_g);
            slope = dot(&g, &dir);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let mt: Vec<f64> = m.iter().zip(&dir).map(|(a, b)| a + alpha * b).collect();
            // a trial coefficient too extreme to factor is a rejected step
            let (ut, opt) = match model.solve_state_with(&mt) {
                Ok(r) => r,
                Err(OedError::NotPositiveDefinite { .. }) => {
                    alpha *= opts.backtrack_factor;
                    continue;
                }
                Err(e) => return Err(e),
            };
            state_solves += 1;
            let ct = cost_at_state(model, prior, &mt, &ut, w, d);
            let armijo = ct <= cost + opts.armijo_c * alpha * slope;
            // predicted decrease below roundoff of J: accept a non-increasing step
            let roundoff = (opts.armijo_c * alpha * slope).abs() < 1e-13 * cost.abs() && ct <= cost * (1.0 + 1e-14);
            if ct.is_finite() && (armijo || roundoff) {
                accepted = Some((mt, ut, opt, ct));
                break;
            }
            alpha *= opts.backtrack_factor;
        }
        let Some((mt, ut, opt, ct)) = accepted else {
            log::warn!("line search failed at Newton iteration {iters}, gradient norm {gnorm:.3e}");
            break;
        };
        m = mt;
        u = ut;
        op = opt;
        cost = ct;
        p = model.solve_adjoint(&op, &u, w, d)?;
        adjoint_solves += 1;
        g = gradient_at(model, prior, &m, &u, &p, &op);
        gnorm = dual_norm(prior, &g);
        iters += 1;
        history.push(NewtonRecord {
            iteration: iters,
            cost,
            grad_norm: gnorm,
            cg_iterations: res.iterations,
            step_length: alpha,
            mode,
        });
        converged = gnorm <= tol;
    }
    model.counters().record_newton(iters);
    Ok(MapSolution {
        m,
        u,
        p,
        op,
        cost,
        grad_norm: gnorm,
        initial_grad_norm: g0,
        reference_grad_norm: gref,
        newton_iterations: iters,
        cg_iterations: cg_total,
        converged,
        state_solves,
        adjoint_solves,
        history,
    })
}

impl MapSolution {
    pub fn hessian<'a>(
        &'a self,
        model: &'a ForwardModel,
        prior: &'a PriorModel,
        w: &'a [f64],
        mode: HessianMode,
    ) -> Result<HessianContext<'a>> {
        HessianContext::new(model, prior, &self.m, &self.u, &self.p, w, &self.op, mode)
    }
}
