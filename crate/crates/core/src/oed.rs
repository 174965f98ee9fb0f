//! A-optimal design objective Ψ̂(w) = (1/(n_d n_tr)) Σ_i Σ_k ⟨z_k, H_i⁻¹ M z_k⟩ and its
//! adjoint gradient with respect to the design weights.

use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OedError, Result};
use crate::forward::{DataSample, ForwardModel};
use crate::hessian::{HessianContext, HessianMode};
use crate::krylov::{CgOptions, CgTag, CounterSnapshot, SolveKind};
use crate::map::{solve_map, MapOptions, MapSolution};
use crate::prior::{relative_error, PriorModel};
use crate::trace::ProbeSet;
use crate::vecops::{dot, max_abs, sub};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OedOptions {
    pub mode: HessianMode,
    pub map: MapOptions,
    pub hessian_cg: CgOptions,
    pub warm_start: bool,
    pub parallel: bool,
    /// Flips the sign of the variance term of the gradient; only for mutation checks.
    #[serde(skip)]
    #[doc(hidden)]
    pub flip_variance_term: bool,
}

impl Default for OedOptions {
    fn default() -> Self {
        Self {
            mode: HessianMode::GaussNewton,
            map: MapOptions::default(),
            hessian_cg: CgOptions {
                rtol: 1e-8,
                atol: 0.0,
                maxiter: 500,
            },
            warm_start: true,
            parallel: true,
            flip_variance_term: false,
        }
    }
}

impl OedOptions {
    /// Inner tolerances tight enough for finite-difference checks of Ψ̂′.
    pub fn tight(mode: HessianMode) -> Self {
        let mut o = Self {
            mode,
            ..Self::default()
        };
        o.map.rtol = 1e-12;
        o.map.atol = 1e-14;
        o.hessian_cg.rtol = 1e-12;
        o
    }
}

/// Fields of one data sample at the current design.
#[derive(Debug)]
pub struct SampleState {
    pub map: MapSolution,
    pub y: Vec<Vec<f64>>,
    pub psi: f64,
    pub hessian_cg_iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct OedEval {
    pub psi_hat: f64,
    pub grad: Option<Vec<f64>>,
    pub map_converged: Vec<bool>,
    pub reliable: bool,
    pub newton_iterations: usize,
    pub counters: CounterSnapshot,
    /// Forward-like solves implied by the algorithm structure for this call.
    pub predicted_forward_like: u64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct IdentityCheck {
    /// max_k ‖q̂_k + c v_k‖ / ‖c v_k‖ with q̂_k solved from its own equation.
    pub q_hat: f64,
    /// max_k ‖v̂_k + c q_k‖ / ‖c q_k‖.
    pub v_hat: f64,
    /// Relative gap between the variance term assembled from v and from q̂.
    pub gradient_forms: f64,
}

#[derive(Default)]
struct EvalCache {
    warm: Vec<Option<Vec<f64>>>,
    reference: Vec<Option<f64>>,
    retained: Option<(Vec<f64>, Vec<SampleState>)>,
}

/// Ψ̂ and Ψ̂′ with frozen data samples and probes.
pub struct OedEvaluator<'a> {
    model: &'a ForwardModel,
    prior: &'a PriorModel,
    samples: &'a [DataSample],
    probes: &'a ProbeSet,
    opts: OedOptions,
    cache: Mutex<EvalCache>,
}

impl<'a> OedEvaluator<'a> {
    pub fn new(
        model: &'a ForwardModel,
        prior: &'a PriorModel,
        samples: &'a [DataSample],
        probes: &'a ProbeSet,
        opts: OedOptions,
    ) -> Result<Self> {
        if samples.is_empty() || probes.is_empty() {
            return Err(OedError::InvalidArgument("need data samples and probes".into()));
        }
        for s in samples {
            if s.d.len() != model.num_sensors() {
                return Err(OedError::DimensionMismatch {
                    what: "data sample",
                    expected: model.num_sensors(),
                    got: s.d.len(),
                });
            }
        }
        let cache = EvalCache {
            warm: vec![None; samples.len()],
            reference: vec![None; samples.len()],
            retained: None,
        };
        Ok(Self {
            model,
            prior,
            samples,
            probes,
            opts,
            cache: Mutex::new(cache),
        })
    }

    pub fn model(&self) -> &ForwardModel {
        self.model
    }

    pub fn prior(&self) -> &PriorModel {
        self.prior
    }

    pub fn options(&self) -> &OedOptions {
        &self.opts
    }

    pub fn num_sensors(&self) -> usize {
        self.model.num_sensors()
    }

    fn scale(&self) -> f64 {
        1.0 / (self.samples.len() * self.probes.len()) as f64
    }

    fn check_w(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.num_sensors() {
            return Err(OedError::DimensionMismatch {
                what: "design weights",
                expected: self.num_sensors(),
                got: w.len(),
            });
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(OedError::InvalidArgument("design weights must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Forgets warm starts and retained fields.
    pub fn reset(&self) {
        let mut c = self.cache.lock().expect("cache lock");
        c.warm.iter_mut().for_each(|x| *x = None);
        c.reference.iter_mut().for_each(|x| *x = None);
        c.retained = None;
    }

    fn solve_samples(&self, w: &[f64]) -> Result<Vec<SampleState>> {
        let (warm, reference) = {
            let c = self.cache.lock().expect("cache lock");
            (c.warm.clone(), c.reference.clone())
        };
        let run = |i: usize| -> Result<SampleState> {
            let mut mo = self.opts.map.clone();
            let m0 = if self.opts.warm_start { warm[i].as_deref() } else { None };
            if self.opts.warm_start {
                mo.reference_grad_norm = reference[i];
            }
            let map = solve_map(self.model, self.prior, w, &self.samples[i].d, m0, &mo)?;
            if !map.converged {
                log::warn!(
                    "MAP for sample {i} stopped after {} iterations at gradient norm {:.3e}",
                    map.newton_iterations,
                    map.grad_norm
                );
            }
            let ctx = map.hessian(self.model, self.prior, w, self.opts.mode)?;
            let mut y = Vec::with_capacity(self.probes.len());
            let mut psi = 0.0;
            let mut iters = 0;
            for z in &self.probes.probes {
                let mz = self.prior.mass().matvec(z);
                let res = ctx.solve_cg(&mz, &self.opts.hessian_cg, CgTag::Outer)?;
                iters += res.iterations;
                psi += dot(&mz, &res.x);
                y.push(res.x);
            }
            drop(ctx);
            Ok(SampleState {
                map,
                y,
                psi,
                hessian_cg_iterations: iters,
            })
        };
        let n = self.samples.len();
        let states: Vec<SampleState> = if self.opts.parallel {
            (0..n).into_par_iter().map(run).collect::<Result<_>>()?
        } else {
            (0..n).map(run).collect::<Result<_>>()?
        };
        let mut c = self.cache.lock().expect("cache lock");
        for (i, s) in states.iter().enumerate() {
            c.warm[i] = Some(s.map.m.clone());
            if c.reference[i].is_none() {
                c.reference[i] = Some(s.map.initial_grad_norm);
            }
        }
        Ok(states)
    }

    fn summarize(&self, states: &[SampleState], before: CounterSnapshot) -> OedEval {
        let c = self.scale();
        let after = self.model.counters().snapshot();
        let map_converged: Vec<bool> = states.iter().map(|s| s.map.converged).collect();
        let predicted: u64 = states
            .iter()
            .map(|s| (s.map.state_solves + s.map.adjoint_solves + 2 * s.map.cg_iterations + 2 * s.hessian_cg_iterations) as u64)
            .sum();
        OedEval {
            psi_hat: c * states.iter().map(|s| s.psi).sum::<f64>(),
            grad: None,
            reliable: map_converged.iter().all(|&b| b),
            map_converged,
            newton_iterations: states.iter().map(|s| s.map.newton_iterations).sum(),
            counters: after - before,
            predicted_forward_like: predicted,
        }
    }

    /// Ψ̂(w); retains the fields needed by a following gradient call at the same w.
    pub fn objective(&self, w: &[f64]) -> Result<OedEval> {
        self.check_w(w)?;
        let before = self.model.counters().snapshot();
        let states = self.solve_samples(w)?;
        let eval = self.summarize(&states, before);
        self.cache.lock().expect("cache lock").retained = Some((w.to_vec(), states));
        Ok(eval)
    }

    /// Ψ̂(w) and Ψ̂′(w).
    pub fn objective_and_gradient(&self, w: &[f64]) -> Result<OedEval> {
        self.check_w(w)?;
        let before = self.model.counters().snapshot();
        let retained = {
            let mut c = self.cache.lock().expect("cache lock");
            match c.retained.take() {
                Some((rw, st)) if rw == w => Some(st),
                other => {
                    c.retained = other;
                    None
                }
            }
        };
        let (states, base_before) = match retained {
            Some(st) => (st, None),
            None => (self.solve_samples(w)?, Some(before)),
        };
        let grad_before = self.model.counters().snapshot();
        let parts: Vec<(Vec<f64>, u64)> = if self.opts.parallel {
            states
                .par_iter()
                .enumerate()
                .map(|(i, s)| self.sample_gradient(i, s, w))
                .collect::<Result<_>>()?
        } else {
            states
                .iter()
                .enumerate()
                .map(|(i, s)| self.sample_gradient(i, s, w))
                .collect::<Result<_>>()?
        };
        let mut grad = vec![0.0; w.len()];
        let mut predicted = 0;
        for (g, p) in &parts {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
            predicted += p;
        }
        let mut eval = self.summarize(&states, base_before.unwrap_or(grad_before));
        if base_before.is_none() {
            eval.predicted_forward_like = 0;
        }
        eval.predicted_forward_like += predicted;
        eval.counters = self.model.counters().snapshot() - base_before.unwrap_or(grad_before);
        eval.grad = Some(grad);
        self.cache.lock().expect("cache lock").retained = Some((w.to_vec(), states));
        Ok(eval)
    }

    /// Gradient contribution of one sample and the forward-like solves it predicts.
    fn sample_gradient(&self, i: usize, s: &SampleState, w: &[f64]) -> Result<(Vec<f64>, u64)> {
        let model = self.model;
        let space = model.space();
        let dofs = model.dofs();
        let full = self.opts.mode == HessianMode::Full;
        let c = self.scale();
        let map = &s.map;
        let (u, p) = (&map.u, &map.p);
        let kappa = map.op.kappa();
        let ne = kappa.len();
        let ctx = map.hessian(model, self.prior, w, self.opts.mode)?;
        let n = model.num_nodes();
        let ns = model.num_sensors();
        let sig = model.sigma();
        let mut b1 = vec![0.0; n];
        let mut b3 = vec![0.0; n];
        let mut b2_elem = vec![0.0; ne];
        let mut variance = vec![0.0; ns];
        let mut solves = 0u64;
        for y in &s.y {
            let inc = ctx.apply_with_incrementals(y)?;
            solves += 2;
            let (v, q) = (&inc.v, &inc.q);
            let ybar = space.centroid_mean(y);
            let ky: Vec<f64> = (0..ne).map(|e| kappa[e] * ybar[e]).collect();
            let kyy: Vec<f64> = (0..ne).map(|e| ky[e] * ybar[e]).collect();
            let gvq = space.grad_dot(v, q);
            let guq = space.grad_dot(u, q);
            for e in 0..ne {
                b2_elem[e] += c * kappa[e] * (2.0 * gvq[e] + 2.0 * ybar[e] * guq[e]);
            }
            for (a, x) in b1.iter_mut().zip(space.stiffness_apply(&ky, q)) {
                *a += 2.0 * c * x;
            }
            if full {
                let gvp = space.grad_dot(v, p);
                let gup = space.grad_dot(u, p);
                for e in 0..ne {
                    b2_elem[e] += c * kappa[e] * ybar[e] * (2.0 * gvp[e] + ybar[e] * gup[e]);
                }
                for (a, x) in b1.iter_mut().zip(space.stiffness_apply(&kyy, p)) {
                    *a += c * x;
                }
                let cv = space.stiffness_apply(&ky, v);
                let eu = space.stiffness_apply(&kyy, u);
                for k in 0..n {
                    b3[k] += c * (2.0 * cv[k] + eu[k]);
                }
            }
            let bv = model.observe(v);
            for j in 0..ns {
                variance[j] += c * bv[j] * bv[j] / (sig[j] * sig[j]);
            }
        }
        let solve = |rhs: &[f64]| map.op.solve(rhs, SolveKind::Adjoint, model.counters());
        // Cᵀ x = ⟨(·) e^m ∇u, ∇x⟩ for x ∈ V₀
        let ct = |a: &[f64], x: &[f64]| -> Vec<f64> {
            let g = space.grad_dot(a, x);
            space.scatter_third(&(0..ne).map(|e| kappa[e] * g[e]).collect::<Vec<_>>())
        };
        let mut bbar = space.scatter_third(&b2_elem);
        let t1 = dofs.extend(&solve(&dofs.restrict(&b1)));
        solves += 1;
        for (a, x) in bbar.iter_mut().zip(ct(u, &t1)) {
            *a -= x;
        }
        let b3f = dofs.restrict(&b3);
        if full {
            let t3 = dofs.extend(&solve(&b3f));
            let s3 = dofs.extend(&solve(&model.apply_misfit_block(w, &t3)));
            solves += 2;
            for ((a, x), z) in bbar.iter_mut().zip(ct(p, &t3)).zip(ct(u, &s3)) {
                *a += z - x;
            }
        }
        let full_ctx = map.hessian(model, self.prior, w, HessianMode::Full)?;
        let res = full_ctx.solve_cg(&bbar, &self.opts.hessian_cg, CgTag::Outer)?;
        let m_hat = res.x;
        let mbar = space.centroid_mean(&m_hat);
        let km: Vec<f64> = (0..ne).map(|e| kappa[e] * mbar[e]).collect();
        let cm = space.stiffness_apply(&km, u);
        let rhs: Vec<f64> = dofs.free().iter().zip(&b3f).map(|(&k, b)| b - cm[k]).collect();
        let p_hat = dofs.extend(&solve(&rhs));
        solves += 1;
        let resid: Vec<f64> = model.observe(u).iter().zip(&self.samples[i].d).map(|(a, b)| a - b).collect();
        let bp = model.observe(&p_hat);
        let sign = if self.opts.flip_variance_term { 1.0 } else { -1.0 };
        let grad: Vec<f64> = (0..ns)
            .map(|j| resid[j] * bp[j] / (sig[j] * sig[j]) + sign * variance[j])
            .collect();
        Ok((grad, solves + 2 * res.iterations as u64))
    }

    /// Checks q̂ = −c v, v̂ = −c q against their own equations at design w.
    pub fn adjoint_identity_check(&self, w: &[f64]) -> Result<IdentityCheck> {
        self.check_w(w)?;
        let states = self.solve_samples(w)?;
        let model = self.model;
        let space = model.space();
        let dofs = model.dofs();
        let c = self.scale();
        let full = self.opts.mode == HessianMode::Full;
        let sig = model.sigma();
        let mut out = IdentityCheck {
            q_hat: 0.0,
            v_hat: 0.0,
            gradient_forms: 0.0,
        };
        for s in &states {
            let map = &s.map;
            let kappa = map.op.kappa();
            let ctx = map.hessian(model, self.prior, w, self.opts.mode)?;
            let mut var_v = vec![0.0; w.len()];
            let mut var_q = vec![0.0; w.len()];
            for y in &s.y {
                let inc = ctx.apply_with_incrementals(y)?;
                let yhat: Vec<f64> = y.iter().map(|x| -c * x).collect();
                let yb = space.centroid_mean(&yhat);
                let ky: Vec<f64> = kappa.iter().zip(&yb).map(|(k, b)| k * b).collect();
                // A q̂ + C ŷ = 0
                let cy = space.stiffness_apply(&ky, &map.u);
                let rhs: Vec<f64> = dofs.free().iter().map(|&k| -cy[k]).collect();
                let q_hat = dofs.extend(&map.op.solve(&rhs, SolveKind::Adjoint, model.counters()));
                // A v̂ + D q̂ + Sᵀ ŷ = 0
                let mut rhs = model.apply_misfit_block(w, &q_hat);
                if full {
                    let sy = space.stiffness_apply(&ky, &map.p);
                    for (r, &k) in rhs.iter_mut().zip(dofs.free()) {
                        *r += sy[k];
                    }
                }
                rhs.iter_mut().for_each(|r| *r = -*r);
                let v_hat = dofs.extend(&map.op.solve(&rhs, SolveKind::Adjoint, model.counters()));
                let cv: Vec<f64> = inc.v.iter().map(|x| -c * x).collect();
                let cq: Vec<f64> = inc.q.iter().map(|x| -c * x).collect();
                out.q_hat = out.q_hat.max(max_abs(&sub(&q_hat, &cv)) / max_abs(&cv).max(f64::MIN_POSITIVE));
                out.v_hat = out.v_hat.max(max_abs(&sub(&v_hat, &cq)) / max_abs(&cq).max(f64::MIN_POSITIVE));
                let bv = model.observe(&inc.v);
                let bq = model.observe(&q_hat);
                for j in 0..w.len() {
                    var_v[j] += c * bv[j] * bv[j] / (sig[j] * sig[j]);
                    var_q[j] -= bv[j] * bq[j] / (sig[j] * sig[j]);
                }
            }
            out.gradient_forms = out
                .gradient_forms
                .max(max_abs(&sub(&var_v, &var_q)) / max_abs(&var_v).max(f64::MIN_POSITIVE));
        }
        Ok(out)
    }
}

/// Expected average posterior variance and MAP error over fresh data samples.
#[derive(Debug, Clone, Serialize)]
pub struct PosteriorSummary {
    pub v_bar: f64,
    pub e_bar: f64,
    pub traces: Vec<f64>,
    pub errors: Vec<f64>,
    pub converged: bool,
}

/// V̄(w) = mean_i tr(H_GN⁻¹ M) at m_MAP(w; d'_i) and Ē_rel against the generating fields.
/// The traces are exact (sensor-space Woodbury form).
pub fn average_posterior_variance(
    model: &ForwardModel,
    prior: &PriorModel,
    w: &[f64],
    fresh: &[DataSample],
    map_opts: &MapOptions,
    prior_trace: f64,
    parallel: bool,
) -> Result<PosteriorSummary> {
    if fresh.is_empty() {
        return Err(OedError::InvalidArgument("need evaluation samples".into()));
    }
    let run = |s: &DataSample| -> Result<(f64, f64, bool)> {
        let map = solve_map(model, prior, w, &s.d, None, map_opts)?;
        let ctx: HessianContext<'_> = map.hessian(model, prior, w, HessianMode::GaussNewton)?;
        let tr = ctx.posterior_trace_gn_exact(prior_trace)?;
        let err = relative_error(prior.mass(), &map.m, &s.m)?;
        Ok((tr, err, map.converged))
    };
    let rows: Vec<(f64, f64, bool)> = if parallel {
        fresh.par_iter().map(run).collect::<Result<_>>()?
    } else {
        fresh.iter().map(run).collect::<Result<_>>()?
    };
    let k = rows.len() as f64;
    Ok(PosteriorSummary {
        v_bar: rows.iter().map(|r| r.0).sum::<f64>() / k,
        e_bar: rows.iter().map(|r| r.1).sum::<f64>() / k,
        traces: rows.iter().map(|r| r.0).collect(),
        errors: rows.iter().map(|r| r.1).collect(),
        converged: rows.iter().all(|r| r.2),
    })
}
