//! Hessian of the MAP cost at a linearization point (m, u, p).
//!
//! With A = K_FF(m), C = ∂(K u)/∂m on free rows, S = (∂(K p)/∂m)ᵀ, D = Bᵀ W_σ B on free dofs
//! and Q = R + ∂²⟨e^m∇u, ∇p⟩/∂m², the Hessian is
//! H = Cᵀ A⁻ᵀ (D A⁻¹ C − Sᵀ) − S A⁻¹ C + Q. Gauss–Newton mode drops every term carrying p.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{OedError, Result};
use crate::forward::{ForwardModel, StateOperator};
use crate::krylov::{cg_solve, CgOptions, CgResult, CgStatus, CgTag, SolveKind};
use crate::prior::{CovarianceAction, PriorModel};
use crate::sparse::SparseOperator;
use crate::vecops::{add, dot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    Full,
    GaussNewton,
}

/// Assembled blocks of the linearized optimality system.
#[derive(Debug, Clone)]
pub struct CouplingBlocks {
    /// n_F × n: C y = ∂(K u)/∂m · y on free rows.
    pub c: SparseOperator,
    /// n × n_F: S v = (∂(K p)/∂m)ᵀ v; zero in Gauss–Newton mode.
    pub s: SparseOperator,
    /// n × n: second parameter derivative of ⟨e^m∇u, ∇p⟩; zero in Gauss–Newton mode.
    pub q_pde: SparseOperator,
    /// n_F × n_F: Bᵀ W_σ B on free dofs.
    pub d: SparseOperator,
}

pub struct HessianContext<'a> {
    model: &'a ForwardModel,
    prior: &'a PriorModel,
    m: &'a [f64],
    u: &'a [f64],
    p: &'a [f64],
    w: &'a [f64],
    op: &'a StateOperator,
    mode: HessianMode,
    blocks: OnceLock<CouplingBlocks>,
}

/// Incremental fields produced by one Hessian application.
#[derive(Debug, Clone)]
pub struct Incrementals {
    pub hy: Vec<f64>,
    pub v: Vec<f64>,
    pub q: Vec<f64>,
}

impl<'a> HessianContext<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'a ForwardModel,
        prior: &'a PriorModel,
        m: &'a [f64],
        u: &'a [f64],
        p: &'a [f64],
        w: &'a [f64],
        op: &'a StateOperator,
        mode: HessianMode,
    ) -> Result<Self> {
        let n = model.num_nodes();
        for (what, f) in [("parameter", m), ("state", u), ("adjoint", p)] {
            if f.len() != n {
                return Err(OedError::DimensionMismatch {
                    what: match what {
                        "parameter" => "linearization parameter",
                        "state" => "linearization state",
                        _ => "linearization adjoint",
                    },
                    expected: n,
                    got: f.len(),
                });
            }
        }
        if w.len() != model.num_sensors() {
            return Err(OedError::DimensionMismatch {
                what: "design weights",
                expected: model.num_sensors(),
                got: w.len(),
            });
        }
        Ok(Self {
            model,
            prior,
            m,
            u,
            p,
            w,
            op,
            mode,
            blocks: OnceLock::new(),
        })
    }

    pub fn mode(&self) -> HessianMode {
        self.mode
    }

    pub fn model(&self) -> &ForwardModel {
        self.model
    }

    pub fn prior(&self) -> &PriorModel {
        self.prior
    }

    pub fn state_operator(&self) -> &StateOperator {
        self.op
    }

    pub fn weights(&self) -> &[f64] {
        self.w
    }

    pub fn dim(&self) -> usize {
        self.model.num_nodes()
    }

    fn full(&self) -> bool {
        self.mode == HessianMode::Full
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.op.solve(rhs, SolveKind::Incremental, self.model.counters())
    }

    /// Hessian action through the incremental state and adjoint equations (two solves).
    pub fn apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.apply_with_incrementals(y)?.hy)
    }

    pub fn apply_with_incrementals(&self, y: &[f64]) -> Result<Incrementals> {
        let space = self.model.space();
        let dofs = self.model.dofs();
        let kappa = self.op.kappa();
        let ybar = space.centroid_mean(y);
        let ky: Vec<f64> = kappa.iter().zip(&ybar).map(|(k, yb)| k * yb).collect();
        // incremental state: K v + ⟨y e^m ∇u, ∇·⟩ = 0
        let cy = space.stiffness_apply(&ky, self.u);
        let rhs_v: Vec<f64> = dofs.free().iter().map(|&k| -cy[k]).collect();
        let v = dofs.extend(&self.solve(&rhs_v));
        // incremental adjoint: K q + D v + ⟨y e^m ∇·, ∇p⟩ = 0
        let mut rhs_q = self.model.apply_misfit_block(self.w, &v);
        if self.full() {
            let sy = space.stiffness_apply(&ky, self.p);
            for (r, &k) in rhs_q.iter_mut().zip(dofs.free()) {
                *r += sy[k];
            }
        }
        rhs_q.iter_mut().for_each(|r| *r = -*r);
        let q = dofs.extend(&self.solve(&rhs_q));
        // ⟨ỹ e^m ∇u, ∇q⟩ + R y (+ ⟨ỹ e^m ∇v, ∇p⟩ + ⟨ỹ y e^m ∇u, ∇p⟩)
        let kq: Vec<f64> = kappa.iter().zip(space.grad_dot(self.u, &q)).map(|(k, g)| k * g).collect();
        let mut hy = add(&space.scatter_third(&kq), &self.prior.apply_r(y));
        if self.full() {
            let gvp = space.grad_dot(&v, self.p);
            let gup = space.grad_dot(self.u, self.p);
            let t: Vec<f64> = (0..kappa.len())
                .map(|e| kappa[e] * (gvp[e] + ybar[e] * gup[e]))
                .collect();
            for (h, x) in hy.iter_mut().zip(space.scatter_third(&t)) {
                *h += x;
            }
        }
        Ok(Incrementals { hy, v, q })
    }

    /// Assembles (once) the blocks C, S, Q, D.
    pub fn blocks(&self) -> Result<&CouplingBlocks> {
        if let Some(b) = self.blocks.get() {
            return Ok(b);
        }
        let space = self.model.space();
        let dofs = self.model.dofs();
        let n = self.dim();
        let nf = dofs.num_free();
        let c = dofs.free_rows(&space.coupling_matrix(self.u, self.m)?);
        let (s, q_pde) = if self.full() {
            (
                dofs.free_rows(&space.coupling_matrix(self.p, self.m)?).transpose(),
                space.second_derivative_matrix(self.u, self.p, self.m)?,
            )
        } else {
            (
                SparseOperator::from_triplets(n, nf, &[], false)?,
                SparseOperator::from_triplets(n, n, &[], true)?,
            )
        };
        let d = misfit_block_matrix(self.model, self.w)?;
        let _ = self.blocks.set(CouplingBlocks { c, s, q_pde, d });
        Ok(self.blocks.get().expect("blocks just set"))
    }

    /// Hessian action by block elimination of the assembled system (two solves).
    pub fn reduced_apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        let b = self.blocks()?;
        let t = self.solve(&b.c.matvec(y));
        let mut s = b.d.matvec(&t);
        for (si, x) in s.iter_mut().zip(b.s.matvec_transpose(y)) {
            *si -= x;
        }
        let r = self.solve(&s);
        let mut hy = b.c.matvec_transpose(&r);
        for (h, x) in hy.iter_mut().zip(b.s.matvec(&t)) {
            *h -= x;
        }
        for (h, x) in hy.iter_mut().zip(b.q_pde.matvec(y)) {
            *h += x;
        }
        for (h, x) in hy.iter_mut().zip(self.prior.apply_r(y)) {
            *h += x;
        }
        Ok(hy)
    }

    /// Prior-preconditioned CG for H y = z. Negative curvature is an error.
    pub fn solve_cg(&self, z: &[f64], opts: &CgOptions, tag: CgTag) -> Result<CgResult> {
        let res = cg_solve(
            |x| self.apply(x),
            z,
            |r| Ok(self.prior.apply_r_inv(r)),
            opts,
            Some(self.model.counters()),
            tag,
        )?;
        if let CgStatus::NegativeCurvature { iteration } = res.status {
            return Err(OedError::NegativeCurvature { iteration });
        }
        Ok(res)
    }

    /// Dense Hessian by columns; refused above `threshold` unknowns.
    pub fn dense(&self, threshold: usize) -> Result<DMatrix<f64>> {
        let n = self.dim();
        if n > threshold {
            return Err(OedError::DenseThresholdExceeded { n, threshold });
        }
        let mut h = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.apply(&e)?;
            e[j] = 0.0;
            for i in 0..n {
                h[(i, j)] = col[i];
            }
        }
        Ok(h)
    }

    /// Exact tr(H⁻¹ M) from the dense Hessian (symmetrized).
    pub fn posterior_trace_dense(&self, threshold: usize) -> Result<f64> {
        let h = self.dense(threshold)?;
        let h = (&h + h.transpose()) * 0.5;
        let n = self.dim();
        let chol = h.cholesky().ok_or(OedError::NotPositiveDefinite {
            pivot: 0,
            value: f64::NAN,
        })?;
        let mdense = DMatrix::from_fn(n, n, |i, j| self.prior.mass().get(i, j));
        let x = chol.solve(&mdense);
        Ok(x.trace())
    }

    /// Exact tr(H_GN⁻¹ M) through the sensor-space Woodbury identity
    /// H⁻¹ = R⁻¹ − R⁻¹Gᵀ(W⁻¹ + G R⁻¹ Gᵀ)⁻¹ G R⁻¹, G = B A⁻¹ C restricted to active sensors.
    /// Costs one solve per active sensor plus the (cached) prior trace.
    pub fn posterior_trace_gn_exact(&self, prior_trace: f64) -> Result<f64> {
        let model = self.model;
        let dofs = model.dofs();
        let active: Vec<usize> = (0..self.w.len()).filter(|&j| self.w[j] > 0.0).collect();
        if active.is_empty() {
            return Ok(prior_trace);
        }
        let b = self.blocks()?;
        let obs = model.observation();
        let k = active.len();
        let mut x_cols: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut g_rows: Vec<Vec<f64>> = Vec::with_capacity(k);
        for &j in &active {
            let mut bj = vec![0.0; model.num_nodes()];
            for (c, v) in obs.row(j) {
                bj[c] = v;
            }
            let t = self.solve(&dofs.restrict(&bj));
            let g = b.c.matvec_transpose(&t);
            x_cols.push(self.prior.apply_r_inv(&g));
            g_rows.push(g);
        }
        let sig = model.sigma();
        let s = DMatrix::from_fn(k, k, |a, c| {
            let base = dot(&g_rows[a], &x_cols[c]);
            if a == c {
                base + sig[active[a]].powi(2) / self.w[active[a]]
            } else {
                base
            }
        });
        let mx: Vec<Vec<f64>> = x_cols.iter().map(|x| self.prior.mass().matvec(x)).collect();
        let t = DMatrix::from_fn(k, k, |a, c| dot(&x_cols[a], &mx[c]));
        let s = (&s + s.transpose()) * 0.5;
        let chol = s.cholesky().ok_or(OedError::NotPositiveDefinite {
            pivot: 0,
            value: f64::NAN,
        })?;
        let corr = chol.solve(&t).trace();
        Ok(prior_trace - corr)
    }
}

/// Bᵀ diag(w_j/σ_j²) B restricted to free dofs.
pub fn misfit_block_matrix(model: &ForwardModel, w: &[f64]) -> Result<SparseOperator> {
    let dofs = model.dofs();
    let obs = model.observation();
    let sig = model.sigma();
    let mut trip = Vec::new();
    for j in 0..obs.nrows() {
        let wj = w[j] / (sig[j] * sig[j]);
        if wj == 0.0 {
            continue;
        }
        let row: Vec<(usize, f64)> = obs
            .row(j)
            .filter_map(|(c, v)| dofs.positions()[c].map(|cf| (cf, v)))
            .collect();
        for &(a, va) in &row {
            for &(b, vb) in &row {
                trip.push((a, b, wj * va * vb));
            }
        }
    }
    let nf = dofs.num_free();
    SparseOperator::from_triplets(nf, nf, &trip, true)
}

/// Posterior covariance H_GN⁻¹ as a covariance action, for variance fields.
pub struct GnPosterior<'c, 'a> {
    pub ctx: &'c HessianContext<'a>,
    pub cg: CgOptions,
}

impl CovarianceAction for GnPosterior<'_, '_> {
    fn dim(&self) -> usize {
        self.ctx.dim()
    }

    fn apply_covariance(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.ctx.solve_cg(v, &self.cg, CgTag::Untracked)?.x)
    }

    /// x = H⁻¹(L L_M⁻ᵀ ν₁ + Cᵀ A⁻¹ Bᵀ W^{1/2} ν₂) has covariance H⁻¹.
    fn sample_centered(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Vec<f64>> {
        let ctx = self.ctx;
        let prior = ctx.prior;
        let model = ctx.model;
        let n = ctx.dim();
        let nu1 = crate::rng::standard_normal_vec(rng, n);
        let mut rhs = prior.apply_l(&prior.mass_factor().apply_inv_lt(&nu1));
        let nu2 = crate::rng::standard_normal_vec(rng, model.num_sensors());
        let scaled: Vec<f64> = nu2
            .iter()
            .zip(ctx.w)
            .zip(model.sigma())
            .map(|((z, w), s)| z * w.max(0.0).sqrt() / s)
            .collect();
        let bt = model.observation().matvec_transpose(&scaled);
        let t = ctx.solve(&model.dofs().restrict(&bt));
        let b = ctx.blocks()?;
        for (r, x) in rhs.iter_mut().zip(b.c.matvec_transpose(&t)) {
            *r += x;
        }
        Ok(ctx.solve_cg(&rhs, &self.cg, CgTag::Untracked)?.x)
    }
}

/// Dense-vector helper: x ↦ H x as an nalgebra vector (used by oracles).
pub fn apply_dense(ctx: &HessianContext<'_>, x: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(DVector::from_vec(ctx.apply(x.as_slice())?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::FemSpace;
    use crate::forward::{generate_data_samples, ScenarioConfig};
    use crate::krylov::SolveCounters;
    use crate::map::{eval_gradient, solve_map, MapOptions};
    use crate::prior::PriorSpec;
    use crate::vecops::{max_abs, scaled, sub};
    use std::sync::Arc;

    fn setup(n: usize) -> (ForwardModel, PriorModel, Vec<f64>) {
        let sc = ScenarioConfig::baseline(n, n);
        let mesh = sc.build_mesh().unwrap();
        let space = Arc::new(FemSpace::new(mesh));
        let model = ForwardModel::new(space.clone(), &sc, Arc::new(SolveCounters::new())).unwrap();
        let prior = PriorModel::new(space, PriorSpec::baseline(), &[0.1, -0.2, 0.0, 0.3, 0.2]).unwrap();
        let d = generate_data_samples(&prior, &model, 1, 11).unwrap().remove(0).d;
        (model, prior, d)
    }

    fn field(model: &ForwardModel, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        model.mesh().nodes().iter().map(|&x| f(x)).collect()
    }

    #[test]
    fn sequential_and_reduced_agree_and_match_fd() {
        let (model, prior, d) = setup(8);
        let w: Vec<f64> = (0..model.num_sensors()).map(|j| 0.2 + 0.008 * j as f64).collect();
        let m = field(&model, |x| 0.4 * (2.0 * x[0]).sin() * x[1]);
        let (u, op) = model.solve_state_with(&m).unwrap();
        let p = model.solve_adjoint(&op, &u, &w, &d).unwrap();
        let y = field(&model, |x| (3.0 * x[0] + x[1]).cos());
        let ctx = HessianContext::new(&model, &prior, &m, &u, &p, &w, &op, HessianMode::Full).unwrap();
        let h1 = ctx.apply(&y).unwrap();
        let h2 = ctx.reduced_apply(&y).unwrap();
        assert!(max_abs(&sub(&h1, &h2)) <= 1e-9 * max_abs(&h1));
        let eps = 1e-5;
        let gp = eval_gradient(&model, &prior, &crate::vecops::add(&m, &scaled(eps, &y)), &w, &d).unwrap();
        let gm = eval_gradient(&model, &prior, &crate::vecops::add(&m, &scaled(-eps, &y)), &w, &d).unwrap();
        let fd = scaled(0.5 / eps, &sub(&gp, &gm));
        assert!(max_abs(&sub(&fd, &h1)) <= 1e-6 * max_abs(&h1));
        let ctx_gn = HessianContext::new(&model, &prior, &m, &u, &p, &w, &op, HessianMode::GaussNewton).unwrap();
        let g1 = ctx_gn.apply(&y).unwrap();
        let g2 = ctx_gn.reduced_apply(&y).unwrap();
        assert!(max_abs(&sub(&g1, &g2)) <= 1e-9 * max_abs(&g1));
    }

    #[test]
    fn hessian_symmetric() {
        let (model, prior, d) = setup(7);
        let w = vec![0.7; model.num_sensors()];
        let m = field(&model, |x| 0.3 * x[0] - 0.2 * x[1]);
        let (u, op) = model.solve_state_with(&m).unwrap();
        let p = model.solve_adjoint(&op, &u, &w, &d).unwrap();
        for mode in [HessianMode::Full, HessianMode::GaussNewton] {
            let ctx = HessianContext::new(&model, &prior, &m, &u, &p, &w, &op, mode).unwrap();
            let a = field(&model, |x| x[0] * x[0] - x[1]);
            let b = field(&model, |x| (5.0 * x[1]).sin());
            let l = dot(&a, &ctx.apply(&b).unwrap());
            let r = dot(&b, &ctx.apply(&a).unwrap());
            assert!((l - r).abs() <= 1e-10 * l.abs().max(r.abs()));
        }
    }

    #[test]
    fn woodbury_trace_matches_dense() {
        let (model, prior, d) = setup(6);
        let w: Vec<f64> = (0..model.num_sensors()).map(|j| if j % 3 == 0 { 0.0 } else { 0.5 }).collect();
        let sol = solve_map(&model, &prior, &w, &d, None, &MapOptions::default()).unwrap();
        let ctx = sol.hessian(&model, &prior, &w, HessianMode::GaussNewton).unwrap();
        let dense = ctx.posterior_trace_dense(2000).unwrap();
        let prior_trace = prior_trace_dense(&prior);
        let wb = ctx.posterior_trace_gn_exact(prior_trace).unwrap();
        assert!((dense - wb).abs() <= 1e-8 * dense, "{dense} vs {wb}");
        assert!(wb < prior_trace);
    }

    fn prior_trace_dense(prior: &PriorModel) -> f64 {
        let n = prior.dim();
        let mut e = vec![0.0; n];
        let mut t = 0.0;
        for i in 0..n {
            e[i] = 1.0;
            t += prior.apply_r_inv(&prior.mass().matvec(&e))[i];
            e[i] = 0.0;
        }
        t
    }

    #[test]
    fn dense_threshold_enforced() {
        let (model, prior, d) = setup(4);
        let w = vec![1.0; model.num_sensors()];
        let m = prior.mean().to_vec();
        let (u, op) = model.solve_state_with(&m).unwrap();
        let p = model.solve_adjoint(&op, &u, &w, &d).unwrap();
        let ctx = HessianContext::new(&model, &prior, &m, &u, &p, &w, &op, HessianMode::Full).unwrap();
        assert!(matches!(ctx.dense(3), Err(OedError::DenseThresholdExceeded { .. })));
    }
}
