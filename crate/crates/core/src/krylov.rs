//! Preconditioned conjugate gradients, direct solves, lumped-mass square roots and the
//! solve-counting ledger.

use std::ops::Sub;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::cholesky::SkylineCholesky;
use crate::error::{OedError, Result};
use crate::sparse::SparseOperator;
use crate::vecops::{axpy, dot};

/// Shared, atomically updated solve counters.
#[derive(Debug, Default)]
pub struct SolveCounters {
    forward_like_solves: AtomicU64,
    state_solves: AtomicU64,
    adjoint_solves: AtomicU64,
    incremental_solves: AtomicU64,
    inner_cg_iters: AtomicU64,
    outer_cg_iters: AtomicU64,
    newton_iters: AtomicU64,
    oed_iters: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveKind {
    State,
    Adjoint,
    Incremental,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgTag {
    /// Hessian solves inside the MAP Newton iteration.
    Inner,
    /// Hessian solves of the OED objective and gradient.
    Outer,
    /// Not recorded.
    Untracked,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct CounterSnapshot {
    pub forward_like_solves: u64,
    pub state_solves: u64,
    pub adjoint_solves: u64,
    pub incremental_solves: u64,
    pub inner_cg_iters: u64,
    pub outer_cg_iters: u64,
    pub newton_iters: u64,
    pub oed_iters: u64,
}

impl Sub for CounterSnapshot {
    type Output = CounterSnapshot;
    fn sub(self, o: Self) -> Self {
        CounterSnapshot {
            forward_like_solves: self.forward_like_solves - o.forward_like_solves,
            state_solves: self.state_solves - o.state_solves,
            adjoint_solves: self.adjoint_solves - o.adjoint_solves,
            incremental_solves: self.incremental_solves - o.incremental_solves,
            inner_cg_iters: self.inner_cg_iters - o.inner_cg_iters,
            outer_cg_iters: self.outer_cg_iters - o.outer_cg_iters,
            newton_iters: self.newton_iters - o.newton_iters,
            oed_iters: self.oed_iters - o.oed_iters,
        }
    }
}

impl SolveCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_solve(&self, kind: SolveKind) {
        self.forward_like_solves.fetch_add(1, Ordering::Relaxed);
        let c = match kind {
            SolveKind::State => &self.state_solves,
            SolveKind::Adjoint => &self.adjoint_solves,
            SolveKind::Incremental => &self.incremental_solves,
        };
        c.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_cg(&self, tag: CgTag, iterations: usize) {
        let c = match tag {
            CgTag::Inner => &self.inner_cg_iters,
            CgTag::Outer => &self.outer_cg_iters,
            CgTag::Untracked => return,
        };
        c.fetch_add(iterations as u64, Ordering::Relaxed);
    }

    pub fn record_newton(&self, n: usize) {
        self.newton_iters.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn record_oed_iter(&self) {
        self.record_oed_iter_n(1);
    }

    pub fn record_oed_iter_n(&self, n: usize) {
        self.oed_iters.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            forward_like_solves: self.forward_like_solves.load(Ordering::Relaxed),
            state_solves: self.state_solves.load(Ordering::Relaxed),
            adjoint_solves: self.adjoint_solves.load(Ordering::Relaxed),
            incremental_solves: self.incremental_solves.load(Ordering::Relaxed),
            inner_cg_iters: self.inner_cg_iters.load(Ordering::Relaxed),
            outer_cg_iters: self.outer_cg_iters.load(Ordering::Relaxed),
            newton_iters: self.newton_iters.load(Ordering::Relaxed),
            oed_iters: self.oed_iters.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CgOptions {
    pub rtol: f64,
    pub atol: f64,
    pub maxiter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 0.0,
            maxiter: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgStatus {
    Converged,
    MaxIterations,
    /// dᵀAd ≤ 0 at the given iteration; the returned iterate is the last one before it.
    NegativeCurvature { iteration: usize },
}

#[derive(Debug, Clone)]
pub struct CgResult {
    pub x: Vec<f64>,
    /// Number of operator applications.
    pub iterations: usize,
    pub status: CgStatus,
    /// Preconditioned residual norms ‖r‖_P, starting with ‖b‖_P.
    pub residual_history: Vec<f64>,
}

impl CgResult {
    pub fn converged(&self) -> bool {
        self.status == CgStatus::Converged
    }

    pub fn relative_residual(&self) -> f64 {
        let r0 = self.residual_history[0];
        if r0 == 0.0 {
            0.0
        } else {
            self.residual_history.last().copied().unwrap_or(r0) / r0
        }
    }
}

/// Preconditioned CG from a zero initial guess. Convergence is measured in the preconditioner
/// norm: ‖r‖_P ≤ max(atol, rtol ‖b‖_P). Iterations are added to `counters` under `tag`.
pub fn cg_solve<A, P>(
    mut apply_a: A,
    b: &[f64],
    mut precond: P,
    opts: &CgOptions,
    counters: Option<&SolveCounters>,
    tag: CgTag,
) -> Result<CgResult>
where
    A: FnMut(&[f64]) -> Result<Vec<f64>>,
    P: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = precond(&r)?;
    let mut rz = dot(&r, &z);
    if rz < 0.0 {
        return Err(OedError::InvalidArgument("preconditioner is not positive definite".into()));
    }
    let r0 = rz.sqrt();
    let mut history = vec![r0];
    let tol = opts.atol.max(opts.rtol * r0);
    let mut iterations = 0;
    let mut status = CgStatus::MaxIterations;
    if r0 <= tol || r0 == 0.0 {
        status = CgStatus::Converged;
    } else {
        let mut d = z.clone();
        while iterations < opts.maxiter {
            let ad = apply_a(&d)?;
            iterations += 1;
            let dad = dot(&d, &ad);
            if dad <= 0.0 {
                status = CgStatus::NegativeCurvature {
                    iteration: iterations - 1,
                };
                break;
            }
            let alpha = rz / dad;
            axpy(alpha, &d, &mut x);
            axpy(-alpha, &ad, &mut r);
            z = precond(&r)?;
            let rz_new = dot(&r, &z);
            let rn = rz_new.max(0.0).sqrt();
            history.push(rn);
            if rn <= tol {
                status = CgStatus::Converged;
                break;
            }
            let beta = rz_new / rz;
            rz = rz_new;
            for (di, zi) in d.iter_mut().zip(&z) {
                *di = zi + beta * *di;
            }
        }
    }
    if let Some(c) = counters {
        c.record_cg(tag, iterations);
    }
    Ok(CgResult {
        x,
        iterations,
        status,
        residual_history: history,
    })
}

/// Factor-and-solve for a sparse SPD system. Each call records one forward-like solve when
/// counters are supplied.
pub fn sparse_direct_solve(
    a: &SparseOperator,
    b: &[f64],
    counters: Option<(&SolveCounters, SolveKind)>,
) -> Result<Vec<f64>> {
    let f = SkylineCholesky::factor(a)?;
    if let Some((c, kind)) = counters {
        c.record_solve(kind);
    }
    Ok(f.solve(b))
}

/// Row-sum lumped diagonal of a mass matrix.
pub fn lumped_mass(m: &SparseOperator) -> Vec<f64> {
    let d = m.row_sums();
    assert!(d.iter().all(|&v| v > 0.0), "lumped mass must be positive");
    d
}

/// Mℓ^{1/2} v, or Mℓ^{-1/2} v when `inverse` is set.
pub fn lumped_mass_sqrt_apply(m: &SparseOperator, v: &[f64], inverse: bool) -> Vec<f64> {
    let d = lumped_mass(m);
    v.iter()
        .zip(&d)
        .map(|(vi, di)| if inverse { vi / di.sqrt() } else { vi * di.sqrt() })
        .collect()
}
