//! Sparsity-penalized design optimization over [0, 1]^{n_s}: log-barrier interior point with
//! L-BFGS inner solves and ℓ¹ → t/(t+ε) continuation.

use std::collections::{HashSet, VecDeque};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{OedError, Result};
use crate::krylov::CounterSnapshot;
use crate::oed::OedEvaluator;
use crate::rng::{streams, substream};
use nalgebra::{DMatrix, DVector};

use crate::vecops::{dot, max_abs};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Penalty {
    L1,
    Eps { eps: f64 },
}

impl Penalty {
    pub fn label(&self) -> String {
        match self {
            Penalty::L1 => "l1".into(),
            Penalty::Eps { eps } => format!("eps={eps:e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltySpec {
    pub gamma: f64,
    /// ε values of the continuation stages that follow the ℓ¹ stage.
    pub epsilons: Vec<f64>,
}

impl Default for PenaltySpec {
    fn default() -> Self {
        Self {
            gamma: 0.008,
            epsilons: vec![0.3, 0.1, 0.03, 0.01],
        }
    }
}

impl PenaltySpec {
    pub fn stages(&self) -> Vec<Penalty> {
        std::iter::once(Penalty::L1)
            .chain(self.epsilons.iter().map(|&eps| Penalty::Eps { eps }))
            .collect()
    }
}

/// Value and gradient of Σ_j f(w_j), f(t) = t or t/(t+ε).
pub fn penalty_eval(w: &[f64], penalty: Penalty) -> (f64, Vec<f64>) {
    match penalty {
        Penalty::L1 => (w.iter().sum(), vec![1.0; w.len()]),
        Penalty::Eps { eps } => {
            let v = w.iter().map(|&t| t / (t + eps)).sum();
            let g = w.iter().map(|&t| eps / (t + eps).powi(2)).collect();
            (v, g)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OuterOptions {
    pub mu_schedule: Vec<f64>,
    pub memory: usize,
    pub max_iterations: usize,
    /// Stage stop: projected gradient ≤ rel_tol · ‖∇(Ψ̂ + γP)‖∞ at the stage start.
    pub rel_tol: f64,
    /// Also stop once an accepted step lowers the barrier objective by ≤ f_tol · max(|φ|, 1).
    pub f_tol: f64,
    /// Continuation stages after the first are warm-started and skip barrier weights above this.
    pub warm_mu_max: f64,
    pub armijo_c: f64,
    pub fraction_to_boundary: f64,
    pub max_backtracks: usize,
    pub active_threshold: f64,
    pub initial_weight: f64,
}

impl Default for OuterOptions {
    fn default() -> Self {
        Self {
            mu_schedule: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
            memory: 20,
            max_iterations: 100,
            rel_tol: 1e-5,
            f_tol: 1e7 * f64::EPSILON,
            warm_mu_max: 1e-4,
            armijo_c: 1e-4,
            fraction_to_boundary: 0.995,
            max_backtracks: 30,
            active_threshold: 1e-2,
            initial_weight: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterateRecord {
    pub stage: usize,
    pub penalty: String,
    pub mu: f64,
    pub iteration: usize,
    pub psi_hat: f64,
    pub penalty_value: f64,
    pub barrier_objective: f64,
    /// Projected gradient of the barrier objective.
    pub grad_norm: f64,
    pub n_active: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub stage: usize,
    pub penalty: Penalty,
    pub mu: f64,
    pub iterations: usize,
    pub converged: bool,
    pub w: Vec<f64>,
    pub n_active: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct OuterSolveRecord {
    pub stages: Vec<StageRecord>,
    pub history: Vec<IterateRecord>,
    pub w: Vec<f64>,
    /// w rounded to {0, 1} at 1/2.
    pub w_binary: Vec<f64>,
    pub n_active: usize,
    pub total_iterations: usize,
    pub counters: CounterSnapshot,
}

pub fn count_active(w: &[f64], threshold: f64) -> usize {
    w.iter().filter(|&&x| x > threshold).count()
}

/// Largest distance of any weight to {0, 1}.
pub fn binary_gap(w: &[f64]) -> f64 {
    w.iter().map(|&x| x.min(1.0 - x).max(0.0)).fold(0.0, f64::max)
}

struct Barrier<'e, 'a> {
    ev: &'e OedEvaluator<'a>,
    gamma: f64,
    penalty: Penalty,
    mu: f64,
}

struct Point {
    w: Vec<f64>,
    phi: f64,
    psi: f64,
    pen: f64,
}

impl Barrier<'_, '_> {
    fn value(&self, w: &[f64]) -> Result<Point> {
        let psi = self.ev.objective(w)?.psi_hat;
        Ok(self.assemble(w, psi))
    }

    fn assemble(&self, w: &[f64], psi: f64) -> Point {
        let (pen, _) = penalty_eval(w, self.penalty);
        let bar: f64 = w.iter().map(|&t| -t.ln() - (1.0 - t).ln()).sum();
        Point {
            w: w.to_vec(),
            phi: psi + self.gamma * pen + self.mu * bar,
            psi,
            pen,
        }
    }

    /// Gradient of Ψ̂ + γP (without barrier) and of the full barrier objective.
    fn gradient(&self, w: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let e = self.ev.objective_and_gradient(w)?;
        let g = e.grad.expect("gradient requested");
        let (_, pg) = penalty_eval(w, self.penalty);
        let base: Vec<f64> = g.iter().zip(&pg).map(|(a, b)| a + self.gamma * b).collect();
        let full = base
            .iter()
            .zip(w)
            .map(|(b, &t)| b + self.mu * (-1.0 / t + 1.0 / (1.0 - t)))
            .collect();
        Ok((base, full, e.psi_hat))
    }
}

/// Pulls weights strictly inside (0, 1).
fn interior(w: &[f64], margin: f64) -> Vec<f64> {
    w.iter().map(|&t| t.clamp(margin, 1.0 - margin)).collect()
}

/// Minimizes Ψ̂ + γP over [0, 1]^{n_s} from `w0`.
pub fn solve_outer(
    ev: &OedEvaluator<'_>,
    w0: &[f64],
    spec: &PenaltySpec,
    opts: &OuterOptions,
) -> Result<OuterSolveRecord> {
    let ns = ev.num_sensors();
    if w0.len() != ns {
        return Err(OedError::DimensionMismatch {
            what: "initial design",
            expected: ns,
            got: w0.len(),
        });
    }
    if spec.gamma < 0.0 || opts.mu_schedule.is_empty() {
        return Err(OedError::InvalidArgument("need γ ≥ 0 and a barrier schedule".into()));
    }
    let counters = ev.model().counters();
    let start = counters.snapshot();
    let mut w = interior(w0, 1e-3);
    let mut stages = Vec::new();
    let mut history = Vec::new();
    let mut total = 0;
    for (si, penalty) in spec.stages().into_iter().enumerate() {
        let schedule: Vec<f64> = if si == 0 {
            opts.mu_schedule.clone()
        } else {
            let warm: Vec<f64> = opts.mu_schedule.iter().copied().filter(|&m| m <= opts.warm_mu_max).collect();
            if warm.is_empty() {
                vec![*opts.mu_schedule.last().unwrap()]
            } else {
                warm
            }
        };
        for &mu in &schedule {
            let barrier = Barrier {
                ev,
                gamma: spec.gamma,
                penalty,
                mu,
            };
            w = interior(&w, (mu * 1e-3).min(1e-6));
            let (iters, converged, wn) = lbfgs_stage(&barrier, w, opts, si, &mut history)?;
            counters.record_oed_iter_n(iters);
            w = wn;
            total += iters;
            let n_active = count_active(&w, opts.active_threshold);
            log::info!(
                "stage {si} ({}) μ={mu:e}: {iters} iterations, {n_active} active, converged={converged}",
                penalty.label()
            );
            stages.push(StageRecord {
                stage: si,
                penalty,
                mu,
                iterations: iters,
                converged,
                w: w.clone(),
                n_active,
            });
        }
    }
    let w_binary = w.iter().map(|&t| if t >= 0.5 { 1.0 } else { 0.0 }).collect();
    Ok(OuterSolveRecord {
        stages,
        history,
        n_active: count_active(&w, opts.active_threshold),
        w,
        w_binary,
        total_iterations: total,
        counters: counters.snapshot() - start,
    })
}

fn lbfgs_stage(
    f: &Barrier<'_, '_>,
    w0: Vec<f64>,
    opts: &OuterOptions,
    stage: usize,
    history: &mut Vec<IterateRecord>,
) -> Result<(usize, bool, Vec<f64>)> {
    let mut x = f.value(&w0)?;
    let (mut base, mut g, _) = f.gradient(&x.w)?;
    let scale = max_abs(&base).max(f64::MIN_POSITIVE);
    let tol = opts.rel_tol * scale;
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::new();
    let mut it = 0;
    let label = f.penalty.label();
    let mut converged = projected_gradient(&x.w, &g) <= tol;
    while !converged && it < opts.max_iterations {
        let mut d = barrier_qn_direction(&g, &x.w, f.mu, &mem);
        if !(dot(&d, &g) < 0.0) {
            mem.clear();
            d = barrier_qn_direction(&g, &x.w, f.mu, &mem);
        }
        if mem.is_empty() {
            // first step: move at most 0.1 in any weight
            let s = 0.1 / max_abs(&d).max(f64::MIN_POSITIVE);
            d.iter_mut().for_each(|v| *v *= s.min(1.0));
        }
        let mut amax: f64 = 1.0;
        for (&wi, &di) in x.w.iter().zip(&d) {
            if di < 0.0 {
                amax = amax.min(opts.fraction_to_boundary * wi / -di);
            } else if di > 0.0 {
                amax = amax.min(opts.fraction_to_boundary * (1.0 - wi) / di);
            }
        }
        let slope = dot(&g, &d);
        let mut alpha = amax;
        let mut next = None;
        for _ in 0..opts.max_backtracks {
            let wt: Vec<f64> = x.w.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            let pt = f.value(&wt)?;
            if pt.phi.is_finite() && pt.phi <= x.phi + opts.armijo_c * alpha * slope {
                next = Some(pt);
                break;
            }
            alpha *= 0.5;
        }
        let Some(pt) = next else {
            log::debug!("barrier line search stalled at iteration {it}");
            break;
        };
        let (bn, gn, _) = f.gradient(&pt.w)?;
        let s: Vec<f64> = pt.w.iter().zip(&x.w).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = bn.iter().zip(&base).map(|(a, b)| a - b).collect();
        if let Some(pair) = damped_pair(s, y, &mem) {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back(pair);
        }
        let stalled = x.phi - pt.phi <= opts.f_tol * pt.phi.abs().max(1.0);
        x = pt;
        g = gn;
        base = bn;
        it += 1;
        history.push(IterateRecord {
            stage,
            penalty: label.clone(),
            mu: f.mu,
            iteration: it,
            psi_hat: x.psi,
            penalty_value: x.pen,
            barrier_objective: x.phi,
            grad_norm: projected_gradient(&x.w, &g),
            n_active: count_active(&x.w, opts.active_threshold),
        });
        let pg = projected_gradient(&x.w, &g);
        converged = pg <= tol || stalled;
        log::debug!(
            "{label} μ={:e} iteration {it}: φ={:.6e} projected gradient {pg:.3e} (tol {tol:.1e}) step {alpha:.2e}",
            f.mu,
            x.phi
        );
    }
    Ok((it, converged, x.w))
}

/// ‖w − Π(w − g)‖∞ with Π the projection onto [0, 1]^{n_s}.
pub fn projected_gradient(w: &[f64], g: &[f64]) -> f64 {
    w.iter()
        .zip(g)
        .map(|(&wi, &gi)| (wi - (wi - gi).clamp(0.0, 1.0)).abs())
        .fold(0.0, f64::max)
}

/// Compact L-BFGS model B_s = σI − W M⁻¹ Wᵀ of Ψ̂ + γP, W = [σS Y], M = [[σSᵀS, L], [Lᵀ, −D]].
struct CompactModel {
    sigma: f64,
    w: DMatrix<f64>,
    m: DMatrix<f64>,
}

type Pairs = VecDeque<(Vec<f64>, Vec<f64>)>;

impl CompactModel {
    fn new(mem: &Pairs, n: usize) -> Self {
        let sigma = match mem.back() {
            Some((s, y)) => dot(s, y) / dot(s, s),
            None => 1.0,
        };
        let k = mem.len();
        let w = DMatrix::from_fn(n, 2 * k, |i, j| if j < k { sigma * mem[j].0[i] } else { mem[j - k].1[i] });
        let mut m = DMatrix::zeros(2 * k, 2 * k);
        for a in 0..k {
            for b in 0..k {
                m[(a, b)] = sigma * dot(&mem[a].0, &mem[b].0);
                if a > b {
                    let l = dot(&mem[a].0, &mem[b].1);
                    m[(a, k + b)] = l;
                    m[(k + b, a)] = l;
                }
            }
            m[(k + a, k + a)] = -dot(&mem[a].0, &mem[a].1);
        }
        Self { sigma, w, m }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = v.iter().map(|x| self.sigma * x).collect();
        if self.w.ncols() == 0 {
            return out;
        }
        let rhs = self.w.transpose() * DVector::from_column_slice(v);
        if let Some(z) = self.m.clone().lu().solve(&rhs) {
            let corr = &self.w * z;
            out.iter_mut().zip(corr.iter()).for_each(|(o, c)| *o -= c);
        }
        out
    }

    /// −(B_s + diag(b))⁻¹ g via (Δ − W M⁻¹ Wᵀ)⁻¹ = Δ⁻¹ + Δ⁻¹W (M − WᵀΔ⁻¹W)⁻¹ WᵀΔ⁻¹.
    fn solve_shifted(&self, g: &[f64], b: &[f64]) -> Vec<f64> {
        let dinv: Vec<f64> = b.iter().map(|bi| 1.0 / (self.sigma + bi)).collect();
        let mut d: Vec<f64> = g.iter().zip(&dinv).map(|(a, b)| -a * b).collect();
        if self.w.ncols() == 0 {
            return d;
        }
        let dw = DMatrix::from_fn(self.w.nrows(), self.w.ncols(), |i, j| dinv[i] * self.w[(i, j)]);
        let k = &self.m - self.w.transpose() * &dw;
        let rhs = dw.transpose() * DVector::from_column_slice(g);
        if let Some(z) = k.lu().solve(&rhs) {
            let corr = dw * z;
            d.iter_mut().zip(corr.iter()).for_each(|(di, ci)| *di -= ci);
        }
        d
    }
}

fn barrier_diagonal(w: &[f64], mu: f64) -> Vec<f64> {
    w.iter().map(|&t| mu * (1.0 / (t * t) + 1.0 / ((1.0 - t) * (1.0 - t)))).collect()
}

/// Quasi-Newton step −B⁻¹g for B = B_s + diag(μ/w² + μ/(1−w)²): the barrier Hessian is
/// exact and B_s is the compact L-BFGS model of Ψ̂ + γP built from `mem` = (s, y) pairs.
fn barrier_qn_direction(g: &[f64], w: &[f64], mu: f64, mem: &Pairs) -> Vec<f64> {
    CompactModel::new(mem, g.len()).solve_shifted(g, &barrier_diagonal(w, mu))
}

/// Powell damping: ŷ = θy + (1−θ)B_s s with sᵀŷ ≥ 0.2 sᵀB_s s, so the model stays positive
/// definite where Ψ̂ is locally nonconvex.
fn damped_pair(s: Vec<f64>, y: Vec<f64>, mem: &Pairs) -> Option<(Vec<f64>, Vec<f64>)> {
    let bs = CompactModel::new(mem, s.len()).apply(&s);
    let sbs = dot(&s, &bs);
    let sy = dot(&s, &y);
    if !(sbs > 0.0) {
        return (sy > 0.0).then_some((s, y));
    }
    if sy >= 0.2 * sbs {
        return Some((s, y));
    }
    let theta = 0.8 * sbs / (sbs - sy);
    let yd = y.iter().zip(&bs).map(|(a, b)| theta * a + (1.0 - theta) * b).collect();
    Some((s, yd))
}

/// `n_w` distinct binary designs with `n_active` ones each, uniform over subsets.
pub fn random_designs(n_s: usize, n_w: usize, n_active: usize, master_seed: u64) -> Result<Vec<Vec<f64>>> {
    if n_active > n_s {
        return Err(OedError::InvalidArgument(format!(
            "cannot activate {n_active} of {n_s} sensors"
        )));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n_w);
    let mut draw = 0u64;
    while out.len() < n_w {
        let mut rng = substream(master_seed, streams::RANDOM_DESIGNS, draw);
        draw += 1;
        let mut idx: Vec<usize> = sample(&mut rng, n_s, n_active).into_vec();
        idx.sort_unstable();
        let unique_limit = draw > 100 * n_w as u64;
        if seen.insert(idx.clone()) || unique_limit {
            let mut w = vec![0.0; n_s];
            idx.iter().for_each(|&i| w[i] = 1.0);
            out.push(w);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

/// Two-loop recursion with H0 = sᵀs/sᵀy; oracle for the compact form.
    fn two_loop(g: &[f64], mem: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let h0 = dot(s, s) / dot(s, y);
            q.iter_mut().for_each(|v| *v *= h0);
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    #[test]
    fn penalty_values() {
        let (v, g) = penalty_eval(&[1.0; 4], Penalty::L1);
        assert_eq!(v, 4.0);
        assert!(g.iter().all(|&x| x == 1.0));
        let (v, _) = penalty_eval(&[1.0, 0.0, 1.0], Penalty::Eps { eps: 1e-3 });
        assert!((v - 2.0 / 1.001).abs() < 1e-14);
        let w = [0.2, 0.0, 0.7, 0.05];
        let vals: Vec<f64> = [1e-1, 1e-3, 1e-6].iter().map(|&e| penalty_eval(&w, Penalty::Eps { eps: e }).0).collect();
        assert!((vals[2] - 3.0).abs() < 1e-4 && vals[0] < vals[1] && vals[1] < vals[2]);
    }

    #[test]
    fn penalty_gradient_fd() {
        let w = [0.2, 0.4, 0.9];
        let (_, g) = penalty_eval(&w, Penalty::Eps { eps: 0.05 });
        for j in 0..3 {
            let mut a = w;
            a[j] += 1e-6;
            let mut b = w;
            b[j] -= 1e-6;
            let fd = (penalty_eval(&a, Penalty::Eps { eps: 0.05 }).0 - penalty_eval(&b, Penalty::Eps { eps: 0.05 }).0) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn compact_direction_matches_two_loop_without_barrier() {
        let pairs = [
            (vec![0.3, -0.1, 0.2, 0.05], vec![1.1, -0.2, 0.5, 0.3]),
            (vec![-0.2, 0.4, 0.1, 0.0], vec![-0.3, 1.7, 0.2, 0.1]),
            (vec![0.1, 0.1, -0.3, 0.2], vec![0.2, 0.3, -0.9, 0.8]),
        ];
        let g = [0.7, -1.2, 0.4, 2.0];
        let w = [0.5; 4];
        let compact: VecDeque<_> = pairs.iter().cloned().collect();
        let oracle: VecDeque<_> = pairs.iter().map(|(s, y)| (s.clone(), y.clone(), 1.0 / dot(s, y))).collect();
        let a = barrier_qn_direction(&g, &w, 0.0, &compact);
        let b = two_loop(&g, &oracle);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10 * max_abs(&b), "{a:?} vs {b:?}");
        }
        // barrier curvature shrinks steps toward the bounds
        let near = [0.999, 0.5, 0.5, 0.001];
        let d = barrier_qn_direction(&g, &near, 1e-2, &VecDeque::new());
        assert!(d[0].abs() < 1e-3 && d[3].abs() < 1e-3 && d[1].abs() > 0.1);
    }

    #[test]
    fn two_loop_inverts_quadratic() {
        // exact curvature pairs for diag(1, 4) recover the Newton step
        let mut mem = VecDeque::new();
        mem.push_back((vec![1.0, 0.0], vec![1.0, 0.0], 1.0));
        mem.push_back((vec![0.0, 1.0], vec![0.0, 4.0], 0.25));
        let d = two_loop(&[2.0, 8.0], &mem);
        assert!((d[0] + 2.0).abs() < 1e-12 && (d[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn random_designs_distinct_and_sized() {
        let ds = random_designs(100, 30, 10, 5).unwrap();
        assert_eq!(ds.len(), 30);
        let set: HashSet<Vec<u64>> = ds.iter().map(|w| w.iter().map(|x| x.to_bits()).collect()).collect();
        assert_eq!(set.len(), 30);
        assert!(ds.iter().all(|w| w.iter().sum::<f64>() == 10.0));
        assert_eq!(random_designs(5, 1, 5, 1).unwrap()[0], vec![1.0; 5]);
        assert_eq!(random_designs(100, 30, 10, 5).unwrap(), ds);
    }
}
