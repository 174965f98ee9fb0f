//! Gaussian trace estimation in the mass-weighted inner product, and the δ-limit check
//! for covariance-smoothed traces.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{OedError, Result};
use crate::prior::{PriorModel, SamplingMode};
use crate::rng::{streams, substream};

/// Frozen probe vectors z_k with covariance M⁻¹.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub seed: u64,
    pub mode: SamplingMode,
    pub probes: Vec<Vec<f64>>,
}

impl ProbeSet {
    pub fn generate(prior: &PriorModel, n_tr: usize, master_seed: u64) -> Result<Self> {
        Self::generate_with(prior, n_tr, master_seed, SamplingMode::ConsistentMass, 0)
    }

    /// `offset` shifts the substream index, giving independent replicate sets.
    pub fn generate_with(
        prior: &PriorModel,
        n_tr: usize,
        master_seed: u64,
        mode: SamplingMode,
        offset: u64,
    ) -> Result<Self> {
        if n_tr == 0 {
            return Err(OedError::InvalidArgument("need at least one probe".into()));
        }
        let probes = (0..n_tr as u64)
            .map(|k| {
                let mut rng = substream(master_seed, streams::PROBES, offset + k);
                prior.whitened_probe(&mut rng, mode)
            })
            .collect();
        Ok(Self {
            seed: master_seed,
            mode,
            probes,
        })
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TraceEstimate {
    pub mean: f64,
    /// ⟨z_k, Op z_k⟩_M per probe.
    pub samples: Vec<f64>,
}

impl TraceEstimate {
    /// Standard error of the mean from the per-probe spread.
    pub fn std_error(&self) -> f64 {
        let n = self.samples.len();
        if n < 2 {
            return f64::NAN;
        }
        let var = self.samples.iter().map(|s| (s - self.mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    }
}

/// (1/n_tr) Σ ⟨z_k, Op z_k⟩_M for a primal-to-primal operator `op`.
pub fn estimate_trace<F>(mut op: F, probes: &ProbeSet, prior: &PriorModel) -> Result<TraceEstimate>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut samples = Vec::with_capacity(probes.len());
    for z in &probes.probes {
        let oz = op(z)?;
        samples.push(prior.inner_m(z, &oz));
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    Ok(TraceEstimate { mean, samples })
}

/// Exact tr(C_pr) = tr(L⁻¹ M L⁻¹ M) by columns (2n solves).
pub fn prior_trace_exact(prior: &PriorModel) -> f64 {
    let n = prior.dim();
    let mut e = vec![0.0; n];
    let mut t = 0.0;
    for i in 0..n {
        e[i] = 1.0;
        t += prior.apply_cpr(&e)[i];
        e[i] = 0.0;
    }
    t
}

/// Dense trace estimator for a symmetric matrix with identity-covariance probes.
pub fn estimate_dense_trace(a: &DMatrix<f64>, n_tr: usize, rng: &mut ChaCha8Rng) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for _ in 0..n_tr {
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let zv = nalgebra::DVector::from_vec(z);
        acc += zv.dot(&(a * &zv));
    }
    acc / n_tr as f64
}

/// Least-squares slope and R² of log(err) against log(n).
pub fn loglog_fit(ns: &[f64], errs: &[f64]) -> (f64, f64) {
    let x: Vec<f64> = ns.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = errs.iter().map(|v| v.ln()).collect();
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

/// Linear-element Neumann Laplacian on `n` nodes of [0, 1].
pub fn neumann_laplacian_1d(n: usize) -> DMatrix<f64> {
    let h = 1.0 / (n - 1) as f64;
    let mut k = DMatrix::zeros(n, n);
    for e in 0..n - 1 {
        k[(e, e)] += 1.0 / h;
        k[(e + 1, e + 1)] += 1.0 / h;
        k[(e, e + 1)] -= 1.0 / h;
        k[(e + 1, e)] -= 1.0 / h;
    }
    k
}

/// SPD test operator (I + θK)⁻¹ P (I + θK)⁻¹ with P = I + XXᵀ/n, X standard normal.
pub fn smooth_spd_operator(k: &DMatrix<f64>, theta: f64, seed: u64) -> DMatrix<f64> {
    let n = k.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let p: DMatrix<f64> = DMatrix::identity(n, n) + &x * x.transpose() / n as f64;
    let s = (DMatrix::identity(n, n) + k * theta)
        .try_inverse()
        .expect("I + θK is SPD");
    &s * p * &s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaRow {
    pub delta: f64,
    pub trace_estimate: f64,
    pub exact_trace: f64,
}

/// tr(A C_δ), C_δ = (δK + I)⁻², for each δ, alongside tr(A).
pub fn delta_limit_check(a: &DMatrix<f64>, k: &DMatrix<f64>, deltas: &[f64]) -> Result<Vec<DeltaRow>> {
    let n = a.nrows();
    if a.ncols() != n || k.nrows() != n || k.ncols() != n {
        return Err(OedError::DimensionMismatch {
            what: "delta check operator",
            expected: n,
            got: k.nrows(),
        });
    }
    let exact = a.trace();
    deltas
        .iter()
        .map(|&delta| {
            let shifted = DMatrix::identity(n, n) + k * delta;
            let inv = shifted
                .cholesky()
                .ok_or(OedError::NotPositiveDefinite { pivot: 0, value: f64::NAN })?
                .inverse();
            let t = (a * &inv * &inv).trace();
            Ok(DeltaRow {
                delta,
                trace_estimate: t,
                exact_trace: exact,
            })
        })
        .collect()
}

/// The default 100-node check with δ ∈ {1e-1, …, 1e-6} and δ = 0.
pub fn default_delta_check(seed: u64) -> Result<Vec<DeltaRow>> {
    let k = neumann_laplacian_1d(100);
    let a = smooth_spd_operator(&k, 0.01, seed);
    let deltas = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 0.0];
    delta_limit_check(&a, &k, &deltas)
}
