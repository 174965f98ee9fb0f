//! Gaussian prior with covariance L⁻², L = −∇·(Θ∇) + α Σ δ_i under natural boundary
//! conditions.
//!
//! Discrete conventions (M = consistent mass, L = assembled Galerkin matrix of the operator):
//! the covariance of the coefficient vector is Σ = L⁻¹ M L⁻¹, the primal-to-primal covariance
//! operator is L⁻¹ M L⁻¹ M, and the prior term of the cost Hessian is R = L M⁻¹ L = Σ⁻¹.

use std::sync::Arc;

use rand::Rng;

use crate::cholesky::SkylineCholesky;
use crate::error::{OedError, Result};
use crate::fem::{check_spd_tensor, FemSpace};
use crate::krylov::lumped_mass;
use crate::rng::standard_normal_vec;
use crate::sparse::SparseOperator;
use crate::vecops::{dot, sub};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnchorKind {
    /// α added to the diagonal of the nearest node.
    Nodal,
    /// Gaussian bump of the given standard deviation, normalized to unit integral.
    Mollified { width: f64 },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    pub theta: [[f64; 2]; 2],
    pub alpha: f64,
    pub anchors: Vec<[f64; 2]>,
    pub anchor_kind: AnchorKind,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self::baseline()
    }
}

impl PriorSpec {
    /// Parameters of the unit-square subsurface-flow example.
    pub fn baseline() -> Self {
        Self {
            theta: [[0.05 * 0.5, 0.0], [0.0, 0.05 * 2.0]],
            alpha: 1.0,
            anchors: vec![[0.1, 0.1], [0.1, 0.9], [0.9, 0.1], [0.9, 0.9], [0.5, 0.5]],
            anchor_kind: AnchorKind::Nodal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// m_pr + L⁻¹ L_M ν with M = L_M L_Mᵀ: covariance exactly Σ.
    ConsistentMass,
    /// m_pr + L⁻¹ Mℓ^{1/2} ν with the row-sum lumped mass.
    LumpedMass,
}

#[derive(Debug, Clone)]
pub struct PriorModel {
    space: Arc<FemSpace>,
    spec: PriorSpec,
    mass: SparseOperator,
    mass_chol: SkylineCholesky,
    lumped: Vec<f64>,
    l_op: SparseOperator,
    l_chol: SkylineCholesky,
    anchor_load: Vec<SparseOperator>,
    anchor_nodes: Vec<usize>,
    anchor_values: Vec<f64>,
    mean: Vec<f64>,
}

impl PriorModel {
    pub fn new(space: Arc<FemSpace>, spec: PriorSpec, anchor_values: &[f64]) -> Result<Self> {
        check_spd_tensor(spec.theta)?;
        if anchor_values.len() != spec.anchors.len() {
            return Err(OedError::DimensionMismatch {
                what: "anchor values",
                expected: spec.anchors.len(),
                got: anchor_values.len(),
            });
        }
        let mesh = space.mesh().clone();
        let mass = space.mass();
        let mass_chol = SkylineCholesky::factor(&mass)?;
        let lumped = lumped_mass(&mass);
        let mut l_op = space.stiffness_tensor(spec.theta)?;
        let anchor_nodes: Vec<usize> = spec.anchors.iter().map(|&p| mesh.nearest_node(p)).collect();
        let mut anchor_load = Vec::new();
        match spec.anchor_kind {
            AnchorKind::Nodal => {
                let n = l_op.nrows();
                let trip: Vec<(usize, usize, f64)> =
                    anchor_nodes.iter().map(|&k| (k, k, spec.alpha)).collect();
                let d = SparseOperator::from_triplets(n, n, &trip, true)?;
                l_op = l_op.add_scaled(1.0, &d)?;
            }
            AnchorKind::Mollified { width } => {
                if !(width > 0.0) {
                    return Err(OedError::InvalidArgument("mollifier width must be positive".into()));
                }
                for &x0 in &spec.anchors {
                    let bump = mollifier(x0, width);
                    let wm = space.weighted_mass(&bump);
                    l_op = l_op.add_scaled(spec.alpha, &wm)?;
                    anchor_load.push(wm);
                }
            }
        }
        let l_chol = SkylineCholesky::factor(&l_op)?;
        let mut model = Self {
            space,
            spec,
            mass,
            mass_chol,
            lumped,
            l_op,
            l_chol,
            anchor_load,
            anchor_nodes,
            anchor_values: anchor_values.to_vec(),
            mean: Vec::new(),
        };
        model.mean = model.fit_prior_mean(anchor_values)?;
        Ok(model)
    }

    /// Minimizer of ½⟨m, A m⟩ + α/2 Σ (m(x_i) − v_i)², i.e. the solution of L m = α Σ v_i δ_i.
    pub fn fit_prior_mean(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.spec.anchors.len() {
            return Err(OedError::DimensionMismatch {
                what: "anchor values",
                expected: self.spec.anchors.len(),
                got: values.len(),
            });
        }
        let rhs = self.anchor_rhs(values);
        Ok(self.l_chol.solve(&rhs))
    }

    fn anchor_rhs(&self, values: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut rhs = vec![0.0; n];
        match self.spec.anchor_kind {
            AnchorKind::Nodal => {
                for (&k, &v) in self.anchor_nodes.iter().zip(values) {
                    rhs[k] += self.spec.alpha * v;
                }
            }
            AnchorKind::Mollified { .. } => {
                for (wm, &v) in self.anchor_load.iter().zip(values) {
                    let ones = vec![v; n];
                    for (r, x) in rhs.iter_mut().zip(wm.matvec(&ones)) {
                        *r += self.spec.alpha * x;
                    }
                }
            }
        }
        rhs
    }

    pub fn dim(&self) -> usize {
        self.mass.nrows()
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn spec(&self) -> &PriorSpec {
        &self.spec
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn anchor_nodes(&self) -> &[usize] {
        &self.anchor_nodes
    }

    pub fn anchor_values(&self) -> &[f64] {
        &self.anchor_values
    }

    pub fn mass(&self) -> &SparseOperator {
        &self.mass
    }

    pub fn mass_factor(&self) -> &SkylineCholesky {
        &self.mass_chol
    }

    pub fn lumped_mass(&self) -> &[f64] {
        &self.lumped
    }

    pub fn operator(&self) -> &SparseOperator {
        &self.l_op
    }

    pub fn solve_l(&self, v: &[f64]) -> Vec<f64> {
        self.l_chol.solve(v)
    }

    pub fn apply_l(&self, v: &[f64]) -> Vec<f64> {
        self.l_op.matvec(v)
    }

    pub fn solve_mass(&self, v: &[f64]) -> Vec<f64> {
        self.mass_chol.solve(v)
    }

    /// Primal-to-primal covariance action L⁻¹ M L⁻¹ M v.
    pub fn apply_cpr(&self, v: &[f64]) -> Vec<f64> {
        let t = self.l_chol.solve(&self.mass.matvec(v));
        self.l_chol.solve(&self.mass.matvec(&t))
    }

    /// Primal-to-primal precision action M⁻¹ L M⁻¹ L v.
    pub fn apply_cpr_inv(&self, v: &[f64]) -> Vec<f64> {
        let t = self.mass_chol.solve(&self.l_op.matvec(v));
        self.mass_chol.solve(&self.l_op.matvec(&t))
    }

    /// Prior Hessian R v = L M⁻¹ L v (primal to dual).
    pub fn apply_r(&self, v: &[f64]) -> Vec<f64> {
        self.l_op.matvec(&self.mass_chol.solve(&self.l_op.matvec(v)))
    }

    /// R⁻¹ g = L⁻¹ M L⁻¹ g (dual to primal); the CG preconditioner.
    pub fn apply_r_inv(&self, g: &[f64]) -> Vec<f64> {
        self.l_chol.solve(&self.mass.matvec(&self.l_chol.solve(g)))
    }

    /// ½ ‖m − m_pr‖²_R
    pub fn cost(&self, m: &[f64]) -> f64 {
        let d = sub(m, &self.mean);
        0.5 * dot(&d, &self.apply_r(&d))
    }

    /// Gradient of `cost`: R (m − m_pr).
    pub fn gradient(&self, m: &[f64]) -> Vec<f64> {
        self.apply_r(&sub(m, &self.mean))
    }

    /// Centered draw with covariance Σ (or its lumped-mass variant).
    pub fn sample_centered<R: Rng + ?Sized>(&self, rng: &mut R, mode: SamplingMode) -> Vec<f64> {
        let nu = standard_normal_vec(rng, self.dim());
        let w = match mode {
            SamplingMode::ConsistentMass => self.mass_chol.apply_l(&nu),
            SamplingMode::LumpedMass => nu.iter().zip(&self.lumped).map(|(v, d)| v * d.sqrt()).collect(),
        };
        self.l_chol.solve(&w)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, mode: SamplingMode) -> Vec<f64> {
        let c = self.sample_centered(rng, mode);
        c.iter().zip(&self.mean).map(|(a, b)| a + b).collect()
    }

    /// Probe vector with covariance M⁻¹ (consistent) or Mℓ⁻¹ (lumped).
    pub fn whitened_probe<R: Rng + ?Sized>(&self, rng: &mut R, mode: SamplingMode) -> Vec<f64> {
        let nu = standard_normal_vec(rng, self.dim());
        match mode {
            SamplingMode::ConsistentMass => self.mass_chol.apply_inv_lt(&nu),
            SamplingMode::LumpedMass => nu.iter().zip(&self.lumped).map(|(v, d)| v / d.sqrt()).collect(),
        }
    }

    /// Mass-weighted L² inner product.
    pub fn inner_m(&self, a: &[f64], b: &[f64]) -> f64 {
        dot(a, &self.mass.matvec(b))
    }

    pub fn norm_m(&self, a: &[f64]) -> f64 {
        self.inner_m(a, a).max(0.0).sqrt()
    }
}

fn mollifier(x0: [f64; 2], width: f64) -> impl Fn([f64; 2]) -> f64 {
    let s2 = width * width;
    move |x: [f64; 2]| {
        let r2 = (x[0] - x0[0]).powi(2) + (x[1] - x0[1]).powi(2);
        (-r2 / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2)
    }
}

/// Relative error ‖a − ref‖_M / ‖ref‖_M.
pub fn relative_error(mass: &SparseOperator, a: &[f64], reference: &[f64]) -> Result<f64> {
    if a.len() != reference.len() || a.len() != mass.nrows() {
        return Err(OedError::DimensionMismatch {
            what: "relative error fields",
            expected: mass.nrows(),
            got: a.len(),
        });
    }
    let rn = dot(reference, &mass.matvec(reference)).sqrt();
    if rn == 0.0 {
        return Err(OedError::InvalidArgument("zero reference norm".into()));
    }
    let d = sub(a, reference);
    Ok(dot(&d, &mass.matvec(&d)).max(0.0).sqrt() / rn)
}

/// A covariance given through its action, used for pointwise variance fields.
pub trait CovarianceAction: Sync {
    fn dim(&self) -> usize;
    /// Σ v for a dual vector v.
    fn apply_covariance(&self, v: &[f64]) -> Result<Vec<f64>>;
    /// One centered draw with covariance Σ.
    fn sample_centered(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Vec<f64>>;
}

impl CovarianceAction for PriorModel {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn apply_covariance(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.apply_r_inv(v))
    }

    fn sample_centered(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(PriorModel::sample_centered(self, rng, SamplingMode::ConsistentMass))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMode {
    /// Exact diagonal from dense columns; refused above `threshold` unknowns.
    Dense { threshold: usize },
    /// Sample variance over `samples` draws.
    Sampled { samples: usize, seed: u64 },
}

/// Nodal variances Σ_ii of the coefficient vector (variance of the field at node i).
pub fn pointwise_variance_field(op: &dyn CovarianceAction, mode: VarianceMode) -> Result<Vec<f64>> {
    let n = op.dim();
    match mode {
        VarianceMode::Dense { threshold } => {
            if n > threshold {
                return Err(OedError::DenseThresholdExceeded { n, threshold });
            }
            let mut out = vec![0.0; n];
            let mut e = vec![0.0; n];
            for i in 0..n {
                e[i] = 1.0;
                out[i] = op.apply_covariance(&e)?[i];
                e[i] = 0.0;
            }
            Ok(out)
        }
        VarianceMode::Sampled { samples, seed } => {
            if samples < 2 {
                return Err(OedError::InvalidArgument("need at least two samples".into()));
            }
            let mut rng = crate::rng::substream(seed, "variance-field", 0);
            let mut acc = vec![0.0; n];
            for _ in 0..samples {
                let s = op.sample_centered(&mut rng)?;
                for (a, v) in acc.iter_mut().zip(&s) {
                    *a += v * v;
                }
            }
            Ok(acc.into_iter().map(|a| a / samples as f64).collect())
        }
    }
}
