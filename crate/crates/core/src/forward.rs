//! Elliptic forward model −∇·(e^m ∇u) = f with mixed boundary conditions, observation, and
//! synthetic data.

use std::sync::Arc;

use rand::Rng;

use crate::cholesky::{SkylineCholesky, SkylineSymbolic};
use crate::error::{OedError, Result};
use crate::fem::{build_observation, DofMap, FemSpace};
use crate::krylov::{SolveCounters, SolveKind};
use crate::mesh::{build_rect_mesh, BoundaryMarker, MarkerRule, Mesh, Rect};
use crate::prior::{PriorModel, SamplingMode};
use crate::rng::{standard_normal_vec, streams, substream};
use crate::sparse::SparseOperator;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    Zero,
    /// f(x) = c / (2π l) · exp(−|x − x0|² / (2 l))
    MollifiedPoint { c: f64, l: f64, x0: [f64; 2] },
}

impl SourceSpec {
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        match *self {
            SourceSpec::Zero => 0.0,
            SourceSpec::MollifiedPoint { c, l, x0 } => {
                let r2 = (x[0] - x0[0]).powi(2) + (x[1] - x0[1]).powi(2);
                c / (2.0 * std::f64::consts::PI * l) * (-r2 / (2.0 * l)).exp()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SensorGrid {
    /// nx × ny lattice at the interior points ((i+1)/(nx+1), (j+1)/(ny+1)) of the domain.
    Lattice { nx: usize, ny: usize },
    /// Lattice with nx·ny = count and nx/ny as close to the domain aspect ratio as possible.
    Count { count: usize },
}

impl SensorGrid {
    pub fn points(&self, domain: Rect) -> Vec<[f64; 2]> {
        let (nx, ny) = match *self {
            SensorGrid::Lattice { nx, ny } => (nx, ny),
            SensorGrid::Count { count } => lattice_shape(count, domain),
        };
        let mut pts = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let x = domain.x0 + (domain.x1 - domain.x0) * (i + 1) as f64 / (nx + 1) as f64;
                let y = domain.y0 + (domain.y1 - domain.y0) * (j + 1) as f64 / (ny + 1) as f64;
                pts.push([x, y]);
            }
        }
        pts
    }
}

fn lattice_shape(count: usize, domain: Rect) -> (usize, usize) {
    let aspect = (domain.x1 - domain.x0) / (domain.y1 - domain.y0);
    let mut best = (count, 1);
    let mut score = f64::INFINITY;
    for ny in 1..=count {
        if count % ny != 0 {
            continue;
        }
        let nx = count / ny;
        let s = ((nx as f64 / ny as f64) / aspect).ln().abs();
        if s < score - 1e-12 {
            score = s;
            best = (nx, ny);
        }
    }
    best
}

/// Analytic log-conductivity used as the generating truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthField {
    /// Sum of three anisotropic Gaussian blobs, elongated in y.
    AnisotropicBlobs,
}

impl TruthField {
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        match self {
            TruthField::AnisotropicBlobs => {
                const BLOBS: [(f64, f64, f64, f64, f64); 3] = [
                    (3.6, 0.30, 0.65, 0.18, 0.42),
                    (-3.0, 0.72, 0.35, 0.15, 0.375),
                    (1.8, 0.62, 0.85, 0.225, 0.15),
                ];
                BLOBS
                    .iter()
                    .map(|&(a, cx, cy, sx, sy)| {
                        let r = ((x[0] - cx) / sx).powi(2) + ((x[1] - cy) / sy).powi(2);
                        a * (-0.5 * r).exp()
                    })
                    .sum()
            }
        }
    }

    pub fn nodal(&self, mesh: &Mesh) -> Vec<f64> {
        mesh.nodes().iter().map(|&p| self.eval(p)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub domain: Rect,
    pub nx: usize,
    pub ny: usize,
    pub markers: MarkerRule,
    pub dirichlet_top: f64,
    pub dirichlet_bottom: f64,
    pub neumann_flux: f64,
    pub source: SourceSpec,
    pub sensors: SensorGrid,
    pub sigma: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::baseline(32, 32)
    }
}

impl ScenarioConfig {
    /// Unit square, pressure 1 on top and 0 on the bottom, no-flow sides, no source,
    /// 10 × 10 sensor lattice, σ = 0.05.
    pub fn baseline(nx: usize, ny: usize) -> Self {
        Self {
            domain: Rect::unit_square(),
            nx,
            ny,
            markers: MarkerRule::TopBottomDirichlet,
            dirichlet_top: 1.0,
            dirichlet_bottom: 0.0,
            neumann_flux: 0.0,
            source: SourceSpec::Zero,
            sensors: SensorGrid::Lattice { nx: 10, ny: 10 },
            sigma: 0.05,
        }
    }

    /// (0, 2.2) × (0, 1.2) with Dirichlet-zero corner wells and a mollified injection well.
    pub fn wells(nx: usize, ny: usize, well_radius: f64) -> Self {
        Self {
            domain: Rect::new(0.0, 2.2, 0.0, 1.2),
            nx,
            ny,
            markers: MarkerRule::CornerWells { radius: well_radius },
            dirichlet_top: 0.0,
            dirichlet_bottom: 0.0,
            neumann_flux: 0.0,
            source: SourceSpec::MollifiedPoint {
                c: 50.0,
                l: 1e-4,
                x0: [1.1, 0.6],
            },
            sensors: SensorGrid::Lattice { nx: 10, ny: 5 },
            sigma: 0.05,
        }
    }

    pub fn build_mesh(&self) -> Result<Arc<Mesh>> {
        build_rect_mesh(self.nx, self.ny, self.domain, self.markers)
    }
}

/// Stiffness K_FF(m) on free dofs, factorized.
#[derive(Debug, Clone)]
pub struct StateOperator {
    kappa: Vec<f64>,
    matrix: SparseOperator,
    chol: SkylineCholesky,
}

impl StateOperator {
    /// exp(m) at element centroids.
    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn matrix(&self) -> &SparseOperator {
        &self.matrix
    }

    /// Solves K_FF x = b on free dofs and records one forward-like solve.
    pub fn solve(&self, b: &[f64], kind: SolveKind, counters: &SolveCounters) -> Vec<f64> {
        counters.record_solve(kind);
        self.chol.solve(b)
    }
}

#[derive(Debug)]
pub struct ForwardModel {
    space: Arc<FemSpace>,
    dofs: DofMap,
    lift: Vec<f64>,
    load: Vec<f64>,
    obs: SparseOperator,
    sensors: Vec<[f64; 2]>,
    sigma: Vec<f64>,
    symbolic: Arc<SkylineSymbolic>,
    counters: Arc<SolveCounters>,
}

impl ForwardModel {
    pub fn new(space: Arc<FemSpace>, scenario: &ScenarioConfig, counters: Arc<SolveCounters>) -> Result<Self> {
        let sensors = scenario.sensors.points(scenario.domain);
        Self::with_sensors(space, scenario, sensors, counters)
    }

    pub fn with_sensors(
        space: Arc<FemSpace>,
        scenario: &ScenarioConfig,
        sensors: Vec<[f64; 2]>,
        counters: Arc<SolveCounters>,
    ) -> Result<Self> {
        if !(scenario.sigma > 0.0) {
            return Err(OedError::InvalidArgument("noise level must be positive".into()));
        }
        let mesh = space.mesh().clone();
        let dofs = DofMap::from_mesh(&mesh);
        if dofs.num_free() == 0 {
            return Err(OedError::InvalidArgument("no free degrees of freedom".into()));
        }
        let lift: Vec<f64> = mesh
            .boundary_markers()
            .iter()
            .map(|mk| match mk {
                Some(BoundaryMarker::DirichletTop) => scenario.dirichlet_top,
                Some(BoundaryMarker::DirichletBottom) => scenario.dirichlet_bottom,
                _ => 0.0,
            })
            .collect();
        let source = scenario.source;
        let mut load = space.load_vector(|x| source.eval(x));
        for (l, h) in load.iter_mut().zip(space.neumann_load(scenario.neumann_flux)) {
            *l += h;
        }
        let obs = build_observation(&mesh, &sensors)?;
        let k0 = dofs.free_block(&space.stiffness_elementwise(&vec![1.0; mesh.num_triangles()]));
        let symbolic = Arc::new(SkylineSymbolic::analyze(&k0)?);
        let sigma = vec![scenario.sigma; sensors.len()];
        Ok(Self {
            space,
            dofs,
            lift,
            load,
            obs,
            sensors,
            sigma,
            symbolic,
            counters,
        })
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        self.space.mesh()
    }

    pub fn dofs(&self) -> &DofMap {
        &self.dofs
    }

    pub fn observation(&self) -> &SparseOperator {
        &self.obs
    }

    pub fn sensors(&self) -> &[[f64; 2]] {
        &self.sensors
    }

    pub fn num_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn counters(&self) -> &Arc<SolveCounters> {
        &self.counters
    }

    pub fn num_nodes(&self) -> usize {
        self.space.num_nodes()
    }

    /// Assembles and factorizes K_FF(m).
    pub fn state_operator(&self, m: &[f64]) -> Result<StateOperator> {
        if m.len() != self.num_nodes() {
            return Err(OedError::DimensionMismatch {
                what: "parameter field",
                expected: self.num_nodes(),
                got: m.len(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(OedError::InvalidArgument("parameter field is not finite".into()));
        }
        let kappa = self.space.exp_centroid(m);
        let k = self.space.stiffness_elementwise(&kappa);
        let matrix = self.dofs.free_block(&k);
        let chol = SkylineCholesky::factor_with(self.symbolic.clone(), &matrix)?;
        Ok(StateOperator { kappa, matrix, chol })
    }

    /// State u(m) on all nodes, with its factorized operator.
    pub fn solve_state_with(&self, m: &[f64]) -> Result<(Vec<f64>, StateOperator)> {
        let op = self.state_operator(m)?;
        let ku_lift = self.space.stiffness_apply(&op.kappa, &self.lift);
        let rhs: Vec<f64> = self
            .dofs
            .free()
            .iter()
            .map(|&k| self.load[k] - ku_lift[k])
            .collect();
        let uf = op.solve(&rhs, SolveKind::State, &self.counters);
        let mut u = self.lift.clone();
        for (i, &k) in self.dofs.free().iter().enumerate() {
            u[k] = uf[i];
        }
        Ok((u, op))
    }

    pub fn solve_state(&self, m: &[f64]) -> Result<Vec<f64>> {
        Ok(self.solve_state_with(m)?.0)
    }

    /// B u
    pub fn observe(&self, u: &[f64]) -> Vec<f64> {
        self.obs.matvec(u)
    }

    pub fn apply_param_to_obs(&self, m: &[f64]) -> Result<Vec<f64>> {
        Ok(self.observe(&self.solve_state(m)?))
    }

    /// W_σ r = diag(w_j / σ_j²) r
    pub fn weight_residual(&self, w: &[f64], r: &[f64]) -> Vec<f64> {
        r.iter()
            .zip(w)
            .zip(&self.sigma)
            .map(|((ri, wi), s)| wi * ri / (s * s))
            .collect()
    }

    /// Adjoint p ∈ V₀ solving K p = −Bᵀ W_σ (B u − d).
    pub fn solve_adjoint(&self, op: &StateOperator, u: &[f64], w: &[f64], d: &[f64]) -> Result<Vec<f64>> {
        self.check_design(w, d)?;
        let misfit: Vec<f64> = self.observe(u).iter().zip(d).map(|(a, b)| a - b).collect();
        let rhs_full = self.obs.matvec_transpose(&self.weight_residual(w, &misfit));
        let rhs: Vec<f64> = self.dofs.free().iter().map(|&k| -rhs_full[k]).collect();
        let pf = op.solve(&rhs, SolveKind::Adjoint, &self.counters);
        Ok(self.dofs.extend(&pf))
    }

    /// D v = [Bᵀ W_σ B v] restricted to free rows, for a full-node v.
    pub fn apply_misfit_block(&self, w: &[f64], v: &[f64]) -> Vec<f64> {
        let bv = self.observe(v);
        let full = self.obs.matvec_transpose(&self.weight_residual(w, &bv));
        self.dofs.restrict(&full)
    }

    pub fn check_design(&self, w: &[f64], d: &[f64]) -> Result<()> {
        let ns = self.num_sensors();
        if w.len() != ns {
            return Err(OedError::DimensionMismatch {
                what: "design weights",
                expected: ns,
                got: w.len(),
            });
        }
        if d.len() != ns {
            return Err(OedError::DimensionMismatch {
                what: "data vector",
                expected: ns,
                got: d.len(),
            });
        }
        Ok(())
    }

    /// Residual ‖K_FF u_F − b_F‖ / ‖b_F‖ of a computed state, for diagnostics.
    pub fn state_residual(&self, m: &[f64], u: &[f64]) -> Result<f64> {
        let kappa = self.space.exp_centroid(m);
        let ku = self.space.stiffness_apply(&kappa, u);
        let mut num = 0.0;
        let mut den = 0.0;
        for &k in self.dofs.free() {
            num += (ku[k] - self.load[k]).powi(2);
            den += self.load[k].powi(2) + ku[k].powi(2);
        }
        Ok(if den == 0.0 { 0.0 } else { (num / den).sqrt() })
    }
}

/// One synthetic observation vector with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSample {
    pub d: Vec<f64>,
    pub index: usize,
    pub master_seed: u64,
    /// Generating parameter field.
    pub m: Vec<f64>,
}

/// d = f(m) + η, η ~ N(0, diag σ²), with the noise drawn from `rng`.
pub fn synthesize_data<R: Rng + ?Sized>(model: &ForwardModel, m: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let f = model.apply_param_to_obs(m)?;
    let eta = standard_normal_vec(rng, f.len());
    Ok(f.iter()
        .zip(&eta)
        .zip(model.sigma())
        .map(|((fi, e), s)| fi + s * e)
        .collect())
}

/// Draws m_i from the prior and noisy data d_i = f(m_i) + η_i, i = 0..n_d, from the named
/// substreams `prior_stream` / `noise_stream`.
pub fn generate_data_samples_from(
    prior: &PriorModel,
    model: &ForwardModel,
    n_d: usize,
    master_seed: u64,
    prior_stream: &str,
    noise_stream: &str,
) -> Result<Vec<DataSample>> {
    if n_d == 0 {
        return Err(OedError::InvalidArgument("need at least one data sample".into()));
    }
    (0..n_d)
        .map(|i| {
            let mut rp = substream(master_seed, prior_stream, i as u64);
            let m = prior.sample(&mut rp, SamplingMode::ConsistentMass);
            let mut rn = substream(master_seed, noise_stream, i as u64);
            let d = synthesize_data(model, &m, &mut rn)?;
            Ok(DataSample {
                d,
                index: i,
                master_seed,
                m,
            })
        })
        .collect()
}

pub fn generate_data_samples(
    prior: &PriorModel,
    model: &ForwardModel,
    n_d: usize,
    master_seed: u64,
) -> Result<Vec<DataSample>> {
    generate_data_samples_from(prior, model, n_d, master_seed, streams::PRIOR_DRAWS, streams::NOISE)
}
