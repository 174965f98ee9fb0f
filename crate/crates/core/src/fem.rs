//! P1 finite-element assembly on triangle meshes.
//!
//! The coefficient exp(m) is evaluated with one-point centroid quadrature, m being
//! interpolated at the centroid. All derivative blocks below are exact derivatives of that
//! discretization.

use std::sync::Arc;

use crate::error::{OedError, Result};
use crate::mesh::Mesh;
use crate::sparse::SparseOperator;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StiffnessMode {
    /// Coefficient exp(m) with centroid quadrature.
    ExpM,
    /// Constant anisotropy tensor Θ (must be symmetric positive definite).
    ThetaTensor([[f64; 2]; 2]),
}

/// Mesh geometry plus the node-graph sparsity pattern shared by all assembled operators.
#[derive(Debug, Clone)]
pub struct FemSpace {
    mesh: Arc<Mesh>,
    grads: Vec<[[f64; 2]; 3]>,
    pattern: SparseOperator,
    slots: Vec<[usize; 9]>,
}

impl FemSpace {
    pub fn new(mesh: Arc<Mesh>) -> Self {
        let n = mesh.num_nodes();
        let mut grads = Vec::with_capacity(mesh.num_triangles());
        for (e, t) in mesh.triangles().iter().enumerate() {
            let p = [mesh.nodes()[t[0]], mesh.nodes()[t[1]], mesh.nodes()[t[2]]];
            let two_a = 2.0 * mesh.element_areas()[e];
            let mut g = [[0.0; 2]; 3];
            for a in 0..3 {
                let b = p[(a + 1) % 3];
                let c = p[(a + 2) % 3];
                g[a] = [(b[1] - c[1]) / two_a, (c[0] - b[0]) / two_a];
            }
            grads.push(g);
        }
        let mut trip = Vec::with_capacity(9 * mesh.num_triangles());
        for t in mesh.triangles() {
            for &a in t {
                for &b in t {
                    trip.push((a, b, 0.0));
                }
            }
        }
        let pattern = SparseOperator::from_triplets(n, n, &trip, true).expect("mesh indices valid");
        let slot = |r: usize, c: usize| {
            let lo = pattern.indptr()[r];
            let hi = pattern.indptr()[r + 1];
            lo + pattern.indices()[lo..hi].binary_search(&c).expect("pattern entry")
        };
        let slots = mesh
            .triangles()
            .iter()
            .map(|t| {
                let mut s = [0usize; 9];
                for a in 0..3 {
                    for b in 0..3 {
                        s[3 * a + b] = slot(t[a], t[b]);
                    }
                }
                s
            })
            .collect();
        Self {
            mesh,
            grads,
            pattern,
            slots,
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn num_nodes(&self) -> usize {
        self.mesh.num_nodes()
    }

    pub fn gradients(&self, e: usize) -> &[[f64; 2]; 3] {
        &self.grads[e]
    }

    fn check_field(&self, f: &[f64], what: &'static str) -> Result<()> {
        if f.len() != self.num_nodes() {
            return Err(OedError::DimensionMismatch {
                what,
                expected: self.num_nodes(),
                got: f.len(),
            });
        }
        Ok(())
    }

    /// Assembles Σ_e k_e(a, b) into the shared pattern.
    fn assemble_with(&self, mut local: impl FnMut(usize, &mut [f64; 9])) -> SparseOperator {
        let mut op = self.pattern.clone();
        let vals = op.values_mut();
        let mut k = [0.0; 9];
        for (e, slots) in self.slots.iter().enumerate() {
            local(e, &mut k);
            for (s, v) in slots.iter().zip(&k) {
                vals[*s] += v;
            }
        }
        op
    }

    pub fn mass(&self) -> SparseOperator {
        let areas = self.mesh.element_areas();
        self.assemble_with(|e, k| {
            let a = areas[e] / 12.0;
            for r in 0..3 {
                for c in 0..3 {
                    k[3 * r + c] = if r == c { 2.0 * a } else { a };
                }
            }
        })
    }

    /// Stiffness with a piecewise-constant scalar coefficient per element.
    pub fn stiffness_elementwise(&self, coeff: &[f64]) -> SparseOperator {
        assert_eq!(coeff.len(), self.mesh.num_triangles());
        let areas = self.mesh.element_areas();
        self.assemble_with(|e, k| {
            let g = &self.grads[e];
            let s = coeff[e] * areas[e];
            for r in 0..3 {
                for c in 0..3 {
                    k[3 * r + c] = s * (g[r][0] * g[c][0] + g[r][1] * g[c][1]);
                }
            }
        })
    }

    pub fn stiffness_tensor(&self, theta: [[f64; 2]; 2]) -> Result<SparseOperator> {
        check_spd_tensor(theta)?;
        let areas = self.mesh.element_areas();
        Ok(self.assemble_with(|e, k| {
            let g = &self.grads[e];
            for r in 0..3 {
                let tg = [
                    theta[0][0] * g[r][0] + theta[0][1] * g[r][1],
                    theta[1][0] * g[r][0] + theta[1][1] * g[r][1],
                ];
                for c in 0..3 {
                    k[3 * r + c] = areas[e] * (tg[0] * g[c][0] + tg[1] * g[c][1]);
                }
            }
        }))
    }

    pub fn weighted_stiffness(&self, m: &[f64], mode: StiffnessMode) -> Result<SparseOperator> {
        match mode {
            StiffnessMode::ExpM => {
                self.check_field(m, "coefficient field")?;
                Ok(self.stiffness_elementwise(&self.exp_centroid(m)))
            }
            StiffnessMode::ThetaTensor(theta) => self.stiffness_tensor(theta),
        }
    }

    /// Mean of the three vertex values per element (P1 value at the centroid).
    pub fn centroid_mean(&self, f: &[f64]) -> Vec<f64> {
        self.mesh
            .triangles()
            .iter()
            .map(|t| (f[t[0]] + f[t[1]] + f[t[2]]) / 3.0)
            .collect()
    }

    /// exp(m) at element centroids.
    pub fn exp_centroid(&self, m: &[f64]) -> Vec<f64> {
        self.centroid_mean(m).into_iter().map(f64::exp).collect()
    }

    /// Per element A_e ∇a·∇b.
    pub fn grad_dot(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let areas = self.mesh.element_areas();
        self.mesh
            .triangles()
            .iter()
            .enumerate()
            .map(|(e, t)| {
                let ga = self.grad_of(e, t, a);
                let gb = self.grad_of(e, t, b);
                areas[e] * (ga[0] * gb[0] + ga[1] * gb[1])
            })
            .collect()
    }

    #[inline]
    fn grad_of(&self, e: usize, t: &[usize; 3], f: &[f64]) -> [f64; 2] {
        let g = &self.grads[e];
        let mut r = [0.0; 2];
        for a in 0..3 {
            r[0] += f[t[a]] * g[a][0];
            r[1] += f[t[a]] * g[a][1];
        }
        r
    }

    /// Action of the stiffness matrix with element coefficient `coeff` on `f`, without
    /// assembling: returns the vector with entries Σ_e coeff_e A_e ∇φ_a·∇f.
    pub fn stiffness_apply(&self, coeff: &[f64], f: &[f64]) -> Vec<f64> {
        let areas = self.mesh.element_areas();
        let mut out = vec![0.0; self.num_nodes()];
        for (e, t) in self.mesh.triangles().iter().enumerate() {
            if coeff[e] == 0.0 {
                continue;
            }
            let gf = self.grad_of(e, t, f);
            let s = coeff[e] * areas[e];
            let g = &self.grads[e];
            for a in 0..3 {
                out[t[a]] += s * (g[a][0] * gf[0] + g[a][1] * gf[1]);
            }
        }
        out
    }

    /// Distributes `per_elem[e] / 3` to each vertex of element e.
    pub fn scatter_third(&self, per_elem: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_nodes()];
        for (t, v) in self.mesh.triangles().iter().zip(per_elem) {
            for &a in t {
                out[a] += v / 3.0;
            }
        }
        out
    }

    /// Matrix of ∂(K(m) u)/∂m: entry (a, c) = Σ_{e∋a,c} exp(m̄_e)/3 · A_e ∇φ_a·∇u.
    pub fn coupling_matrix(&self, u: &[f64], m: &[f64]) -> Result<SparseOperator> {
        self.check_field(u, "linearization field")?;
        self.check_field(m, "parameter field")?;
        let kappa = self.exp_centroid(m);
        let areas = self.mesh.element_areas();
        let mut op = self.assemble_with(|e, k| {
            let t = &self.mesh.triangles()[e];
            let gu = self.grad_of(e, t, u);
            let g = &self.grads[e];
            let s = kappa[e] * areas[e] / 3.0;
            for r in 0..3 {
                let v = s * (g[r][0] * gu[0] + g[r][1] * gu[1]);
                for c in 0..3 {
                    k[3 * r + c] = v;
                }
            }
        });
        let (n, ind, val) = (op.nrows(), op.indices().to_vec(), op.values().to_vec());
        op = SparseOperator::from_csr(n, n, op.indptr().to_vec(), ind, val, false);
        Ok(op)
    }

    /// Second parameter derivative of ⟨exp(m)∇u, ∇p⟩: entry (c, d) = Σ_e exp(m̄_e)/9 · A_e ∇u·∇p.
    pub fn second_derivative_matrix(&self, u: &[f64], p: &[f64], m: &[f64]) -> Result<SparseOperator> {
        self.check_field(u, "linearization field")?;
        self.check_field(p, "adjoint field")?;
        self.check_field(m, "parameter field")?;
        let kappa = self.exp_centroid(m);
        let gd = self.grad_dot(u, p);
        Ok(self.assemble_with(|e, k| {
            let v = kappa[e] * gd[e] / 9.0;
            k.iter_mut().for_each(|x| *x = v);
        }))
    }

    /// Physical coordinates of the quadrature points of element e.
    fn quad_points(&self, e: usize) -> [([f64; 2], [f64; 3], f64); 7] {
        let nodes = self.mesh.nodes();
        let t = self.mesh.triangles()[e];
        let area = self.mesh.element_areas()[e];
        let mut out = [([0.0; 2], [0.0; 3], 0.0); 7];
        for (q, (lam, w)) in QUAD7.iter().enumerate() {
            let x = [
                lam[0] * nodes[t[0]][0] + lam[1] * nodes[t[1]][0] + lam[2] * nodes[t[2]][0],
                lam[0] * nodes[t[0]][1] + lam[1] * nodes[t[1]][1] + lam[2] * nodes[t[2]][1],
            ];
            out[q] = (x, *lam, w * area);
        }
        out
    }

    /// ∫ f φ_a with a degree-5 seven-point rule on every element.
    pub fn load_vector(&self, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.num_nodes()];
        for (e, t) in self.mesh.triangles().iter().enumerate() {
            for (x, lam, w) in self.quad_points(e) {
                let fx = f(x) * w;
                for a in 0..3 {
                    out[t[a]] += fx * lam[a];
                }
            }
        }
        out
    }

    /// Mass matrix with weight f(x): ∫ f φ_a φ_b.
    pub fn weighted_mass(&self, f: impl Fn([f64; 2]) -> f64) -> SparseOperator {
        self.assemble_with(|e, k| {
            k.iter_mut().for_each(|x| *x = 0.0);
            for (x, lam, w) in self.quad_points(e) {
                let fx = f(x) * w;
                for r in 0..3 {
                    for c in 0..3 {
                        k[3 * r + c] += fx * lam[r] * lam[c];
                    }
                }
            }
        })
    }

    /// ∫_{Γ_N} h φ_a ds for a constant flux h.
    pub fn neumann_load(&self, h: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.num_nodes()];
        if h == 0.0 {
            return out;
        }
        let nodes = self.mesh.nodes();
        for [a, b] in self.mesh.neumann_edges() {
            let len = ((nodes[a][0] - nodes[b][0]).powi(2) + (nodes[a][1] - nodes[b][1]).powi(2)).sqrt();
            out[a] += 0.5 * h * len;
            out[b] += 0.5 * h * len;
        }
        out
    }
}

const QW0: f64 = 0.225;
const QW1: f64 = 0.132_394_152_788_506_2;
const QW2: f64 = 0.125_939_180_544_827_2;
const QA1: f64 = 0.059_715_871_789_769_8;
const QB1: f64 = 0.470_142_064_105_115_1;
const QA2: f64 = 0.797_426_985_353_087_3;
const QB2: f64 = 0.101_286_507_323_456_3;
/// Seven-point degree-5 rule on the reference triangle (barycentric point, weight / area).
const QUAD7: [([f64; 3], f64); 7] = [
    ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], QW0),
    ([QA1, QB1, QB1], QW1),
    ([QB1, QA1, QB1], QW1),
    ([QB1, QB1, QA1], QW1),
    ([QA2, QB2, QB2], QW2),
    ([QB2, QA2, QB2], QW2),
    ([QB2, QB2, QA2], QW2),
];

pub fn check_spd_tensor(theta: [[f64; 2]; 2]) -> Result<()> {
    let sym = (theta[0][1] - theta[1][0]).abs() <= 1e-14 * (theta[0][0].abs() + theta[1][1].abs());
    let det = theta[0][0] * theta[1][1] - theta[0][1] * theta[1][0];
    if !sym || !(theta[0][0] > 0.0) || !(det > 0.0) {
        return Err(OedError::NonSpdTensor);
    }
    Ok(())
}

pub fn assemble_mass(mesh: &Arc<Mesh>) -> SparseOperator {
    FemSpace::new(mesh.clone()).mass()
}

pub fn assemble_weighted_stiffness(
    mesh: &Arc<Mesh>,
    m: &[f64],
    mode: StiffnessMode,
) -> Result<SparseOperator> {
    FemSpace::new(mesh.clone()).weighted_stiffness(m, mode)
}

/// Observation operator: row j holds the barycentric weights of sensor j.
pub fn build_observation(mesh: &Mesh, sensors: &[[f64; 2]]) -> Result<SparseOperator> {
    let mut trip = Vec::with_capacity(3 * sensors.len());
    for (j, &p) in sensors.iter().enumerate() {
        let (e, lam) = mesh.locate(p).ok_or(OedError::SensorOutsideDomain {
            index: j,
            x: p[0],
            y: p[1],
        })?;
        let t = mesh.triangles()[e];
        for a in 0..3 {
            let w = lam[a].clamp(0.0, 1.0);
            if w > 1e-14 {
                trip.push((j, t[a], w));
            }
        }
    }
    let mut b = SparseOperator::from_triplets(sensors.len(), mesh.num_nodes(), &trip, false)?;
    // renormalize after clamping so rows sum to one exactly
    let sums = b.row_sums();
    let indptr = b.indptr().to_vec();
    let vals = b.values_mut();
    for (r, s) in sums.iter().enumerate() {
        for v in &mut vals[indptr[r]..indptr[r + 1]] {
            *v /= s;
        }
    }
    Ok(b)
}

/// Free/constrained partition of the nodes.
#[derive(Debug, Clone)]
pub struct DofMap {
    free: Vec<usize>,
    constrained: Vec<usize>,
    pos: Vec<Option<usize>>,
}

impl DofMap {
    pub fn from_mask(constrained_mask: &[bool]) -> Self {
        let mut free = Vec::new();
        let mut constrained = Vec::new();
        let mut pos = vec![None; constrained_mask.len()];
        for (k, &c) in constrained_mask.iter().enumerate() {
            if c {
                constrained.push(k);
            } else {
                pos[k] = Some(free.len());
                free.push(k);
            }
        }
        Self {
            free,
            constrained,
            pos,
        }
    }

    pub fn from_mesh(mesh: &Mesh) -> Self {
        let mask: Vec<bool> = (0..mesh.num_nodes()).map(|k| mesh.is_dirichlet(k)).collect();
        Self::from_mask(&mask)
    }

    pub fn free(&self) -> &[usize] {
        &self.free
    }

    pub fn constrained(&self) -> &[usize] {
        &self.constrained
    }

    pub fn positions(&self) -> &[Option<usize>] {
        &self.pos
    }

    pub fn num_free(&self) -> usize {
        self.free.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.pos.len()
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&k| full[k]).collect()
    }

    /// Zero-extension of a free-dof vector to all nodes.
    pub fn extend(&self, free_vals: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.pos.len()];
        for (i, &k) in self.free.iter().enumerate() {
            out[k] = free_vals[i];
        }
        out
    }

    /// Free-free block of a square operator.
    pub fn free_block(&self, op: &SparseOperator) -> SparseOperator {
        op.submatrix(&self.free, &self.pos, self.free.len())
    }

    /// Rows restricted to free dofs, all columns kept.
    pub fn free_rows(&self, op: &SparseOperator) -> SparseOperator {
        let all: Vec<Option<usize>> = (0..op.ncols()).map(Some).collect();
        let mut s = op.submatrix(&self.free, &all, op.ncols());
        s = SparseOperator::from_csr(
            s.nrows(),
            s.ncols(),
            s.indptr().to_vec(),
            s.indices().to_vec(),
            s.values().to_vec(),
            false,
        );
        s
    }
}

/// Result of symmetric Dirichlet elimination.
#[derive(Debug, Clone)]
pub struct ConstrainedSystem {
    pub matrix: SparseOperator,
    pub rhs: Vec<f64>,
    pub dofs: DofMap,
    pub lift: Vec<f64>,
}

impl ConstrainedSystem {
    /// Full nodal vector from a free-dof solution plus the boundary lift.
    pub fn expand(&self, x_free: &[f64]) -> Vec<f64> {
        let mut out = self.lift.clone();
        for (i, &k) in self.dofs.free().iter().enumerate() {
            out[k] = x_free[i];
        }
        out
    }
}

/// Eliminates constrained nodes symmetrically: A_FF x_F = b_F − A_FD g_D.
pub fn apply_dirichlet(
    op: &SparseOperator,
    rhs: &[f64],
    constrained: &[usize],
    values: &[f64],
) -> Result<ConstrainedSystem> {
    if constrained.len() != values.len() {
        return Err(OedError::DimensionMismatch {
            what: "Dirichlet values",
            expected: constrained.len(),
            got: values.len(),
        });
    }
    let n = op.nrows();
    if rhs.len() != n {
        return Err(OedError::DimensionMismatch {
            what: "right-hand side",
            expected: n,
            got: rhs.len(),
        });
    }
    let mut mask = vec![false; n];
    let mut lift = vec![0.0; n];
    for (&k, &v) in constrained.iter().zip(values) {
        if k >= n {
            return Err(OedError::InvalidArgument(format!("constrained node {k} out of range")));
        }
        mask[k] = true;
        lift[k] = v;
    }
    let dofs = DofMap::from_mask(&mask);
    let al = op.matvec(&lift);
    let b: Vec<f64> = dofs.free().iter().map(|&k| rhs[k] - al[k]).collect();
    Ok(ConstrainedSystem {
        matrix: dofs.free_block(op),
        rhs: b,
        dofs,
        lift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_rect_mesh, MarkerRule, Rect};

    fn space(nx: usize) -> FemSpace {
        FemSpace::new(build_rect_mesh(nx, nx, Rect::unit_square(), MarkerRule::TopBottomDirichlet).unwrap())
    }

    #[test]
    fn mass_sums_to_area() {
        let s = space(7);
        assert!((s.mass().entry_sum() - 1.0).abs() < 1e-12);
        let m2 = build_rect_mesh(11, 6, Rect::new(0.0, 2.2, 0.0, 1.2), MarkerRule::TopBottomDirichlet)
            .unwrap();
        assert!((assemble_mass(&m2).entry_sum() - 2.64).abs() < 1e-12);
    }

    #[test]
    fn stiffness_annihilates_constants() {
        let s = space(5);
        let k = s.weighted_stiffness(&vec![0.3; 36], StiffnessMode::ExpM).unwrap();
        for v in k.matvec(&vec![1.0; 36]) {
            assert!(v.abs() < 1e-13);
        }
    }

    #[test]
    fn exp_log2_doubles() {
        let s = space(4);
        let k0 = s.weighted_stiffness(&vec![0.0; 25], StiffnessMode::ExpM).unwrap();
        let k2 = s
            .weighted_stiffness(&vec![std::f64::consts::LN_2; 25], StiffnessMode::ExpM)
            .unwrap();
        for (a, b) in k0.values().iter().zip(k2.values()) {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn non_spd_theta_rejected() {
        let s = space(2);
        assert!(s.stiffness_tensor([[1.0, 0.0], [0.0, -1.0]]).is_err());
        assert!(s.stiffness_tensor([[1.0, 0.5], [0.0, 1.0]]).is_err());
    }

    #[test]
    fn observation_rows() {
        let mesh = build_rect_mesh(4, 4, Rect::unit_square(), MarkerRule::TopBottomDirichlet).unwrap();
        let b = build_observation(&mesh, &[[0.25, 0.5], [0.31, 0.77], [1.0, 1.0]]).unwrap();
        assert_eq!(b.get(0, 2 * 5 + 1), 1.0);
        for s in b.row_sums() {
            assert!((s - 1.0).abs() < 1e-14);
        }
        let yfield: Vec<f64> = mesh.nodes().iter().map(|p| p[1]).collect();
        let by = b.matvec(&yfield);
        assert!((by[1] - 0.77).abs() < 1e-14);
        let err = build_observation(&mesh, &[[0.5, 0.5], [0.5, 1.5]]).unwrap_err();
        assert!(matches!(err, OedError::SensorOutsideDomain { index: 1, .. }));
    }

    #[test]
    fn load_vector_integrates_quadratics() {
        let s = space(6);
        let f = s.load_vector(|x| x[0] * x[0] + x[1]);
        let total: f64 = f.iter().sum();
        assert!((total - (1.0 / 3.0 + 0.5)).abs() < 1e-13);
    }

    #[test]
    fn dirichlet_all_neumann_unchanged() {
        let s = space(3);
        let m = s.mass();
        let rhs = vec![1.0; 16];
        let cs = apply_dirichlet(&m, &rhs, &[], &[]).unwrap();
        assert_eq!(cs.matrix.to_dense(), m.to_dense());
        assert_eq!(cs.rhs, rhs);
    }
}
