//! Structured triangulations of rectangles.

use std::sync::Arc;

use crate::error::{OedError, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self { x0, x1, y0, y1 }
    }

    pub fn unit_square() -> Self {
        Self::new(0.0, 1.0, 0.0, 1.0)
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, p: [f64; 2], tol: f64) -> bool {
        p[0] >= self.x0 - tol && p[0] <= self.x1 + tol && p[1] >= self.y0 - tol && p[1] <= self.y1 + tol
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        [
            [self.x0, self.y0],
            [self.x1, self.y0],
            [self.x0, self.y1],
            [self.x1, self.y1],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryMarker {
    DirichletTop,
    DirichletBottom,
    Neumann,
    /// Dirichlet-zero node within the well radius of corner `k` (0..4).
    Well(u8),
}

impl BoundaryMarker {
    pub fn is_dirichlet(self) -> bool {
        !matches!(self, BoundaryMarker::Neumann)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarkerRule {
    /// Top and bottom edges Dirichlet, left and right edges Neumann.
    TopBottomDirichlet,
    /// All edges Neumann except nodes within `radius` of a corner, which are Dirichlet-zero.
    CornerWells { radius: f64 },
}

#[derive(Debug, Clone)]
pub struct Mesh {
    nodes: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary_markers: Vec<Option<BoundaryMarker>>,
    element_areas: Vec<f64>,
    domain: Rect,
    nx: usize,
    ny: usize,
}

/// Builds the right-triangle split of an `nx` × `ny` cell grid.
pub fn build_rect_mesh(nx: usize, ny: usize, domain: Rect, rule: MarkerRule) -> Result<Arc<Mesh>> {
    if nx == 0 || ny == 0 {
        return Err(OedError::InvalidMesh(format!("zero cell count ({nx} x {ny})")));
    }
    if !(domain.x1 > domain.x0 && domain.y1 > domain.y0) {
        return Err(OedError::InvalidMesh("degenerate domain rectangle".into()));
    }
    let hx = (domain.x1 - domain.x0) / nx as f64;
    let hy = (domain.y1 - domain.y0) / ny as f64;
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let x = if i == nx { domain.x1 } else { domain.x0 + i as f64 * hx };
            let y = if j == ny { domain.y1 } else { domain.y0 + j as f64 * hy };
            nodes.push([x, y]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let n00 = id(i, j);
            let n10 = id(i + 1, j);
            let n01 = id(i, j + 1);
            let n11 = id(i + 1, j + 1);
            triangles.push([n00, n10, n11]);
            triangles.push([n00, n11, n01]);
        }
    }
    let mut markers = vec![None; nodes.len()];
    for j in 0..=ny {
        for i in 0..=nx {
            let on_boundary = i == 0 || i == nx || j == 0 || j == ny;
            let k = id(i, j);
            markers[k] = match rule {
                MarkerRule::TopBottomDirichlet => {
                    if j == ny {
                        Some(BoundaryMarker::DirichletTop)
                    } else if j == 0 {
                        Some(BoundaryMarker::DirichletBottom)
                    } else if on_boundary {
                        Some(BoundaryMarker::Neumann)
                    } else {
                        None
                    }
                }
                MarkerRule::CornerWells { radius } => {
                    let p = nodes[k];
                    let well = domain.corners().iter().position(|c| {
                        let dx = p[0] - c[0];
                        let dy = p[1] - c[1];
                        (dx * dx + dy * dy).sqrt() <= radius * (1.0 + 1e-12)
                    });
                    match well {
                        Some(w) => Some(BoundaryMarker::Well(w as u8)),
                        None if on_boundary => Some(BoundaryMarker::Neumann),
                        None => None,
                    }
                }
            };
        }
    }
    let element_areas = triangles
        .iter()
        .map(|t| signed_area(nodes[t[0]], nodes[t[1]], nodes[t[2]]))
        .collect::<Vec<_>>();
    if let Some(e) = element_areas.iter().position(|&a| !(a > 0.0)) {
        return Err(OedError::InvalidMesh(format!("triangle {e} has nonpositive area")));
    }
    Ok(Arc::new(Mesh {
        nodes,
        triangles,
        boundary_markers: markers,
        element_areas,
        domain,
        nx,
        ny,
    }))
}

pub fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

impl Mesh {
    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_markers(&self) -> &[Option<BoundaryMarker>] {
        &self.boundary_markers
    }

    pub fn element_areas(&self) -> &[f64] {
        &self.element_areas
    }

    pub fn domain(&self) -> Rect {
        self.domain
    }

    pub fn cells(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn total_area(&self) -> f64 {
        self.element_areas.iter().sum()
    }

    pub fn is_boundary_node(&self, k: usize) -> bool {
        let (nx, ny) = (self.nx, self.ny);
        let i = k % (nx + 1);
        let j = k / (nx + 1);
        i == 0 || i == nx || j == 0 || j == ny
    }

    pub fn is_dirichlet(&self, k: usize) -> bool {
        self.boundary_markers[k].is_some_and(|m| m.is_dirichlet())
    }

    /// Index of the node closest to `p` (ties broken by lowest index).
    pub fn nearest_node(&self, p: [f64; 2]) -> usize {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (k, q) in self.nodes.iter().enumerate() {
            let d = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
            if d < bd {
                bd = d;
                best = k;
            }
        }
        best
    }

    /// Triangle containing `p` and its barycentric coordinates.
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        let d = self.domain;
        let tol = 1e-12 * (d.x1 - d.x0).max(d.y1 - d.y0);
        if !d.contains(p, tol) {
            return None;
        }
        let hx = (d.x1 - d.x0) / self.nx as f64;
        let hy = (d.y1 - d.y0) / self.ny as f64;
        let ci = (((p[0] - d.x0) / hx).floor().max(0.0) as usize).min(self.nx - 1);
        let cj = (((p[1] - d.y0) / hy).floor().max(0.0) as usize).min(self.ny - 1);
        let cell = cj * self.nx + ci;
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for e in [2 * cell, 2 * cell + 1] {
            let lam = self.barycentric(e, p);
            let worst = lam.iter().cloned().fold(f64::INFINITY, f64::min);
            if best.as_ref().is_none_or(|b| worst > b.2) {
                best = Some((e, lam, worst));
            }
        }
        best.map(|(e, lam, _)| (e, lam))
    }

    pub fn barycentric(&self, e: usize, p: [f64; 2]) -> [f64; 3] {
        let t = self.triangles[e];
        let (a, b, c) = (self.nodes[t[0]], self.nodes[t[1]], self.nodes[t[2]]);
        let area = self.element_areas[e];
        let l0 = signed_area(p, b, c) / area;
        let l1 = signed_area(a, p, c) / area;
        [l0, l1, 1.0 - l0 - l1]
    }

    pub fn centroid(&self, e: usize) -> [f64; 2] {
        let t = self.triangles[e];
        let mut c = [0.0; 2];
        for &k in &t {
            c[0] += self.nodes[k][0] / 3.0;
            c[1] += self.nodes[k][1] / 3.0;
        }
        c
    }

    /// Boundary edges (node pairs) on Neumann parts of the boundary.
    pub fn neumann_edges(&self) -> Vec<[usize; 2]> {
        let (nx, ny) = (self.nx, self.ny);
        let id = |i: usize, j: usize| j * (nx + 1) + i;
        let mut edges = Vec::new();
        let mut push = |a: usize, b: usize| {
            let neumann = |k: usize| {
                matches!(self.boundary_markers[k], Some(BoundaryMarker::Neumann))
            };
            if neumann(a) || neumann(b) {
                edges.push([a, b]);
            }
        };
        for i in 0..nx {
            push(id(i, 0), id(i + 1, 0));
            push(id(i, ny), id(i + 1, ny));
        }
        for j in 0..ny {
            push(id(0, j), id(0, j + 1));
            push(id(nx, j), id(nx, j + 1));
        }
        edges
    }
}
