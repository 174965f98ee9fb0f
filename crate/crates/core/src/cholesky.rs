//! Envelope (skyline) Cholesky factorization with reverse Cuthill–McKee ordering.
//!
//! The symbolic part (ordering and envelope) depends only on the sparsity pattern and is
//! shared between numeric refactorizations, which is how the state operator is refactored
//! for every new parameter field.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::error::{OedError, Result};
use crate::sparse::SparseOperator;

/// Ordering and envelope of a symmetric pattern.
#[derive(Debug, Clone)]
pub struct SkylineSymbolic {
    n: usize,
    /// perm[new] = old
    perm: Vec<usize>,
    /// inv[old] = new
    inv: Vec<usize>,
    /// first column index stored in each (permuted) row
    first: Vec<usize>,
    /// offset of row i in the packed storage; row i occupies first[i]..=i
    offset: Vec<usize>,
}

impl SkylineSymbolic {
    pub fn analyze(a: &SparseOperator) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(OedError::InvalidArgument("Cholesky needs a square matrix".into()));
        }
        let n = a.nrows();
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for old in 0..n {
            let i = inv[old];
            for (c, _) in a.row(old) {
                let j = inv[c];
                if j < i {
                    first[i] = first[i].min(j);
                } else if i < j {
                    first[j] = first[j].min(i);
                }
            }
        }
        let mut offset = Vec::with_capacity(n + 1);
        let mut acc = 0;
        for i in 0..n {
            offset.push(acc);
            acc += i - first[i] + 1;
        }
        offset.push(acc);
        Ok(Self {
            n,
            perm,
            inv,
            first,
            offset,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn envelope_size(&self) -> usize {
        self.offset[self.n]
    }

    pub fn bandwidth(&self) -> usize {
        (0..self.n).map(|i| i - self.first[i]).max().unwrap_or(0)
    }
}

/// Numeric LLᵀ factor in envelope storage.
#[derive(Debug, Clone)]
pub struct SkylineCholesky {
    sym: Arc<SkylineSymbolic>,
    l: Vec<f64>,
}

impl SkylineCholesky {
    pub fn factor(a: &SparseOperator) -> Result<Self> {
        let sym = Arc::new(SkylineSymbolic::analyze(a)?);
        Self::factor_with(sym, a)
    }

    /// Numeric factorization reusing a symbolic analysis of the same pattern.
    pub fn factor_with(sym: Arc<SkylineSymbolic>, a: &SparseOperator) -> Result<Self> {
        let n = sym.n;
        if a.nrows() != n {
            return Err(OedError::DimensionMismatch {
                what: "Cholesky refactorization",
                expected: n,
                got: a.nrows(),
            });
        }
        let mut l = vec![0.0; sym.envelope_size()];
        for old in 0..n {
            let i = sym.inv[old];
            for (c, v) in a.row(old) {
                let j = sym.inv[c];
                if j <= i {
                    if j < sym.first[i] {
                        return Err(OedError::InvalidArgument(
                            "pattern differs from symbolic analysis".into(),
                        ));
                    }
                    l[sym.offset[i] + j - sym.first[i]] = v;
                }
            }
        }
        for i in 0..n {
            let fi = sym.first[i];
            let oi = sym.offset[i];
            for j in fi..i {
                let fj = sym.first[j];
                let oj = sym.offset[j];
                let k0 = fi.max(fj);
                let mut s = l[oi + j - fi];
                let ri = &l[oi + k0 - fi..oi + j - fi];
                let rj = &l[oj + k0 - fj..oj + j - fj];
                s -= ri.iter().zip(rj).map(|(x, y)| x * y).sum::<f64>();
                l[oi + j - fi] = s / l[oj + j - fj];
            }
            let row = &l[oi..oi + i - fi];
            let d = l[oi + i - fi] - row.iter().map(|x| x * x).sum::<f64>();
            if !(d > 0.0) || !d.is_finite() {
                return Err(OedError::NotPositiveDefinite {
                    pivot: sym.perm[i],
                    value: d,
                });
            }
            l[oi + i - fi] = d.sqrt();
        }
        Ok(Self { sym, l })
    }

    pub fn symbolic(&self) -> &Arc<SkylineSymbolic> {
        &self.sym
    }

    pub fn dim(&self) -> usize {
        self.sym.n
    }

    /// Solves A x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.sym.n;
        assert_eq!(b.len(), n, "Cholesky solve: rhs length");
        let mut y: Vec<f64> = self.sym.perm.iter().map(|&o| b[o]).collect();
        self.solve_lower_in_place(&mut y);
        self.solve_upper_in_place(&mut y);
        let mut x = vec![0.0; n];
        for (new, &old) in self.sym.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    fn solve_lower_in_place(&self, y: &mut [f64]) {
        let sym = &self.sym;
        for i in 0..sym.n {
            let fi = sym.first[i];
            let oi = sym.offset[i];
            let row = &self.l[oi..oi + i - fi];
            let s: f64 = row.iter().zip(&y[fi..i]).map(|(a, b)| a * b).sum();
            y[i] = (y[i] - s) / self.l[oi + i - fi];
        }
    }

    fn solve_upper_in_place(&self, y: &mut [f64]) {
        let sym = &self.sym;
        for i in (0..sym.n).rev() {
            let fi = sym.first[i];
            let oi = sym.offset[i];
            let xi = y[i] / self.l[oi + i - fi];
            y[i] = xi;
            let row = &self.l[oi..oi + i - fi];
            for (yk, lk) in y[fi..i].iter_mut().zip(row) {
                *yk -= lk * xi;
            }
        }
    }

    /// Applies L⁻ᵀ (in the original ordering) to a vector: the result has covariance A⁻¹
    /// when the input is standard normal.
    pub fn apply_inv_lt(&self, nu: &[f64]) -> Vec<f64> {
        let n = self.sym.n;
        let mut y = nu.to_vec();
        self.solve_upper_in_place(&mut y);
        let mut x = vec![0.0; n];
        for (new, &old) in self.sym.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Applies the factor L (permuted back) so that the result has covariance A.
    pub fn apply_l(&self, nu: &[f64]) -> Vec<f64> {
        let sym = &self.sym;
        let n = sym.n;
        let mut y = vec![0.0; n];
        for (i, yi) in y.iter_mut().enumerate() {
            let fi = sym.first[i];
            let oi = sym.offset[i];
            let row = &self.l[oi..=oi + i - fi];
            *yi = row.iter().zip(&nu[fi..=i]).map(|(a, b)| a * b).sum();
        }
        let mut x = vec![0.0; n];
        for (new, &old) in sym.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// log det A
    pub fn log_det(&self) -> f64 {
        let sym = &self.sym;
        (0..sym.n)
            .map(|i| 2.0 * self.l[sym.offset[i] + i - sym.first[i]].ln())
            .sum()
    }
}

/// Reverse Cuthill–McKee ordering of the symmetric graph of `a`; returns perm[new] = old.
pub fn reverse_cuthill_mckee(a: &SparseOperator) -> Vec<usize> {
    let n = a.nrows();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|r| a.row(r).map(|(c, _)| c).filter(|&c| c != r).collect())
        .collect();
    let degree: Vec<usize> = adj.iter().map(|v| v.len()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let seed = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| degree[i])
            .expect("unvisited node exists");
        let start = pseudo_peripheral(seed, &adj, &degree);
        let mut queue = VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nb: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            nb.sort_by_key(|&w| (degree[w], w));
            for w in nb {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

fn bfs_levels(start: usize, adj: &[Vec<usize>]) -> Vec<Option<usize>> {
    let mut level = vec![None; adj.len()];
    level[start] = Some(0);
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        let lv = level[v].unwrap();
        for &w in &adj[v] {
            if level[w].is_none() {
                level[w] = Some(lv + 1);
                queue.push_back(w);
            }
        }
    }
    level
}

fn pseudo_peripheral(seed: usize, adj: &[Vec<usize>], degree: &[usize]) -> usize {
    let mut node = seed;
    let mut ecc = 0;
    for _ in 0..8 {
        let level = bfs_levels(node, adj);
        let max_level = level.iter().flatten().copied().max().unwrap_or(0);
        if max_level <= ecc && ecc > 0 {
            break;
        }
        ecc = max_level;
        node = (0..adj.len())
            .filter(|&i| level[i] == Some(max_level))
            .min_by_key(|&i| (degree[i], i))
            .unwrap();
    }
    node
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> SparseOperator {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
                t.push((i - 1, i, -1.0));
            }
        }
        SparseOperator::from_triplets(n, n, &t, true).unwrap()
    }

    #[test]
    fn identity_solve() {
        let a = SparseOperator::identity(5);
        let f = SkylineCholesky::factor(&a).unwrap();
        let b = vec![1.0, -2.0, 3.0, 0.5, 7.0];
        assert_eq!(f.solve(&b), b);
    }

    #[test]
    fn two_by_two() {
        let a = SparseOperator::from_triplets(
            2,
            2,
            &[(0, 0, 4.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0)],
            true,
        )
        .unwrap();
        let x = SkylineCholesky::factor(&a).unwrap().solve(&[1.0, 2.0]);
        // [4 1; 1 3]^{-1} [1; 2] = [1/11; 7/11]
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-15);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn tridiagonal_residual() {
        let a = laplacian_1d(50);
        let f = SkylineCholesky::factor(&a).unwrap();
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = f.solve(&b);
        let r = a.matvec(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-12);
        }
        assert!(f.symbolic().bandwidth() <= 1);
    }

    #[test]
    fn inverse_factor_reproduces_inverse_column() {
        let a = laplacian_1d(12);
        let f = SkylineCholesky::factor(&a).unwrap();
        let e0: Vec<f64> = (0..12).map(|i| if i == 3 { 1.0 } else { 0.0 }).collect();
        let col = f.solve(&e0);
        let mut dense = vec![0.0; 12];
        for j in 0..12 {
            let ej: Vec<f64> = (0..12).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
            // A^{-1} = sum_j c_j c_j^T with c_j = P^T L^{-T} e_j
            let c = f.apply_inv_lt(&ej);
            for i in 0..12 {
                dense[i] += c[i] * c[3];
            }
        }
        for i in 0..12 {
            assert!((dense[i] - col[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_rejected() {
        let a = SparseOperator::from_triplets(
            2,
            2,
            &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)],
            true,
        )
        .unwrap();
        assert!(matches!(
            SkylineCholesky::factor(&a),
            Err(OedError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn rcm_is_a_permutation() {
        let a = laplacian_1d(20);
        let mut p = reverse_cuthill_mckee(&a);
        p.sort();
        assert_eq!(p, (0..20).collect::<Vec<_>>());
    }
}
