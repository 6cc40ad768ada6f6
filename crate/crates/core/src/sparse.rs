//! Compressed sparse row storage, a fixed assembly pattern, and Jacobi-preconditioned CG.
//!
//! Assembly goes through [`SparsityPattern`], which maps every local
//! `(cell, i, j)` pair to a slot of the CSR value array once per mesh. Values are
//! accumulated in ascending cell order, so repeated assemblies are bit-identical.

use crate::mesh::{DofMap, Mesh};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for (row, o) in out.iter_mut().enumerate().take(self.n) {
            let mut acc = 0.0;
            for idx in self.row_ptr[row]..self.row_ptr[row + 1] {
                acc += self.values[idx] * x[self.col_idx[idx]];
            }
            *o = acc;
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.matvec(x, &mut out);
        out
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let range = self.row_ptr[row]..self.row_ptr[row + 1];
        match self.col_idx[range.clone()].binary_search(&col) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// `xᵀ M y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let my = self.mul(y);
        dot(x, &my)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for row in 0..self.n {
            for idx in self.row_ptr[row]..self.row_ptr[row + 1] {
                let col = self.col_idx[idx];
                worst = worst.max((self.values[idx] - self.get(col, row)).abs());
            }
        }
        worst
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for row in 0..self.n {
            for idx in self.row_ptr[row]..self.row_ptr[row + 1] {
                m[(row, self.col_idx[idx])] = self.values[idx];
            }
        }
        m
    }
}

/// CSR structure over the degrees of freedom of a mesh plus the per-cell slot map.
#[derive(Debug, Clone)]
pub struct SparsityPattern {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    // stride nodes_per_cell², None when either local node is not a dof
    slots: Vec<Option<usize>>,
    nodes_per_cell: usize,
}

impl SparsityPattern {
    /// Pattern over the free (interior) vertices when `dofs` is given, otherwise over all vertices.
    pub fn new(mesh: &Mesh, dofs: Option<&DofMap>) -> Self {
        let npc = mesh.nodes_per_cell();
        let map = |v: usize| -> Option<usize> {
            match dofs {
                Some(d) => d.free_index[v],
                None => Some(v),
            }
        };
        let n = dofs.map_or(mesh.n_vertices(), |d| d.n_free);
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for t in 0..mesh.n_cells() {
            let cell = mesh.cell(t);
            for &a in cell {
                let Some(i) = map(a) else { continue };
                for &b in cell {
                    if let Some(j) = map(b) {
                        rows[i].push(j);
                    }
                }
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for r in rows.iter_mut() {
            r.sort_unstable();
            r.dedup();
            col_idx.extend_from_slice(r);
            row_ptr.push(col_idx.len());
        }
        let mut slots = Vec::with_capacity(mesh.n_cells() * npc * npc);
        for t in 0..mesh.n_cells() {
            let cell = mesh.cell(t);
            for &a in cell {
                for &b in cell {
                    let slot = match (map(a), map(b)) {
                        (Some(i), Some(j)) => {
                            let range = row_ptr[i]..row_ptr[i + 1];
                            let pos = col_idx[range.clone()]
                                .binary_search(&j)
                                .expect("pattern contains every cell coupling");
                            Some(range.start + pos)
                        }
                        _ => None,
                    };
                    slots.push(slot);
                }
            }
        }
        Self {
            n,
            row_ptr,
            col_idx,
            slots,
            nodes_per_cell: npc,
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// Assembles `Σ_T local(T)`; `local` fills a row-major `npc × npc` block for cell `t`.
    pub fn assemble<F>(&self, n_cells: usize, mut local: F) -> CsrMatrix
    where
        F: FnMut(usize, &mut [f64]),
    {
        let npc = self.nodes_per_cell;
        let mut values = vec![0.0; self.col_idx.len()];
        let mut block = vec![0.0; npc * npc];
        for t in 0..n_cells {
            block.iter_mut().for_each(|v| *v = 0.0);
            local(t, &mut block);
            let slots = &self.slots[t * npc * npc..(t + 1) * npc * npc];
            for (slot, v) in slots.iter().zip(&block) {
                if let Some(s) = slot {
                    values[*s] += v;
                }
            }
        }
        CsrMatrix {
            n: self.n,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOutcome {
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Jacobi-preconditioned conjugate gradients for an SPD matrix.
///
/// Stops when `‖b − Mx‖₂ ≤ rel_tol · ‖b‖₂` (or the residual is exactly zero).
/// `x` holds the initial guess on entry.
pub fn pcg(m: &CsrMatrix, b: &[f64], x: &mut [f64], rel_tol: f64, max_iter: usize) -> CgOutcome {
    let n = m.n;
    let inv_diag: Vec<f64> = m
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return CgOutcome {
            iterations: 0,
            residual_norm: 0.0,
            converged: true,
        };
    }
    let target = rel_tol * b_norm;
    let mut r = m.mul(x);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut res = norm2(&r);
    let mut it = 0;
    while res > target && it < max_iter {
        m.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let step = rz / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        res = norm2(&r);
        it += 1;
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    CgOutcome {
        iterations: it,
        residual_norm: res,
        converged: res <= target,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize) -> CsrMatrix {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in 0..n {
            if i > 0 {
                col_idx.push(i - 1);
                values.push(-1.0);
            }
            col_idx.push(i);
            values.push(2.0);
            if i + 1 < n {
                col_idx.push(i + 1);
                values.push(-1.0);
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    #[test]
    fn cg_solves_tridiagonal_system() {
        let m = tridiag(50);
        let exact: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let b = m.mul(&exact);
        let mut x = vec![0.0; 50];
        let out = pcg(&m, &b, &mut x, 1e-14, 500);
        assert!(out.converged);
        for (a, e) in x.iter().zip(&exact) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let m = tridiag(5);
        let mut x = vec![1.0; 5];
        let out = pcg(&m, &[0.0; 5], &mut x, 1e-12, 10);
        assert!(out.converged);
        assert!(x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn get_and_symmetry() {
        let m = tridiag(4);
        assert_eq!(m.get(1, 2), -1.0);
        assert_eq!(m.get(0, 3), 0.0);
        assert_eq!(m.max_asymmetry(), 0.0);
    }
}
