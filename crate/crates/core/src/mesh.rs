//! Uniform simplicial meshes of the unit interval and the unit square.
//!
//! Vectors and points are stored as `[f64; 2]` in both dimensions; in 1D the
//! second component is always zero.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::sparse::{CsrMatrix, SparsityPattern};

pub type Vec2 = [f64; 2];

/// A facet shared by two cells, with its (dim−1)-measure. In 1D the measure is 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteriorFacet {
    pub cells: (usize, usize),
    pub measure: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadPoint {
    pub point: Vec2,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    dim: usize,
    n: usize,
    vertices: Vec<Vec2>,
    cells: Vec<usize>,
    interior_facets: Vec<InteriorFacet>,
    boundary: Vec<bool>,
    cell_volume: Vec<f64>,
    basis_grads: Vec<Vec2>,
    barycenters: Vec<Vec2>,
}

/// Numbering of the interior (free) vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    pub n_total: usize,
    pub n_free: usize,
    pub free_index: Vec<Option<usize>>,
    pub free_vertices: Vec<usize>,
}

impl DofMap {
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.free_vertices.iter().map(|&v| full[v]).collect()
    }

    /// Extends free values by zero on the boundary.
    pub fn extend(&self, free: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_total];
        for (&v, &val) in self.free_vertices.iter().zip(free) {
            out[v] = val;
        }
        out
    }
}

impl Mesh {
    pub fn build(dim: usize, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidResolution(n));
        }
        match dim {
            1 => Ok(Self::build_interval(n)),
            2 => Ok(Self::build_square(n)),
            d => Err(Error::UnsupportedDimension(d)),
        }
    }

    fn build_interval(n: usize) -> Self {
        let h = 1.0 / n as f64;
        let vertices: Vec<Vec2> = (0..=n).map(|i| [i as f64 * h, 0.0]).collect();
        let mut cells = Vec::with_capacity(2 * n);
        let mut basis_grads = Vec::with_capacity(2 * n);
        let mut barycenters = Vec::with_capacity(n);
        for t in 0..n {
            cells.extend_from_slice(&[t, t + 1]);
            basis_grads.extend_from_slice(&[[-1.0 / h, 0.0], [1.0 / h, 0.0]]);
            barycenters.push([(t as f64 + 0.5) * h, 0.0]);
        }
        let interior_facets = (0..n - 1)
            .map(|t| InteriorFacet {
                cells: (t, t + 1),
                measure: 1.0,
            })
            .collect();
        let mut boundary = vec![false; n + 1];
        boundary[0] = true;
        boundary[n] = true;
        Self {
            dim: 1,
            n,
            vertices,
            cells,
            interior_facets,
            boundary,
            cell_volume: vec![h; n],
            basis_grads,
            barycenters,
        }
    }

    fn build_square(n: usize) -> Self {
        let h = 1.0 / n as f64;
        let idx = |i: usize, j: usize| j * (n + 1) + i;
        let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
        let mut boundary = Vec::with_capacity((n + 1) * (n + 1));
        for j in 0..=n {
            for i in 0..=n {
                vertices.push([i as f64 * h, j as f64 * h]);
                boundary.push(i == 0 || j == 0 || i == n || j == n);
            }
        }
        let mut cells = Vec::with_capacity(6 * n * n);
        for j in 0..n {
            for i in 0..n {
                let (v00, v10, v01, v11) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
                // both triangles counter-clockwise, split along the (i,j)-(i+1,j+1) diagonal
                cells.extend_from_slice(&[v00, v10, v11]);
                cells.extend_from_slice(&[v00, v11, v01]);
            }
        }
        let n_cells = cells.len() / 3;
        let mut cell_volume = Vec::with_capacity(n_cells);
        let mut basis_grads = Vec::with_capacity(3 * n_cells);
        let mut barycenters = Vec::with_capacity(n_cells);
        for t in 0..n_cells {
            let [p0, p1, p2] = [0, 1, 2].map(|k| vertices[cells[3 * t + k]]);
            let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
            cell_volume.push(0.5 * det);
            basis_grads.push([(p1[1] - p2[1]) / det, (p2[0] - p1[0]) / det]);
            basis_grads.push([(p2[1] - p0[1]) / det, (p0[0] - p2[0]) / det]);
            basis_grads.push([(p0[1] - p1[1]) / det, (p1[0] - p0[0]) / det]);
            barycenters.push([
                (p0[0] + p1[0] + p2[0]) / 3.0,
                (p0[1] + p1[1] + p2[1]) / 3.0,
            ]);
        }
        let mut edge_cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for t in 0..n_cells {
            let c = &cells[3 * t..3 * t + 3];
            for (a, b) in [(c[0], c[1]), (c[1], c[2]), (c[2], c[0])] {
                edge_cells.entry((a.min(b), a.max(b))).or_default().push(t);
            }
        }
        let interior_facets = edge_cells
            .into_iter()
            .filter(|(_, ts)| ts.len() == 2)
            .map(|((a, b), ts)| {
                let (pa, pb) = (vertices[a], vertices[b]);
                InteriorFacet {
                    cells: (ts[0], ts[1]),
                    measure: ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt(),
                }
            })
            .collect();
        Self {
            dim: 2,
            n,
            vertices,
            cells,
            interior_facets,
            boundary,
            cell_volume,
            basis_grads,
            barycenters,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_cells_per_axis(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn nodes_per_cell(&self) -> usize {
        self.dim + 1
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cell_volume.len()
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn cell(&self, t: usize) -> &[usize] {
        let k = self.nodes_per_cell();
        &self.cells[t * k..(t + 1) * k]
    }

    /// Gradients of the local P1 basis functions on cell `t`, in the order of [`Mesh::cell`].
    pub fn cell_basis_grads(&self, t: usize) -> &[Vec2] {
        let k = self.nodes_per_cell();
        &self.basis_grads[t * k..(t + 1) * k]
    }

    pub fn interior_facets(&self) -> &[InteriorFacet] {
        &self.interior_facets
    }

    pub fn boundary_mask(&self) -> &[bool] {
        &self.boundary
    }

    pub fn cell_volumes(&self) -> &[f64] {
        &self.cell_volume
    }

    pub fn barycenters(&self) -> &[Vec2] {
        &self.barycenters
    }

    /// |Ω|, always 1 for the supported domains up to rounding.
    pub fn domain_measure(&self) -> f64 {
        self.cell_volume.iter().sum()
    }

    pub fn dof_map(&self) -> DofMap {
        let mut free_index = vec![None; self.n_vertices()];
        let mut free_vertices = Vec::new();
        for (v, &b) in self.boundary.iter().enumerate() {
            if !b {
                free_index[v] = Some(free_vertices.len());
                free_vertices.push(v);
            }
        }
        DofMap {
            n_total: self.n_vertices(),
            n_free: free_vertices.len(),
            free_index,
            free_vertices,
        }
    }

    /// Elementwise-constant gradient of the P1 interpolant of nodal values `y`.
    pub fn cell_gradients(&self, y: &[f64]) -> Vec<Vec2> {
        (0..self.n_cells()).map(|t| self.cell_gradient(y, t)).collect()
    }

    pub fn cell_gradient(&self, y: &[f64], t: usize) -> Vec2 {
        let mut g = [0.0, 0.0];
        for (&v, grad) in self.cell(t).iter().zip(self.cell_basis_grads(t)) {
            g[0] += y[v] * grad[0];
            g[1] += y[v] * grad[1];
        }
        g
    }

    /// Barycentric one-point rule: one point per cell, weight = cell volume.
    pub fn quadrature_points(&self) -> Vec<QuadPoint> {
        self.barycenters
            .iter()
            .zip(&self.cell_volume)
            .map(|(&point, &weight)| QuadPoint { point, weight })
            .collect()
    }

    /// Value of the P1 interpolant at each barycenter (mean of the cell's vertex values).
    pub fn cell_means(&self, y: &[f64]) -> Vec<f64> {
        (0..self.n_cells())
            .map(|t| {
                let c = self.cell(t);
                c.iter().map(|&v| y[v]).sum::<f64>() / c.len() as f64
            })
            .collect()
    }

    /// `Σ_T w_T u_T` for a per-cell field.
    pub fn integrate_cells(&self, u: &[f64]) -> f64 {
        u.iter().zip(&self.cell_volume).map(|(a, w)| a * w).sum()
    }

    /// Nodal interpolant of a function.
    pub fn interpolate<F: Fn(Vec2) -> f64>(&self, f: F) -> Vec<f64> {
        self.vertices.iter().map(|&p| f(p)).collect()
    }

    /// Consistent P1 mass matrix over all vertices.
    pub fn mass_matrix(&self) -> CsrMatrix {
        let pattern = SparsityPattern::new(self, None);
        self.assemble_mass(&pattern)
    }

    pub(crate) fn assemble_mass(&self, pattern: &SparsityPattern) -> CsrMatrix {
        let k = self.nodes_per_cell();
        pattern.assemble(self.n_cells(), |t, block| {
            // ∫ φ_i φ_j = vol·(1+δ_ij)/((d+1)(d+2))
            let scale = self.cell_volume[t] / ((k * (k + 1)) as f64);
            for i in 0..k {
                for j in 0..k {
                    block[i * k + j] = scale * if i == j { 2.0 } else { 1.0 };
                }
            }
        })
    }

    /// Stiffness matrix of `−Δ` restricted to the free vertices.
    pub fn laplacian(&self, dofs: &DofMap) -> CsrMatrix {
        let pattern = SparsityPattern::new(self, Some(dofs));
        let k = self.nodes_per_cell();
        pattern.assemble(self.n_cells(), |t, block| {
            let g = self.cell_basis_grads(t);
            let vol = self.cell_volume[t];
            for i in 0..k {
                for j in 0..k {
                    block[i * k + j] = vol * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_n4() {
        let m = Mesh::build(1, 4).unwrap();
        assert_eq!(m.n_cells(), 4);
        assert_eq!(m.n_vertices(), 5);
        assert_eq!(m.dof_map().n_free, 3);
        assert!(m.cell_volumes().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(m.interior_facets().len(), 3);
    }

    #[test]
    fn square_n2() {
        let m = Mesh::build(2, 2).unwrap();
        assert_eq!(m.n_cells(), 8);
        assert_eq!(m.n_vertices(), 9);
        assert_eq!(m.dof_map().n_free, 1);
        assert!(m.cell_volumes().iter().all(|&v| (v - 0.125).abs() < 1e-15));
        // 4 diagonals + 4 inner axis-aligned edges
        assert_eq!(m.interior_facets().len(), 8);
    }

    #[test]
    fn volumes_sum_to_one() {
        for (d, n) in [(1, 7), (2, 4), (2, 9)] {
            let m = Mesh::build(d, n).unwrap();
            assert!((m.domain_measure() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_resolution_and_dimension() {
        assert_eq!(Mesh::build(1, 1).unwrap_err(), Error::InvalidResolution(1));
        assert_eq!(Mesh::build(3, 4).unwrap_err(), Error::UnsupportedDimension(3));
    }

    #[test]
    fn boundary_mask_matches_geometry() {
        let m = Mesh::build(2, 5).unwrap();
        for (p, &b) in m.vertices().iter().zip(m.boundary_mask()) {
            let on_edge = p.iter().any(|&c| c.abs() < 1e-14 || (c - 1.0).abs() < 1e-14);
            assert_eq!(on_edge, b);
        }
        let dofs = m.dof_map();
        assert_eq!(dofs.n_free + m.boundary_mask().iter().filter(|b| **b).count(), dofs.n_total);
    }

    #[test]
    fn facets_join_distinct_cells() {
        let m = Mesh::build(2, 3).unwrap();
        for f in m.interior_facets() {
            assert_ne!(f.cells.0, f.cells.1);
            assert!(f.measure > 0.0);
        }
    }

    #[test]
    fn affine_gradients_are_exact() {
        let m1 = Mesh::build(1, 6).unwrap();
        let y = m1.interpolate(|p| p[0]);
        for g in m1.cell_gradients(&y) {
            assert!((g[0] - 1.0).abs() < 1e-12 && g[1] == 0.0);
        }
        let m2 = Mesh::build(2, 5).unwrap();
        let y = m2.interpolate(|p| 3.0 * p[0] - 2.0 * p[1]);
        for g in m2.cell_gradients(&y) {
            assert!((g[0] - 3.0).abs() < 1e-12 && (g[1] + 2.0).abs() < 1e-12);
        }
        let zero = vec![0.0; m2.n_vertices()];
        assert!(m2.cell_gradients(&zero).iter().all(|g| g == &[0.0, 0.0]));
    }

    #[test]
    fn midpoint_rule() {
        let m = Mesh::build(1, 4).unwrap();
        let q = m.quadrature_points();
        let xs: Vec<f64> = q.iter().map(|p| p.point[0]).collect();
        assert_eq!(xs, vec![0.125, 0.375, 0.625, 0.875]);
        assert!(q.iter().all(|p| p.weight == 0.25));

        let m = Mesh::build(2, 6).unwrap();
        let one: f64 = m.quadrature_points().iter().map(|p| p.weight).sum();
        assert!((one - 1.0).abs() < 1e-12);

        let m = Mesh::build(1, 100).unwrap();
        let x: f64 = m.quadrature_points().iter().map(|p| p.weight * p.point[0]).sum();
        assert!((x - 0.5).abs() < 1e-4);
    }

    #[test]
    fn mass_matrix_integrates_constants() {
        for (d, n) in [(1, 5), (2, 4)] {
            let m = Mesh::build(d, n).unwrap();
            let mass = m.mass_matrix();
            let ones = vec![1.0; m.n_vertices()];
            assert!((mass.bilinear(&ones, &ones) - 1.0).abs() < 1e-12);
        }
    }
}
