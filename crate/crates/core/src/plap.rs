//! Regularized anisotropic p-Laplacian with homogeneous Dirichlet data.
//!
//! The discrete problem is the minimizer of the convex energy
//!
//! ```text
//! J(y) = ½ Σ_T vol(T) G(|S_T ∇y_T|²) − ∫ f y,   G' = (ε + F_k(·))^{(p−2)/2},
//! ```
//!
//! whose gradient is the residual of the weak form. The solver takes
//! frozen-coefficient (Kačanov) steps and switches to Newton once those stall;
//! both directions are globalized by an Armijo search on `J`, so the energy is
//! non-increasing along the iteration.

use serde::{Deserialize, Serialize};

use crate::control::{ControlBounds, ControlField};
use crate::error::{Error, Result};
use crate::mesh::{DofMap, Mesh, Vec2};
use crate::sparse::{dot, pcg, CsrMatrix, SparsityPattern};
use crate::truncation::{bracket, bracket_derivative, bracket_integral, RegParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemParams {
    pub p: f64,
    pub q: f64,
    /// Nodal source term.
    pub f: Vec<f64>,
}

impl ProblemParams {
    pub fn new(p: f64, f: Vec<f64>) -> Result<Self> {
        validate_exponent(p)?;
        Ok(Self { p, q: p / (p - 1.0), f })
    }

    pub fn constant_source(mesh: &Mesh, p: f64, value: f64) -> Result<Self> {
        Self::new(p, vec![value; mesh.n_vertices()])
    }
}

pub fn validate_exponent(p: f64) -> Result<()> {
    if p >= 2.0 && p.is_finite() {
        Ok(())
    } else {
        Err(Error::Validation(format!("exponent p = {p} violates 2 ≤ p < ∞")))
    }
}

/// Nodal state with zero boundary trace and its cellwise gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct StateField {
    values: Vec<f64>,
    gradients: Vec<Vec2>,
}

impl StateField {
    pub fn zero(mesh: &Mesh) -> Self {
        Self::from_nodal(mesh, vec![0.0; mesh.n_vertices()]).expect("zero field is admissible")
    }

    /// Fails if any boundary value is nonzero.
    pub fn from_nodal(mesh: &Mesh, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.n_vertices() {
            return Err(Error::Validation(format!(
                "state has {} values for {} vertices",
                values.len(),
                mesh.n_vertices()
            )));
        }
        if values.iter().zip(mesh.boundary_mask()).any(|(v, &b)| b && *v != 0.0) {
            return Err(Error::Validation("state must vanish on boundary vertices".into()));
        }
        let gradients = mesh.cell_gradients(&values);
        Ok(Self { values, gradients })
    }

    pub fn from_free(mesh: &Mesh, dofs: &DofMap, free: &[f64]) -> Self {
        let values = dofs.extend(free);
        let gradients = mesh.cell_gradients(&values);
        Self { values, gradients }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn gradients(&self) -> &[Vec2] {
        &self.gradients
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub energy_seminorm: f64,
    pub converged: bool,
    #[serde(skip)]
    pub newton_iterations: usize,
    #[serde(skip)]
    pub energy_history: Vec<f64>,
    #[serde(skip)]
    pub residual_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Absolute tolerance on the H⁻¹ dual norm of the residual.
    pub tol: f64,
    pub max_iter: usize,
    pub cg_rel_tol: f64,
    /// Switch to Newton once `res_{m+1} > stall_ratio · res_m`.
    pub stall_ratio: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 500,
            cg_rel_tol: 1e-12,
            stall_ratio: 0.5,
        }
    }
}

/// Per-mesh data reused across solves: dof numbering, assembly pattern,
/// mass matrix and Dirichlet Laplacian.
#[derive(Debug, Clone)]
pub struct PlapContext<'m> {
    pub mesh: &'m Mesh,
    pub dofs: DofMap,
    pattern: SparsityPattern,
    mass: CsrMatrix,
    laplacian: CsrMatrix,
}

impl<'m> PlapContext<'m> {
    pub fn new(mesh: &'m Mesh) -> Self {
        let dofs = mesh.dof_map();
        let pattern = SparsityPattern::new(mesh, Some(&dofs));
        let mass = mesh.mass_matrix();
        let laplacian = mesh.laplacian(&dofs);
        Self {
            mesh,
            dofs,
            pattern,
            mass,
            laplacian,
        }
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    pub fn laplacian(&self) -> &CsrMatrix {
        &self.laplacian
    }

    /// Load vector `∫ f φ_i` over free vertices (consistent mass).
    pub fn load_vector(&self, f: &[f64]) -> Vec<f64> {
        self.dofs.restrict(&self.mass.mul(f))
    }

    /// Exact L² norm of a P1 nodal field.
    pub fn l2_norm(&self, v: &[f64]) -> f64 {
        self.mass.bilinear(v, v).max(0.0).sqrt()
    }

    /// `√(rᵀ L⁻¹ r)`, the discrete H⁻¹ norm of a residual on free vertices.
    pub fn dual_norm(&self, r: &[f64]) -> f64 {
        let mut x = vec![0.0; r.len()];
        pcg(&self.laplacian, r, &mut x, 1e-13, 10 * r.len() + 100);
        dot(r, &x).max(0.0).sqrt()
    }

    /// Squared anisotropic gradient magnitude `|S_T ∇y_T|² = (A_T ∇y_T, ∇y_T)` per cell.
    pub fn cell_arguments(&self, gradients: &[Vec2], a: &ControlField) -> Vec<f64> {
        gradients
            .iter()
            .zip(a.matrices())
            .map(|(g, m)| m.quad_form(*g).max(0.0))
            .collect()
    }

    /// Regularized operator frozen at `y` and its per-cell coefficient.
    pub fn assemble(&self, y: &StateField, a: &ControlField, reg: &RegParams, p: f64) -> (CsrMatrix, Vec<f64>) {
        let coeff: Vec<f64> = self
            .cell_arguments(y.gradients(), a)
            .into_iter()
            .map(|t| bracket(t, reg, p))
            .collect();
        (self.assemble_with(a, &coeff), coeff)
    }

    fn assemble_with(&self, a: &ControlField, coeff: &[f64]) -> CsrMatrix {
        let mesh = self.mesh;
        let k = mesh.nodes_per_cell();
        self.pattern.assemble(mesh.n_cells(), |t, block| {
            let g = mesh.cell_basis_grads(t);
            let m = a.matrix(t);
            let scale = coeff[t] * mesh.cell_volumes()[t];
            for j in 0..k {
                let ag = m.apply(g[j]);
                for i in 0..k {
                    block[i * k + j] = scale * (ag[0] * g[i][0] + ag[1] * g[i][1]);
                }
            }
        })
    }

    /// Hessian of the energy at `y`: frozen operator plus `2 c'(t) (A∇y)(A∇y)ᵀ`.
    fn assemble_hessian(&self, y: &StateField, a: &ControlField, reg: &RegParams, p: f64) -> CsrMatrix {
        let mesh = self.mesh;
        let k = mesh.nodes_per_cell();
        let grads = y.gradients();
        self.pattern.assemble(mesh.n_cells(), |t, block| {
            let g = mesh.cell_basis_grads(t);
            let m = a.matrix(t);
            let vol = mesh.cell_volumes()[t];
            let arg = m.quad_form(grads[t]).max(0.0);
            let c = bracket(arg, reg, p);
            let dc = bracket_derivative(arg, reg, p);
            let ay = m.apply(grads[t]);
            let proj: Vec<f64> = g.iter().map(|gi| ay[0] * gi[0] + ay[1] * gi[1]).collect();
            for j in 0..k {
                let ag = m.apply(g[j]);
                for i in 0..k {
                    block[i * k + j] = vol * (c * (ag[0] * g[i][0] + ag[1] * g[i][1]) + 2.0 * dc * proj[i] * proj[j]);
                }
            }
        })
    }

    /// `J(y)` and the magnitude scale used to judge rounding in energy differences.
    fn energy(&self, y: &StateField, a: &ControlField, reg: &RegParams, p: f64, load: &[f64]) -> (f64, f64) {
        let args = self.cell_arguments(y.gradients(), a);
        let internal: f64 = args
            .iter()
            .zip(self.mesh.cell_volumes())
            .map(|(&t, &vol)| 0.5 * vol * bracket_integral(t, reg, p))
            .sum();
        let work = dot(load, &self.dofs.restrict(y.values()));
        (internal - work, internal.abs() + work.abs())
    }

    /// `‖y‖_{A,ε,k} = (Σ_T vol (ε + F_k(t_T))^{(p−2)/2} t_T)^{1/p}`.
    pub fn energy_seminorm(&self, y: &StateField, a: &ControlField, reg: &RegParams, p: f64) -> f64 {
        let args = self.cell_arguments(y.gradients(), a);
        let s: f64 = args
            .iter()
            .zip(self.mesh.cell_volumes())
            .map(|(&t, &vol)| vol * bracket(t, reg, p) * t)
            .sum();
        s.max(0.0).powf(1.0 / p)
    }

    pub fn norms(&self, y: &StateField, a: &ControlField, reg: &RegParams, p: f64) -> StateNorms {
        let vols = self.mesh.cell_volumes();
        let h1 = y
            .gradients()
            .iter()
            .zip(vols)
            .map(|(g, v)| v * (g[0] * g[0] + g[1] * g[1]))
            .sum::<f64>()
            .sqrt();
        let w1p = y
            .gradients()
            .iter()
            .zip(vols)
            .map(|(g, v)| v * (g[0] * g[0] + g[1] * g[1]).sqrt().powf(p))
            .sum::<f64>()
            .powf(1.0 / p);
        StateNorms {
            h1,
            w1p,
            l2: self.l2_norm(y.values()),
            energy_seminorm: self.energy_seminorm(y, a, reg, p),
        }
    }

    fn residual(&self, y: &StateField, a: &ControlField, reg: &RegParams, p: f64, load: &[f64]) -> Vec<f64> {
        let (m, _) = self.assemble(y, a, reg, p);
        let my = m.mul(&self.dofs.restrict(y.values()));
        load.iter().zip(&my).map(|(f, v)| f - v).collect()
    }

    pub fn solve(
        &self,
        a: &ControlField,
        reg: &RegParams,
        params: &ProblemParams,
        opts: &SolverOptions,
    ) -> Result<(StateField, SolveReport)> {
        self.solve_from(a, reg, params, opts, None)
    }

    pub fn solve_from(
        &self,
        a: &ControlField,
        reg: &RegParams,
        params: &ProblemParams,
        opts: &SolverOptions,
        initial: Option<&StateField>,
    ) -> Result<(StateField, SolveReport)> {
        if !(opts.tol > 0.0) || opts.max_iter == 0 {
            return Err(Error::Config("solve_state needs tol > 0 and max_iter >= 1".into()));
        }
        if params.f.len() != self.mesh.n_vertices() {
            return Err(Error::Validation("source term length does not match the mesh".into()));
        }
        if a.len() != self.mesh.n_cells() {
            return Err(Error::Validation("control field does not match the mesh".into()));
        }
        let p = params.p;
        let mesh = self.mesh;
        let load = self.load_vector(&params.f);
        let mut y = initial.cloned().unwrap_or_else(|| StateField::zero(mesh));
        let (mut energy, _) = self.energy(&y, a, reg, p, &load);
        let mut energy_history = vec![energy];
        let mut residual_history = Vec::new();
        let mut newton = false;
        let mut newton_iterations = 0;
        let mut iterations = 0;
        let mut converged = false;
        let mut stalled = false;

        loop {
            let r = self.residual(&y, a, reg, p, &load);
            let res = self.dual_norm(&r);
            if let Some(&prev) = residual_history.last() {
                if !newton && res > opts.stall_ratio * prev {
                    newton = true;
                }
            }
            residual_history.push(res);
            if res <= opts.tol {
                converged = true;
                break;
            }
            if iterations >= opts.max_iter || stalled {
                break;
            }
            let system = if newton {
                newton_iterations += 1;
                self.assemble_hessian(&y, a, reg, p)
            } else {
                self.assemble(&y, a, reg, p).0
            };
            let mut d = vec![0.0; r.len()];
            pcg(&system, &r, &mut d, opts.cg_rel_tol, 20 * r.len() + 200);
            iterations += 1;

            let slope = dot(&r, &d);
            let y_free = self.dofs.restrict(y.values());
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..80 {
                let trial: Vec<f64> = y_free.iter().zip(&d).map(|(v, dv)| v + step * dv).collect();
                let candidate = StateField::from_free(mesh, &self.dofs, &trial);
                let (e, scale) = self.energy(&candidate, a, reg, p, &load);
                let slack = 8.0 * f64::EPSILON * scale;
                if e <= energy - 1e-4 * step * slope + slack {
                    accepted = Some((candidate, e));
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some((candidate, e)) => {
                    y = candidate;
                    energy = e;
                    energy_history.push(e);
                }
                None => stalled = true,
            }
        }

        let report = SolveReport {
            iterations,
            final_residual: *residual_history.last().unwrap_or(&f64::INFINITY),
            energy_seminorm: self.energy_seminorm(&y, a, reg, p),
            converged,
            newton_iterations,
            energy_history,
            residual_history,
        };
        Ok((y, report))
    }

    /// `∫ f y` with the consistent mass matrix.
    pub fn source_work(&self, y: &StateField, f: &[f64]) -> f64 {
        self.mass.bilinear(f, y.values())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateNorms {
    pub h1: f64,
    pub w1p: f64,
    pub l2: f64,
    pub energy_seminorm: f64,
}

/// Assembles the regularized operator frozen at `y` (free-vertex matrix) and its cell coefficients.
pub fn assemble_regularized_operator(
    y: &StateField,
    a: &ControlField,
    reg: &RegParams,
    params: &ProblemParams,
    mesh: &Mesh,
) -> (CsrMatrix, Vec<f64>) {
    PlapContext::new(mesh).assemble(y, a, reg, params.p)
}

/// Solves the regularized state equation with default CG settings.
pub fn solve_state(
    a: &ControlField,
    reg: &RegParams,
    params: &ProblemParams,
    mesh: &Mesh,
    tol: f64,
    max_iter: usize,
) -> Result<(StateField, SolveReport)> {
    let opts = SolverOptions {
        tol,
        max_iter,
        ..SolverOptions::default()
    };
    PlapContext::new(mesh).solve(a, reg, params, &opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AprioriCheck {
    pub passed: bool,
    /// `(bound − ‖y‖_{H¹₀}) / ‖y‖_{H¹₀}`, `+∞` for the zero state.
    pub margin: f64,
    pub h1_norm: f64,
    pub bound: f64,
    pub chain_passed: bool,
    pub chain_margin: f64,
    pub chain_bound: f64,
    /// The W^{-1,q} form of the estimate has no discrete evaluation here.
    pub w1q_check_skipped: bool,
}

fn relative_margin(bound: f64, value: f64) -> f64 {
    if value == 0.0 {
        if bound >= 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    } else {
        (bound - value) / value
    }
}

/// Checks `‖y‖_{H¹₀} ≤ ε^{(2−p)/2} α⁻² ‖f‖_{L²}` and
/// `‖y‖_{H¹₀} ≤ α⁻¹(|Ω|^{(p−2)/(2p)} ‖y‖_{A,ε,k} + ‖y‖_{A,ε,k}^{p/2})`.
pub fn apriori_check(
    y: &StateField,
    report: &SolveReport,
    bounds: &ControlBounds,
    reg: &RegParams,
    params: &ProblemParams,
    ctx: &PlapContext<'_>,
) -> AprioriCheck {
    let p = params.p;
    let h1 = y
        .gradients()
        .iter()
        .zip(ctx.mesh.cell_volumes())
        .map(|(g, v)| v * (g[0] * g[0] + g[1] * g[1]))
        .sum::<f64>()
        .sqrt();
    let f_l2 = ctx.l2_norm(&params.f);
    let bound = reg.epsilon.powf(0.5 * (2.0 - p)) * f_l2 / (bounds.alpha * bounds.alpha);
    let seminorm = report.energy_seminorm;
    let omega = ctx.mesh.domain_measure();
    let chain_bound =
        (omega.powf((p - 2.0) / (2.0 * p)) * seminorm + seminorm.powf(0.5 * p)) / bounds.alpha;
    let tol = 1e-12;
    AprioriCheck {
        passed: h1 <= bound * (1.0 + tol) + tol,
        margin: relative_margin(bound, h1),
        h1_norm: h1,
        bound,
        chain_passed: h1 <= chain_bound * (1.0 + tol) + tol,
        chain_margin: relative_margin(chain_bound, h1),
        chain_bound,
        w1q_check_skipped: true,
    }
}

/// Minimum over probes of the Minty expression
/// `∫ |S∇φ|^{p−2}(A∇φ, ∇φ − ∇y) − ∫ f(φ − y)` for the unregularized operator.
pub fn minty_gap(y: &StateField, a: &ControlField, params: &ProblemParams, ctx: &PlapContext<'_>, probes: &[StateField]) -> f64 {
    let mesh = ctx.mesh;
    let p = params.p;
    let mf = ctx.mass().mul(&params.f);
    probes
        .iter()
        .map(|phi| {
            let operator: f64 = (0..mesh.n_cells())
                .map(|t| {
                    let gp = phi.gradients()[t];
                    let gy = y.gradients()[t];
                    let m = a.matrix(t);
                    let weight = if p == 2.0 { 1.0 } else { m.quad_form(gp).max(0.0).sqrt().powf(p - 2.0) };
                    let ag = m.apply(gp);
                    let diff = [gp[0] - gy[0], gp[1] - gy[1]];
                    mesh.cell_volumes()[t] * weight * (ag[0] * diff[0] + ag[1] * diff[1])
                })
                .sum();
            let source: f64 = mf
                .iter()
                .zip(phi.values().iter().zip(y.values()))
                .map(|(fi, (a, b))| fi * (a - b))
                .sum();
            operator - source
        })
        .fold(f64::INFINITY, f64::min)
}

/// Volume of cells where `|S_T ∇y_T| > threshold`.
pub fn exceedance_volume(args: &[f64], vols: &[f64], threshold: f64, inclusive: bool) -> f64 {
    let thr2 = threshold * threshold;
    args.iter()
        .zip(vols)
        .filter(|(t, _)| if inclusive { **t >= thr2 } else { **t > thr2 })
        .map(|(_, v)| v)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{parameterize, ControlScheme, SymMat};

    fn reg(eps: f64, k: f64) -> RegParams {
        RegParams::with_default_delta(eps, k).unwrap()
    }

    #[test]
    fn p_below_two_is_rejected() {
        let err = ProblemParams::new(1.5, vec![]).unwrap_err();
        assert!(err.to_string().contains("2 ≤ p < ∞"));
        let ok = ProblemParams::new(3.0, vec![]).unwrap();
        assert!((ok.q - 1.5).abs() < 1e-14);
    }

    #[test]
    fn p2_coefficient_is_one_and_matrix_is_stiffness() {
        let mesh = Mesh::build(2, 4).unwrap();
        let ctx = PlapContext::new(&mesh);
        let y = StateField::from_nodal(&mesh, mesh.interpolate(|x| x[0] * (1.0 - x[0]) * x[1] * (1.0 - x[1]))).unwrap();
        let a = ControlField::identity(&mesh);
        let (m, c) = ctx.assemble(&y, &a, &reg(0.3, 1.0), 2.0);
        assert!(c.iter().all(|&v| v == 1.0));
        let lap = ctx.laplacian();
        assert_eq!(m.values.len(), lap.values.len());
        for (x, z) in m.values.iter().zip(&lap.values) {
            assert!((x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_state_coefficient_is_eps_power() {
        let mesh = Mesh::build(1, 8).unwrap();
        let params = ProblemParams::constant_source(&mesh, 4.0, 1.0).unwrap();
        let (m, c) = assemble_regularized_operator(&StateField::zero(&mesh), &ControlField::identity(&mesh), &reg(0.01, 2.0), &params, &mesh);
        assert!(c.iter().all(|&v| (v - 0.01).abs() < 1e-15));
        assert!(m.max_asymmetry() < 1e-14);
    }

    #[test]
    fn linear_problem_matches_parabola_at_nodes() {
        let mesh = Mesh::build(1, 4).unwrap();
        let params = ProblemParams::constant_source(&mesh, 2.0, 1.0).unwrap();
        let (y, rep) = solve_state(&ControlField::identity(&mesh), &reg(0.1, 1.0), &params, &mesh, 1e-10, 50).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 1);
        for (p, v) in mesh.vertices().iter().zip(y.values()) {
            let exact = 0.5 * p[0] * (1.0 - p[0]);
            assert!((v - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn p4_symmetric_solution() {
        let mesh = Mesh::build(1, 32).unwrap();
        let params = ProblemParams::constant_source(&mesh, 4.0, 1.0).unwrap();
        let (y, rep) = solve_state(&ControlField::identity(&mesh), &reg(1e-3, 10.0), &params, &mesh, 1e-10, 200).unwrap();
        assert!(rep.converged, "{rep:?}");
        assert!(rep.iterations <= 200);
        let v = y.values();
        for i in 0..v.len() {
            assert!((v[i] - v[v.len() - 1 - i]).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_source_gives_zero_state() {
        let mesh = Mesh::build(2, 6).unwrap();
        let params = ProblemParams::constant_source(&mesh, 3.0, 0.0).unwrap();
        let (y, rep) = solve_state(&ControlField::identity(&mesh), &reg(1e-2, 4.0), &params, &mesh, 1e-10, 20).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 0);
        assert!(y.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn iteration_limit_reports_nonconvergence() {
        let mesh = Mesh::build(2, 8).unwrap();
        let params = ProblemParams::constant_source(&mesh, 4.0, 1.0).unwrap();
        let (_, rep) = solve_state(&ControlField::identity(&mesh), &reg(1e-3, 4.0), &params, &mesh, 1e-14, 1).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.iterations, 1);
    }

    #[test]
    fn energy_is_non_increasing() {
        let mesh = Mesh::build(2, 10).unwrap();
        let b = ControlBounds::default();
        let a = parameterize(&[1.0, 3.0, 0.6], ControlScheme::ConstantRotated, &mesh, &b).unwrap();
        for (p, eps) in [(3.0, 1e-2), (4.0, 1e-3)] {
            let params = ProblemParams::constant_source(&mesh, p, 1.0).unwrap();
            let ctx = PlapContext::new(&mesh);
            let (_, rep) = ctx.solve(&a, &reg(eps, 2.0), &params, &SolverOptions::default()).unwrap();
            assert!(rep.converged);
            for w in rep.energy_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{:?}", rep.energy_history);
            }
        }
    }

    #[test]
    fn apriori_bounds_hold_after_solve() {
        let mesh = Mesh::build(2, 8).unwrap();
        let ctx = PlapContext::new(&mesh);
        let b = ControlBounds::default();
        let a = ControlField::constant(&mesh, SymMat::diag(2, 0.5, 2.0));
        for p in [2.0, 3.0, 4.0] {
            let params = ProblemParams::constant_source(&mesh, p, 1.0).unwrap();
            let r = reg(1e-2, 3.0);
            let (y, rep) = ctx.solve(&a, &r, &params, &SolverOptions::default()).unwrap();
            let chk = apriori_check(&y, &rep, &b, &r, &params, &ctx);
            assert!(chk.passed && chk.chain_passed, "p={p}: {chk:?}");
            assert!(chk.margin >= 0.0 && chk.chain_margin >= 0.0);
        }
    }

    #[test]
    fn apriori_zero_case_has_infinite_margin() {
        let mesh = Mesh::build(1, 8).unwrap();
        let ctx = PlapContext::new(&mesh);
        let params = ProblemParams::constant_source(&mesh, 3.0, 0.0).unwrap();
        let r = reg(1e-2, 3.0);
        let (y, rep) = ctx.solve(&ControlField::identity(&mesh), &r, &params, &SolverOptions::default()).unwrap();
        let chk = apriori_check(&y, &rep, &ControlBounds::default(), &r, &params, &ctx);
        assert!(chk.passed);
        assert_eq!(chk.margin, f64::INFINITY);
    }

    #[test]
    fn minty_gap_for_linear_problem() {
        use rand::{Rng, SeedableRng};
        let mesh = Mesh::build(2, 6).unwrap();
        let ctx = PlapContext::new(&mesh);
        let a = ControlField::constant(&mesh, SymMat::rotated(1.0, 2.5, 0.3));
        let params = ProblemParams::constant_source(&mesh, 2.0, 1.0).unwrap();
        let (y, _) = ctx.solve(&a, &reg(0.1, 1.0), &params, &SolverOptions::default()).unwrap();
        assert!(minty_gap(&y, &a, &params, &ctx, std::slice::from_ref(&y)).abs() < 1e-14);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let probes: Vec<StateField> = (0..50)
            .map(|_| {
                let free: Vec<f64> = (0..ctx.dofs.n_free).map(|_| rng.gen_range(-0.2..0.2)).collect();
                StateField::from_free(&mesh, &ctx.dofs, &free)
            })
            .collect();
        assert!(minty_gap(&y, &a, &params, &ctx, &probes) >= -1e-9);

        // perturbed state: the midpoint between it and the solution violates Minty
        let bump: Vec<f64> = y.values().iter().zip(mesh.boundary_mask()).map(|(v, b)| if *b { 0.0 } else { v + 0.05 }).collect();
        let wrong = StateField::from_nodal(&mesh, bump).unwrap();
        let mid: Vec<f64> = y.values().iter().zip(wrong.values()).map(|(a, b)| 0.5 * (a + b)).collect();
        let probe = StateField::from_nodal(&mesh, mid).unwrap();
        assert!(minty_gap(&wrong, &a, &params, &ctx, &[probe]) < 0.0);
    }

    #[test]
    fn boundary_values_are_rejected() {
        let mesh = Mesh::build(1, 4).unwrap();
        assert!(StateField::from_nodal(&mesh, vec![1.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }
}
