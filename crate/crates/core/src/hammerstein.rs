//! Kernel operator `B`, the power nonlinearities, and the Hammerstein equation
//! `z + B F(y, z) = g` on cell barycenters.
//!
//! `B` is discretized with the midpoint rule, `(Bu)_i = Σ_j K(x_i, x_j) u_j w_j`,
//! so the assembled matrix is `K W` with `K` the kernel Gram matrix and `W` the
//! diagonal of cell volumes.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec2};
use crate::truncation::{bracket, bracket_derivative, regularized_power, signed_power, RegParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelId {
    Gaussian,
    SeparableRank1,
    Zero,
}

impl std::str::FromStr for KernelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(KernelId::Gaussian),
            "separable-rank1" => Ok(KernelId::SeparableRank1),
            "zero" => Ok(KernelId::Zero),
            other => Err(Error::Config(format!("unknown kernel id '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Kernel {
    pub id: KernelId,
    pub scale: f64,
    pub sigma: Option<f64>,
    /// `Σ_i Σ_j w_i w_j K(x_i, x_j)^p` for the exponent the kernel was built for.
    pub condition_value: f64,
    matrix: DMatrix<f64>,
    weights: Vec<f64>,
}

fn dist2(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

impl Kernel {
    fn from_fn<F: Fn(Vec2, Vec2) -> f64>(mesh: &Mesh, id: KernelId, scale: f64, sigma: Option<f64>, p: f64, kfn: F) -> Self {
        let pts = mesh.barycenters();
        let w = mesh.cell_volumes().to_vec();
        let n = pts.len();
        let mut matrix = DMatrix::zeros(n, n);
        let mut condition_value = 0.0;
        for i in 0..n {
            for j in 0..n {
                let kij = kfn(pts[i], pts[j]);
                matrix[(i, j)] = kij * w[j];
                condition_value += w[i] * w[j] * kij.abs().powf(p);
            }
        }
        Self {
            id,
            scale,
            sigma,
            condition_value,
            matrix,
            weights: w,
        }
    }

    /// Kernel on an arbitrary point set: `kernel_values[(i, j)] = K(x_i, x_j)`.
    pub fn from_values(id: KernelId, scale: f64, kernel_values: DMatrix<f64>, weights: Vec<f64>, p: f64) -> Result<Self> {
        let n = weights.len();
        if kernel_values.nrows() != n || kernel_values.ncols() != n {
            return Err(Error::Validation("kernel matrix and weights disagree in size".into()));
        }
        let mut condition_value = 0.0;
        let mut matrix = kernel_values;
        for j in 0..n {
            for i in 0..n {
                condition_value += weights[i] * weights[j] * matrix[(i, j)].abs().powf(p);
                matrix[(i, j)] *= weights[j];
            }
        }
        Ok(Self {
            id,
            scale,
            sigma: None,
            condition_value,
            matrix,
            weights,
        })
    }

    pub fn zero(mesh: &Mesh) -> Self {
        Self::from_fn(mesh, KernelId::Zero, 0.0, None, 2.0, |_, _| 0.0)
    }

    /// `K(x, t) ≡ c`.
    pub fn separable_rank1(mesh: &Mesh, c: f64, p: f64) -> Result<Self> {
        if !(c >= 0.0) {
            return Err(Error::Config(format!("kernel scale must be >= 0 (got {c})")));
        }
        Ok(Self::from_fn(mesh, KernelId::SeparableRank1, c, None, p, |_, _| c))
    }

    /// `K(x, t) = c·exp(−|x − t|²/σ²)` with explicit `c`.
    pub fn gaussian_with_scale(mesh: &Mesh, c: f64, sigma: f64, p: f64) -> Result<Self> {
        if !(sigma > 0.0) || !(c >= 0.0) {
            return Err(Error::Config(format!("gaussian kernel needs c >= 0 and sigma > 0 (got c={c}, sigma={sigma})")));
        }
        Ok(Self::from_fn(mesh, KernelId::Gaussian, c, Some(sigma), p, |x, t| {
            c * (-dist2(x, t) / (sigma * sigma)).exp()
        }))
    }

    /// Gaussian kernel scaled so that the discrete integrability condition holds with `C₁ = 1`.
    pub fn gaussian(mesh: &Mesh, sigma: f64, p: f64) -> Result<Self> {
        let unit = Self::gaussian_with_scale(mesh, 1.0, sigma, p)?;
        let c = unit.condition_value.powf(-1.0 / p);
        Self::gaussian_with_scale(mesh, c, sigma, p)
    }

    pub fn size(&self) -> usize {
        self.weights.len()
    }

    /// The assembled `K_h = K W`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Smallest eigenvalue of the symmetric part of `W^{1/2} K W^{1/2}`.
    pub fn min_symmetric_eigenvalue(&self) -> f64 {
        let n = self.size();
        let s: Vec<f64> = self.weights.iter().map(|w| w.sqrt()).collect();
        // K W scaled: W^{1/2} K W^{1/2} = W^{1/2} (K W) W^{-1/2}
        let m = DMatrix::from_fn(n, n, |i, j| {
            let a = self.matrix[(i, j)] * s[i] / s[j];
            let b = self.matrix[(j, i)] * s[j] / s[i];
            0.5 * (a + b)
        });
        m.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `(Bu)_i = Σ_j K(x_i, x_j) u_j w_j`.
pub fn apply_b(kernel: &Kernel, u: &[f64]) -> Vec<f64> {
    let v = &kernel.matrix * DVector::from_column_slice(u);
    v.iter().copied().collect()
}

/// `|y|^{p−2}y + |z|^{p−2}z` per cell.
pub fn nonlinearity_f(y: &[f64], z: &[f64], p: f64) -> Vec<f64> {
    y.iter().zip(z).map(|(&a, &b)| signed_power(a, p) + signed_power(b, p)).collect()
}

/// `[ε+F_k(y²)]^{(p−2)/2} y + [ε+F_k(z²)]^{(p−2)/2} z` per cell.
pub fn nonlinearity_f_reg(y: &[f64], z: &[f64], reg: &RegParams, p: f64) -> Vec<f64> {
    y.iter()
        .zip(z)
        .map(|(&a, &b)| regularized_power(a, reg, p) + regularized_power(b, reg, p))
        .collect()
}

fn dfdz(z: f64, reg: Option<&RegParams>, p: f64) -> f64 {
    match reg {
        None => {
            if p == 2.0 {
                1.0
            } else {
                (p - 1.0) * z.abs().powf(p - 2.0)
            }
        }
        Some(r) => {
            let t = z * z;
            bracket(t, r, p) + 2.0 * t * bracket_derivative(t, r, p)
        }
    }
}

fn f_pointwise(y: f64, z: f64, reg: Option<&RegParams>, p: f64) -> f64 {
    match reg {
        None => signed_power(y, p) + signed_power(z, p),
        Some(r) => regularized_power(y, r, p) + regularized_power(z, r, p),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HammersteinState {
    pub values: Vec<f64>,
    pub l2_norm: f64,
    pub lp_norm: f64,
}

impl HammersteinState {
    pub fn new(values: Vec<f64>, weights: &[f64], p: f64) -> Self {
        let l2_norm = weighted_lp(&values, weights, 2.0);
        let lp_norm = weighted_lp(&values, weights, p);
        Self { values, l2_norm, lp_norm }
    }
}

/// `(Σ w |u|^p)^{1/p}`.
pub fn weighted_lp(u: &[f64], w: &[f64], p: f64) -> f64 {
    u.iter().zip(w).map(|(a, wi)| wi * a.abs().powf(p)).sum::<f64>().powf(1.0 / p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HammersteinReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct HammersteinOptions<'a> {
    pub tol: f64,
    pub max_iter: usize,
    pub initial: Option<&'a [f64]>,
    /// Right-hand side `g`; zero when absent.
    pub rhs: Option<&'a [f64]>,
}

impl Default for HammersteinOptions<'_> {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 100,
            initial: None,
            rhs: None,
        }
    }
}

fn residual(kernel: &Kernel, y: &[f64], z: &[f64], reg: Option<&RegParams>, p: f64, g: Option<&[f64]>) -> DVector<f64> {
    let fvals = DVector::from_iterator(z.len(), y.iter().zip(z).map(|(&a, &b)| f_pointwise(a, b, reg, p)));
    let mut r = &kernel.matrix * fvals;
    for i in 0..z.len() {
        r[i] += z[i] - g.map_or(0.0, |g| g[i]);
    }
    r
}

/// Newton iteration on `R(z) = z + K_h F(y, z) − g` with step halving on `‖R‖_∞`.
pub fn solve_hammerstein_with(
    y_cells: &[f64],
    kernel: &Kernel,
    p: f64,
    reg: Option<&RegParams>,
    opts: &HammersteinOptions<'_>,
) -> Result<(HammersteinState, HammersteinReport)> {
    let n = kernel.size();
    if y_cells.len() != n {
        return Err(Error::Validation(format!("y has {} cell values, kernel has {n}", y_cells.len())));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::Config("hammerstein tolerance must be > 0".into()));
    }
    let mut z: Vec<f64> = opts.initial.map_or_else(|| vec![0.0; n], |z0| z0.to_vec());
    let mut r = residual(kernel, y_cells, &z, reg, p, opts.rhs);
    let mut res = r.amax();
    let mut iterations = 0;
    while res > opts.tol && iterations < opts.max_iter {
        let mut jac = kernel.matrix.clone();
        for j in 0..n {
            let d = dfdz(z[j], reg, p);
            jac.column_mut(j).scale_mut(d);
            jac[(j, j)] += 1.0;
        }
        let step = jac
            .lu()
            .solve(&(-&r))
            .ok_or_else(|| Error::Solver("singular Hammerstein Jacobian".into()))?;
        iterations += 1;
        let mut lambda = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, s)| a + lambda * s).collect();
            let r_trial = residual(kernel, y_cells, &trial, reg, p, opts.rhs);
            let res_trial = r_trial.amax();
            if res_trial < res {
                z = trial;
                r = r_trial;
                res = res_trial;
                improved = true;
                break;
            }
            lambda *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let _ = r;
    let state = HammersteinState::new(z, kernel.weights(), p);
    Ok((
        state,
        HammersteinReport {
            iterations,
            final_residual: res,
            converged: res <= opts.tol,
        },
    ))
}

pub fn solve_hammerstein(
    y_cells: &[f64],
    kernel: &Kernel,
    p: f64,
    reg: Option<&RegParams>,
    tol: f64,
    max_iter: usize,
) -> Result<(HammersteinState, HammersteinReport)> {
    solve_hammerstein_with(
        y_cells,
        kernel,
        p,
        reg,
        &HammersteinOptions {
            tol,
            max_iter,
            ..Default::default()
        },
    )
}

/// Solves from `n_starts` random initial iterates and returns the largest
/// pairwise `L^p` distance between the computed solutions.
pub fn uniqueness_probe(
    y_cells: &[f64],
    kernel: &Kernel,
    p: f64,
    reg: Option<&RegParams>,
    n_starts: usize,
    seed: u64,
    tol: f64,
) -> Result<f64> {
    if n_starts < 2 {
        return Err(Error::Config("uniqueness probe needs at least 2 starts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = 1.0 + y_cells.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut sols = Vec::with_capacity(n_starts);
    for _ in 0..n_starts {
        let z0: Vec<f64> = (0..kernel.size()).map(|_| rng.gen_range(-spread..spread)).collect();
        let (z, rep) = solve_hammerstein_with(
            y_cells,
            kernel,
            p,
            reg,
            &HammersteinOptions {
                tol,
                max_iter: 200,
                initial: Some(&z0),
                rhs: None,
            },
        )?;
        if !rep.converged {
            return Err(Error::Solver(format!(
                "Hammerstein solve from a random start stalled at residual {:e}",
                rep.final_residual
            )));
        }
        sols.push(z.values);
    }
    let mut worst: f64 = 0.0;
    for i in 0..sols.len() {
        for j in (i + 1)..sols.len() {
            let d: Vec<f64> = sols[i].iter().zip(&sols[j]).map(|(a, b)| a - b).collect();
            worst = worst.max(weighted_lp(&d, kernel.weights(), p));
        }
    }
    Ok(worst)
}
