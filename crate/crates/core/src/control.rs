//! Cellwise matrix controls and the admissible class.
//!
//! A control is one symmetric matrix per cell. Admissibility means every cell
//! matrix has spectrum in `[ξ₁², ξ₂²]` and the matrix square root field has
//! total variation at most `γ`. The spectral part is enforced exactly by
//! eigenvalue clipping; the variation budget is only reported (and penalized by
//! the optimizer).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::mesh::{Mesh, Vec2};

/// General 2×2 matrix, row-major.
pub type Mat2 = [[f64; 2]; 2];

/// Symmetric 2×2 matrix. One-dimensional controls use `a11` only and keep
/// `a12 = a22 = 0`, which makes products with 1D gradients `[g, 0]` and
/// Frobenius norms come out right without special cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymMat {
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
}

impl SymMat {
    pub const fn new(a11: f64, a12: f64, a22: f64) -> Self {
        Self { a11, a12, a22 }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scalar(dim, 1.0)
    }

    pub fn scalar(dim: usize, s: f64) -> Self {
        if dim == 1 {
            Self::new(s, 0.0, 0.0)
        } else {
            Self::new(s, 0.0, s)
        }
    }

    pub fn diag(dim: usize, d1: f64, d2: f64) -> Self {
        if dim == 1 {
            Self::new(d1, 0.0, 0.0)
        } else {
            Self::new(d1, 0.0, d2)
        }
    }

    /// `R(angle) diag(d1, d2) R(angle)ᵀ`.
    pub fn rotated(d1: f64, d2: f64, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(
            c * c * d1 + s * s * d2,
            c * s * (d1 - d2),
            s * s * d1 + c * c * d2,
        )
    }

    /// Restriction to the first coordinate direction, used for 1D meshes.
    pub fn restrict_1d(self) -> Self {
        Self::new(self.a11, 0.0, 0.0)
    }

    pub fn apply(&self, v: Vec2) -> Vec2 {
        [
            self.a11 * v[0] + self.a12 * v[1],
            self.a12 * v[0] + self.a22 * v[1],
        ]
    }

    /// `(A v, v)`.
    pub fn quad_form(&self, v: Vec2) -> f64 {
        self.a11 * v[0] * v[0] + 2.0 * self.a12 * v[0] * v[1] + self.a22 * v[1] * v[1]
    }

    pub fn sub(&self, other: &SymMat) -> SymMat {
        SymMat::new(self.a11 - other.a11, self.a12 - other.a12, self.a22 - other.a22)
    }

    pub fn scale(&self, s: f64) -> SymMat {
        SymMat::new(s * self.a11, s * self.a12, s * self.a22)
    }

    pub fn frobenius(&self) -> f64 {
        (self.a11 * self.a11 + 2.0 * self.a12 * self.a12 + self.a22 * self.a22).sqrt()
    }

    /// Eigenvalues (ascending) and the matching unit eigenvectors.
    pub fn eigen(&self, dim: usize) -> (Vec<f64>, Vec<Vec2>) {
        if dim == 1 {
            return (vec![self.a11], vec![[1.0, 0.0]]);
        }
        let mean = 0.5 * (self.a11 + self.a22);
        let half_diff = 0.5 * (self.a11 - self.a22);
        let radius = half_diff.hypot(self.a12);
        // major axis angle
        let theta = 0.5 * (2.0 * self.a12).atan2(self.a11 - self.a22);
        let (s, c) = theta.sin_cos();
        (vec![mean - radius, mean + radius], vec![[-s, c], [c, s]])
    }

    pub fn eigenvalues(&self, dim: usize) -> Vec<f64> {
        self.eigen(dim).0
    }

    /// Rebuilds `Σ λ_i v_i v_iᵀ` after mapping every eigenvalue through `f`.
    pub fn map_spectrum<F: Fn(f64) -> f64>(&self, dim: usize, f: F) -> SymMat {
        if dim == 1 {
            return SymMat::new(f(self.a11), 0.0, 0.0);
        }
        let (vals, vecs) = self.eigen(dim);
        let mut out = SymMat::new(0.0, 0.0, 0.0);
        for (l, v) in vals.into_iter().zip(vecs) {
            let fl = f(l);
            out.a11 += fl * v[0] * v[0];
            out.a12 += fl * v[0] * v[1];
            out.a22 += fl * v[1] * v[1];
        }
        out
    }

    /// Symmetric square root; negative eigenvalues are treated as zero.
    pub fn sqrt(&self, dim: usize) -> SymMat {
        self.map_spectrum(dim, |l| l.max(0.0).sqrt())
    }

    pub fn spectral_norm(&self, dim: usize) -> f64 {
        self.eigenvalues(dim).into_iter().map(f64::abs).fold(0.0, f64::max)
    }

    pub fn to_mat2(self) -> Mat2 {
        [[self.a11, self.a12], [self.a12, self.a22]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub xi1: f64,
    pub xi2: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl ControlBounds {
    pub fn new(xi1: f64, xi2: f64, alpha: f64, gamma: f64) -> Result<Self> {
        let b = Self {
            xi1,
            xi2,
            alpha,
            gamma,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && self.alpha <= self.xi1
            && self.xi1 <= self.xi2
            && self.xi2.is_finite()
            && self.gamma > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "control bounds must satisfy 0 < alpha <= xi1 <= xi2 and gamma > 0 (got alpha={}, xi1={}, xi2={}, gamma={})",
                self.alpha, self.xi1, self.xi2, self.gamma
            )))
        }
    }

    pub fn lower_eig(&self) -> f64 {
        self.xi1 * self.xi1
    }

    pub fn upper_eig(&self) -> f64 {
        self.xi2 * self.xi2
    }

    fn clip(&self, l: f64) -> f64 {
        l.clamp(self.lower_eig(), self.upper_eig())
    }
}

impl Default for ControlBounds {
    fn default() -> Self {
        Self {
            xi1: 0.5,
            xi2: 2.0,
            alpha: 0.5,
            gamma: 10.0,
        }
    }
}

/// One symmetric matrix per cell together with its cached square root.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlField {
    dim: usize,
    mats: Vec<SymMat>,
    sqrts: Vec<SymMat>,
}

impl ControlField {
    pub fn new(dim: usize, mats: Vec<SymMat>) -> Self {
        let mats: Vec<SymMat> = if dim == 1 {
            mats.into_iter().map(SymMat::restrict_1d).collect()
        } else {
            mats
        };
        let sqrts = mats.iter().map(|m| m.sqrt(dim)).collect();
        Self { dim, mats, sqrts }
    }

    pub fn constant(mesh: &Mesh, a: SymMat) -> Self {
        Self::new(mesh.dim(), vec![a; mesh.n_cells()])
    }

    pub fn identity(mesh: &Mesh) -> Self {
        Self::constant(mesh, SymMat::identity(mesh.dim()))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn matrices(&self) -> &[SymMat] {
        &self.mats
    }

    pub fn sqrt_matrices(&self) -> &[SymMat] {
        &self.sqrts
    }

    pub fn matrix(&self, t: usize) -> &SymMat {
        &self.mats[t]
    }

    pub fn sqrt_matrix(&self, t: usize) -> &SymMat {
        &self.sqrts[t]
    }

    /// Smallest and largest eigenvalue over all cells.
    pub fn spectral_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for m in &self.mats {
            for l in m.eigenvalues(self.dim) {
                lo = lo.min(l);
                hi = hi.max(l);
            }
        }
        (lo, hi)
    }

    /// Spectral membership check at tolerance 1e−10.
    pub fn satisfies_spectral_bounds(&self, bounds: &ControlBounds) -> bool {
        let (lo, hi) = self.spectral_range();
        lo >= bounds.lower_eig() - 1e-10 && hi <= bounds.upper_eig() + 1e-10
    }

    pub fn max_abs_diff(&self, other: &ControlField) -> f64 {
        self.mats
            .iter()
            .zip(&other.mats)
            .map(|(a, b)| {
                let d = a.sub(b);
                d.a11.abs().max(d.a12.abs()).max(d.a22.abs())
            })
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if self.dim == 1 {
            out.push_str("cell_id,a11\n");
            for (t, m) in self.mats.iter().enumerate() {
                out.push_str(&format!("{},{}\n", t, fmt_f64(m.a11)));
            }
        } else {
            out.push_str("cell_id,a11,a12,a22\n");
            for (t, m) in self.mats.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    t,
                    fmt_f64(m.a11),
                    fmt_f64(m.a12),
                    fmt_f64(m.a22)
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvReport {
    pub tv_value: f64,
    pub within_budget: bool,
}

/// Discrete total variation of `A^{1/2}`: facet measure times the Frobenius
/// norm of the square-root jump, summed over interior facets.
pub fn discrete_tv(field: &ControlField, mesh: &Mesh) -> f64 {
    mesh.interior_facets()
        .iter()
        .map(|f| {
            let jump = field.sqrt_matrix(f.cells.0).sub(field.sqrt_matrix(f.cells.1));
            f.measure * jump.frobenius()
        })
        .sum()
}

pub fn tv_report(field: &ControlField, mesh: &Mesh, bounds: &ControlBounds) -> TvReport {
    let tv_value = discrete_tv(field, mesh);
    TvReport {
        tv_value,
        within_budget: tv_value <= bounds.gamma + 1e-10,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub field: ControlField,
    pub warnings: Vec<String>,
}

/// Clips the spectrum of each cell matrix into `[ξ₁², ξ₂²]`.
///
/// Non-symmetric input is replaced by its symmetric part first and reported in
/// `warnings`. Matrices already inside the bounds are returned bit-for-bit.
pub fn project_to_admissible(matrices: &[Mat2], dim: usize, bounds: &ControlBounds) -> Projection {
    let mut warnings = Vec::new();
    let mats = matrices
        .iter()
        .enumerate()
        .map(|(t, m)| {
            let asym = if dim == 1 { 0.0 } else { (m[0][1] - m[1][0]).abs() };
            if asym > 0.0 {
                warnings.push(format!("cell {t}: non-symmetric matrix symmetrized (|a12-a21|={asym:e})"));
            }
            let sym = if dim == 1 {
                SymMat::new(m[0][0], 0.0, 0.0)
            } else {
                SymMat::new(m[0][0], 0.5 * (m[0][1] + m[1][0]), m[1][1])
            };
            project_matrix(sym, dim, bounds)
        })
        .collect();
    Projection {
        field: ControlField::new(dim, mats),
        warnings,
    }
}

fn project_matrix(m: SymMat, dim: usize, bounds: &ControlBounds) -> SymMat {
    let vals = m.eigenvalues(dim);
    if vals.iter().all(|&l| l >= bounds.lower_eig() && l <= bounds.upper_eig()) {
        m
    } else {
        m.map_spectrum(dim, |l| bounds.clip(l))
    }
}

impl ControlField {
    pub fn project(&self, bounds: &ControlBounds) -> ControlField {
        let mats = self.mats.iter().map(|m| project_matrix(*m, self.dim, bounds)).collect();
        ControlField::new(self.dim, mats)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlScheme {
    ConstantDiagonal,
    ConstantRotated,
    TwoBlock,
}

impl ControlScheme {
    pub fn theta_len(self) -> usize {
        match self {
            ControlScheme::ConstantDiagonal => 2,
            ControlScheme::ConstantRotated => 3,
            ControlScheme::TwoBlock => 4,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            ControlScheme::ConstantDiagonal => "constant-diagonal",
            ControlScheme::ConstantRotated => "constant-rotated",
            ControlScheme::TwoBlock => "two-block",
        }
    }
}

impl fmt::Display for ControlScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ControlScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant-diagonal" => Ok(ControlScheme::ConstantDiagonal),
            "constant-rotated" => Ok(ControlScheme::ConstantRotated),
            "two-block" => Ok(ControlScheme::TwoBlock),
            other => Err(Error::Config(format!("unknown control scheme '{other}'"))),
        }
    }
}

/// Builds a control from a low-dimensional parameter vector.
///
/// Diagonal entries (or rotated eigenvalues) are clipped into `[ξ₁², ξ₂²]`.
/// Parameter lengths are fixed per scheme; on 1D meshes only the `(1,1)` entry
/// of the 2×2 construction is kept.
pub fn parameterize(theta: &[f64], scheme: ControlScheme, mesh: &Mesh, bounds: &ControlBounds) -> Result<ControlField> {
    if theta.len() != scheme.theta_len() {
        return Err(Error::Config(format!(
            "scheme {} expects {} parameters, got {}",
            scheme,
            scheme.theta_len(),
            theta.len()
        )));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("non-finite control parameter".into()));
    }
    let dim = mesh.dim();
    let c = |v: f64| bounds.clip(v);
    let finish = |m: SymMat| if dim == 1 { m.restrict_1d() } else { m };
    let field = match scheme {
        ControlScheme::ConstantDiagonal => {
            ControlField::constant(mesh, finish(SymMat::new(c(theta[0]), 0.0, c(theta[1]))))
        }
        ControlScheme::ConstantRotated => {
            ControlField::constant(mesh, finish(SymMat::rotated(c(theta[0]), c(theta[1]), theta[2])))
        }
        ControlScheme::TwoBlock => {
            let left = finish(SymMat::new(c(theta[0]), 0.0, c(theta[1])));
            let right = finish(SymMat::new(c(theta[2]), 0.0, c(theta[3])));
            let mats = mesh
                .barycenters()
                .iter()
                .map(|b| if b[0] < 0.5 { left } else { right })
                .collect();
            ControlField::new(dim, mats)
        }
    };
    Ok(field)
}
