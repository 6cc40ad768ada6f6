//! Regularization sweeps `(ε_n, k_n) → (0, ∞)` and the quantitative estimates
//! checked along them.
//!
//! The finest step of a schedule serves as reference. Steps are independent
//! and run in parallel; records always come back in schedule order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{ControlBounds, ControlField};
use crate::error::{Error, Result};
use crate::hammerstein::{solve_hammerstein, weighted_lp, Kernel};
use crate::io::fmt_f64;
use crate::mesh::Mesh;
use crate::ocp::{minimize, Method, OcpInstance};
use crate::plap::{exceedance_volume, PlapContext, ProblemParams, SolverOptions, StateField};
use crate::sparse::{dot, pcg};
use crate::truncation::{bracket, RegParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSchedule {
    steps: Vec<RegParams>,
}

impl SweepSchedule {
    pub fn new(steps: Vec<RegParams>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Config("sweep schedule is empty".into()));
        }
        for r in &steps {
            r.validate()?;
        }
        for w in steps.windows(2) {
            if !(w[1].epsilon < w[0].epsilon) || !(w[1].k > w[0].k) {
                return Err(Error::Validation(
                    "schedule needs strictly decreasing epsilon and strictly increasing k".into(),
                ));
            }
        }
        Ok(Self { steps })
    }

    pub fn from_pairs(pairs: &[(f64, f64)], delta: f64) -> Result<Self> {
        let steps = pairs
            .iter()
            .map(|&(e, k)| RegParams::new(e, k, delta))
            .collect::<Result<Vec<_>>>()?;
        Self::new(steps)
    }

    pub fn steps(&self) -> &[RegParams] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn finest(&self) -> &RegParams {
        self.steps.last().expect("schedule is non-empty")
    }
}

impl Default for SweepSchedule {
    /// `ε_n = 10^{−n}`, `k_n = 2^n`, `n = 1..6`.
    fn default() -> Self {
        let pairs: Vec<(f64, f64)> = (1..=6).map(|n| (10f64.powi(-n), 2f64.powi(n))).collect();
        Self::from_pairs(&pairs, 0.5).expect("default schedule is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epsilon: f64,
    pub k: f64,
    pub iterations: usize,
    pub h1: f64,
    pub energy_seminorm: f64,
    pub w1p: f64,
    /// `|{|S∇y| > √(k²+1)}|` and `ξ₂^p ‖∇y‖_p^p k^{−p}`.
    pub omega1: f64,
    pub omega1_bound: f64,
    /// `|{|S∇y| ≥ √(k²+1)}|` and `‖y‖_{A,ε,k}^p k^{−p}`.
    pub omega_k: f64,
    pub omega_k_bound: f64,
    /// `α⁻¹(|Ω|^{(p−2)/(2p)} ‖y‖_{A,ε,k} + ‖y‖_{A,ε,k}^{p/2})`.
    pub chain_bound: f64,
    pub y_diff_h1: f64,
    pub z_lp: Option<f64>,
    pub z_l2: Option<f64>,
    pub y_cells_l2: Option<f64>,
    /// `|{|z| > √(k²+1)}|` and `‖z‖_p^p k^{−p}`.
    pub omega3: Option<f64>,
    pub omega3_bound: Option<f64>,
    pub z_diff_lp: Option<f64>,
    pub cost: Option<f64>,
}

impl StepRecord {
    /// Slack of every measure estimate available on this step; all must be `≥ 0`.
    pub fn measure_slacks(&self) -> Vec<f64> {
        let mut s = vec![self.omega1_bound - self.omega1, self.omega_k_bound - self.omega_k];
        if let (Some(m), Some(b)) = (self.omega3, self.omega3_bound) {
            s.push(b - m);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAbort {
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub p: f64,
    pub reference: String,
    pub poincare_constant: f64,
    pub records: Vec<StepRecord>,
    pub aborted: Option<SweepAbort>,
    /// `‖y‖^{p−1}_{A,ε,k} ≤ 1.05 · C_Ω α⁻¹ ‖f‖ |Ω|^{(p−2)/(2p)}` at the last step.
    pub limit_bound: Option<LimitCheck>,
}

fn last_three_non_increasing(v: &[f64]) -> bool {
    let tail = &v[v.len().saturating_sub(3)..];
    tail.windows(2).all(|w| w[1] <= w[0])
}

impl SweepManifest {
    pub fn completed(&self) -> bool {
        self.aborted.is_none()
    }

    pub fn y_diffs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.y_diff_h1).collect()
    }

    pub fn z_diffs(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.z_diff_lp).collect()
    }

    pub fn y_trend_ok(&self) -> bool {
        last_three_non_increasing(&self.y_diffs())
    }

    pub fn z_trend_ok(&self) -> bool {
        last_three_non_increasing(&self.z_diffs())
    }

    /// First z-diff over the last non-reference z-diff.
    pub fn z_reduction(&self) -> Option<f64> {
        let d = self.z_diffs();
        if d.len() < 2 {
            return None;
        }
        Some(d[0] / d[d.len() - 2])
    }

    pub fn measures_ok(&self) -> bool {
        self.records.iter().all(|r| r.measure_slacks().iter().all(|s| *s >= 0.0))
    }

    pub fn h1_within_chain(&self) -> bool {
        self.records.iter().all(|r| r.h1 <= r.chain_bound + 1e-8)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), fmt_f64);
        let mut out = String::from(
            "step,epsilon,k,h1,energy_seminorm,w1p,z_lp,omega1,omega1_bound,omega3,omega3_bound,omega_k,omega_k_bound,cost,y_diff_h1,z_diff_lp\n",
        );
        for (i, r) in self.records.iter().enumerate() {
            let row = [
                i.to_string(),
                fmt_f64(r.epsilon),
                fmt_f64(r.k),
                fmt_f64(r.h1),
                fmt_f64(r.energy_seminorm),
                fmt_f64(r.w1p),
                opt(r.z_lp),
                fmt_f64(r.omega1),
                fmt_f64(r.omega1_bound),
                opt(r.omega3),
                opt(r.omega3_bound),
                fmt_f64(r.omega_k),
                fmt_f64(r.omega_k_bound),
                opt(r.cost),
                fmt_f64(r.y_diff_h1),
                opt(r.z_diff_lp),
            ];
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// `C_Ω = 1/√λ_min` for the discrete Dirichlet problem `K v = λ M v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoincareConstant {
    pub c_omega: f64,
    pub lambda_min: f64,
    pub iterations: usize,
}

/// Inverse power iteration on the free vertices until `λ` changes by less than 1e−10 relative.
pub fn estimate_poincare(mesh: &Mesh) -> PoincareConstant {
    let ctx = PlapContext::new(mesh);
    estimate_poincare_with(&ctx)
}

pub fn estimate_poincare_with(ctx: &PlapContext<'_>) -> PoincareConstant {
    let dofs = &ctx.dofs;
    let n = dofs.n_free;
    let mass_free = |v: &[f64]| dofs.restrict(&ctx.mass().mul(&dofs.extend(v)));
    let mut v = vec![1.0; n];
    let mut lambda = f64::INFINITY;
    let mut iterations = 0;
    for it in 1..=1000 {
        iterations = it;
        let rhs = mass_free(&v);
        let mut x = v.clone();
        pcg(ctx.laplacian(), &rhs, &mut x, 1e-14, 20 * n + 200);
        let kx = ctx.laplacian().mul(&x);
        let mx = mass_free(&x);
        let next = dot(&x, &kx) / dot(&x, &mx);
        let scale = dot(&x, &mx).sqrt();
        v = x.iter().map(|a| a / scale).collect();
        let done = ((next - lambda) / next).abs() < 1e-10;
        lambda = next;
        if done {
            break;
        }
    }
    PoincareConstant {
        c_omega: 1.0 / lambda.sqrt(),
        lambda_min: lambda,
        iterations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestEstimate {
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub passed: bool,
}

/// `|∫ g y| ≤ C_Ω α⁻¹ ‖g‖ (|Ω|^{(p−2)/(2p)} ‖y‖_{A,ε,k} + k^{(2−p)/2} ‖y‖_{A,ε,k}^{p/2})` for a per-cell `g`.
#[allow(clippy::too_many_arguments)]
pub fn check_test_estimate(
    g: &[f64],
    y: &StateField,
    a: &ControlField,
    reg: &RegParams,
    p: f64,
    bounds: &ControlBounds,
    c: &PoincareConstant,
    ctx: &PlapContext<'_>,
) -> TestEstimate {
    let mesh = ctx.mesh;
    let means = mesh.cell_means(y.values());
    let integrand: Vec<f64> = g.iter().zip(&means).map(|(a, b)| a * b).collect();
    let lhs = mesh.integrate_cells(&integrand).abs();
    let g_l2 = weighted_lp(g, mesh.cell_volumes(), 2.0);
    let s = ctx.energy_seminorm(y, a, reg, p);
    let omega = mesh.domain_measure();
    let rhs = c.c_omega / bounds.alpha
        * g_l2
        * (omega.powf((p - 2.0) / (2.0 * p)) * s + reg.k.powf(0.5 * (2.0 - p)) * s.powf(0.5 * p));
    let tol = 1e-12 * (1.0 + rhs);
    TestEstimate {
        lhs,
        rhs,
        margin: rhs - lhs,
        passed: lhs <= rhs + tol,
    }
}

fn h1_seminorm_diff(mesh: &Mesh, a: &StateField, b: &StateField) -> f64 {
    a.gradients()
        .iter()
        .zip(b.gradients())
        .zip(mesh.cell_volumes())
        .map(|((g, h), v)| v * ((g[0] - h[0]).powi(2) + (g[1] - h[1]).powi(2)))
        .sum::<f64>()
        .sqrt()
}

struct StepSolve {
    y: StateField,
    record: StepRecord,
    z: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn solve_step(
    ctx: &PlapContext<'_>,
    a: &ControlField,
    reg: &RegParams,
    params: &ProblemParams,
    bounds: &ControlBounds,
    kernel: Option<&Kernel>,
    z_d: Option<&[f64]>,
    opts: &SolverOptions,
) -> std::result::Result<StepSolve, String> {
    let mesh = ctx.mesh;
    let p = params.p;
    let (y, rep) = ctx.solve(a, reg, params, opts).map_err(|e| e.to_string())?;
    if !rep.converged {
        return Err(format!(
            "state solve at eps={:e}, k={} stopped at residual {:e}",
            reg.epsilon, reg.k, rep.final_residual
        ));
    }
    let norms = ctx.norms(&y, a, reg, p);
    let vols = mesh.cell_volumes();
    let args = ctx.cell_arguments(y.gradients(), a);
    let threshold = (reg.k_sq() + 1.0).sqrt();
    let s = norms.energy_seminorm;
    let omega = mesh.domain_measure();
    let mut record = StepRecord {
        epsilon: reg.epsilon,
        k: reg.k,
        iterations: rep.iterations,
        h1: norms.h1,
        energy_seminorm: s,
        w1p: norms.w1p,
        omega1: exceedance_volume(&args, vols, threshold, false),
        omega1_bound: (bounds.xi2 * norms.w1p / reg.k).powf(p),
        omega_k: exceedance_volume(&args, vols, threshold, true),
        omega_k_bound: (s / reg.k).powf(p),
        chain_bound: (omega.powf((p - 2.0) / (2.0 * p)) * s + s.powf(0.5 * p)) / bounds.alpha,
        y_diff_h1: 0.0,
        z_lp: None,
        z_l2: None,
        y_cells_l2: None,
        omega3: None,
        omega3_bound: None,
        z_diff_lp: None,
        cost: None,
    };
    let mut z_out = None;
    if let Some(kernel) = kernel {
        let y_cells = mesh.cell_means(y.values());
        let (z, zrep) = solve_hammerstein(&y_cells, kernel, p, Some(reg), 1e-12, 100).map_err(|e| e.to_string())?;
        if !zrep.converged {
            return Err(format!(
                "hammerstein solve at eps={:e}, k={} stopped at residual {:e}",
                reg.epsilon, reg.k, zrep.final_residual
            ));
        }
        let zsq: Vec<f64> = z.values.iter().map(|v| v * v).collect();
        record.z_lp = Some(z.lp_norm);
        record.z_l2 = Some(z.l2_norm);
        record.y_cells_l2 = Some(weighted_lp(&y_cells, vols, 2.0));
        record.omega3 = Some(exceedance_volume(&zsq, vols, threshold, false));
        record.omega3_bound = Some((z.lp_norm / reg.k).powf(p));
        if let Some(zd) = z_d {
            let sq: Vec<f64> = z.values.iter().zip(zd).map(|(a, b)| (a - b) * (a - b)).collect();
            record.cost = Some(mesh.integrate_cells(&sq));
        }
        z_out = Some(z.values);
    }
    Ok(StepSolve { y, record, z: z_out })
}

#[allow(clippy::too_many_arguments)]
fn run_sweep(
    a: &ControlField,
    schedule: &SweepSchedule,
    params: &ProblemParams,
    bounds: &ControlBounds,
    mesh: &Mesh,
    kernel: Option<&Kernel>,
    z_d: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<SweepManifest> {
    if !a.satisfies_spectral_bounds(bounds) {
        return Err(Error::Validation("sweep control violates the spectral bounds".into()));
    }
    let ctx = PlapContext::new(mesh);
    let outcomes: Vec<_> = schedule
        .steps()
        .par_iter()
        .map(|reg| solve_step(&ctx, a, reg, params, bounds, kernel, z_d, opts))
        .collect();
    let mut solves = Vec::new();
    let mut aborted = None;
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(s) => solves.push(s),
            Err(reason) => {
                aborted = Some(SweepAbort { step: i, reason });
                break;
            }
        }
    }
    let p = params.p;
    let poincare = estimate_poincare_with(&ctx);
    let mut limit_bound = None;
    if aborted.is_none() {
        let last = solves.last().expect("completed sweep has steps");
        let (y_ref, z_ref) = (last.y.clone(), last.z.clone());
        for s in &mut solves {
            s.record.y_diff_h1 = h1_seminorm_diff(mesh, &s.y, &y_ref);
            if let (Some(z), Some(zr)) = (&s.z, &z_ref) {
                let d: Vec<f64> = z.iter().zip(zr).map(|(a, b)| a - b).collect();
                s.record.z_diff_lp = Some(weighted_lp(&d, mesh.cell_volumes(), p));
            }
        }
        let f_l2 = ctx.l2_norm(&params.f);
        let rhs = poincare.c_omega / bounds.alpha * f_l2 * mesh.domain_measure().powf((p - 2.0) / (2.0 * p));
        let lhs = solves.last().expect("completed sweep has steps").record.energy_seminorm.powf(p - 1.0);
        limit_bound = Some(LimitCheck {
            lhs,
            rhs,
            passed: lhs <= 1.05 * rhs,
        });
    }
    let fin = schedule.finest();
    Ok(SweepManifest {
        p,
        reference: format!("finest step eps={:e}, k={}", fin.epsilon, fin.k),
        poincare_constant: poincare.c_omega,
        records: solves.into_iter().map(|s| s.record).collect(),
        aborted,
        limit_bound,
    })
}

/// Regularized state solves along the schedule.
pub fn run_state_sweep(
    a: &ControlField,
    schedule: &SweepSchedule,
    params: &ProblemParams,
    bounds: &ControlBounds,
    mesh: &Mesh,
) -> Result<SweepManifest> {
    run_sweep(a, schedule, params, bounds, mesh, None, None, &SolverOptions::default())
}

/// State plus regularized Hammerstein solves; `z_d` adds the tracking cost per step.
pub fn run_coupled_sweep(
    a: &ControlField,
    schedule: &SweepSchedule,
    params: &ProblemParams,
    bounds: &ControlBounds,
    kernel: &Kernel,
    mesh: &Mesh,
    z_d: Option<&[f64]>,
) -> Result<SweepManifest> {
    run_sweep(a, schedule, params, bounds, mesh, Some(kernel), z_d, &SolverOptions::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueRow {
    pub epsilon: f64,
    pub k: f64,
    pub value: Option<f64>,
    pub theta: Option<Vec<f64>>,
    pub evaluations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub rows: Vec<ValueRow>,
    pub reference: f64,
    pub reference_theta: Vec<f64>,
    pub grid_evaluations: usize,
}

impl ValueTable {
    pub fn gaps(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.value.map_or(f64::INFINITY, |v| (v - self.reference).abs()))
            .collect()
    }

    pub fn trend_ok(&self) -> bool {
        last_three_non_increasing(&self.gaps())
    }

    pub fn final_gap_ok(&self) -> bool {
        self.gaps().last().is_some_and(|g| *g <= 1e-3 * (1.0 + self.reference.abs()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epsilon,k,value,gap,evaluations\n");
        for (i, (r, g)) in self.rows.iter().zip(self.gaps()).enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i,
                fmt_f64(r.epsilon),
                fmt_f64(r.k),
                r.value.map_or_else(|| "nan".into(), fmt_f64),
                fmt_f64(g),
                r.evaluations
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ValueOptions {
    pub theta0: Vec<f64>,
    pub method: Method,
    pub budget: usize,
    /// Points per axis of the reference grid over `[ξ₁², ξ₂²]`.
    pub grid_points: usize,
}

/// Minimizes the cost at every schedule step and compares with a dense θ-grid
/// minimum at the finest regularization. On 1D meshes the second diagonal entry
/// has no effect and is held at `theta0[1]` on the grid.
pub fn run_value_convergence(template: &OcpInstance<'_>, schedule: &SweepSchedule, opts: &ValueOptions) -> Result<ValueTable> {
    if template.scheme != crate::control::ControlScheme::ConstantDiagonal {
        return Err(Error::Config("value convergence needs the constant-diagonal scheme".into()));
    }
    if opts.grid_points < 2 {
        return Err(Error::Config("reference grid needs at least 2 points per axis".into()));
    }
    let rows: Vec<ValueRow> = schedule
        .steps()
        .par_iter()
        .map(|reg| {
            let mut inst = template.clone();
            inst.reg = Some(*reg);
            match minimize(&inst, &opts.theta0, opts.method, opts.budget) {
                Ok(r) => ValueRow {
                    epsilon: reg.epsilon,
                    k: reg.k,
                    value: Some(r.cost_opt),
                    theta: Some(r.theta_opt),
                    evaluations: r.evaluations,
                    error: None,
                },
                Err(e) => ValueRow {
                    epsilon: reg.epsilon,
                    k: reg.k,
                    value: None,
                    theta: None,
                    evaluations: 0,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let mut finest = template.clone();
    finest.reg = Some(*schedule.finest());
    let (lo, hi) = (template.bounds.lower_eig(), template.bounds.upper_eig());
    let m = opts.grid_points;
    let axis: Vec<f64> = (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect();
    let second: Vec<f64> = if template.mesh.dim() == 1 { vec![opts.theta0[1]] } else { axis.clone() };
    let grid: Vec<[f64; 2]> = axis.iter().flat_map(|&a| second.iter().map(move |&b| [a, b])).collect();
    let costs: Vec<f64> = grid
        .par_iter()
        .map(|th| finest.evaluate_cost(th).unwrap_or(f64::INFINITY))
        .collect();
    let (best_i, reference) = costs
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &c)| if c < acc.1 { (i, c) } else { acc });
    if !reference.is_finite() {
        return Err(Error::Optimization("reference grid produced no valid cost".into()));
    }
    Ok(ValueTable {
        rows,
        reference,
        reference_theta: grid[best_i].to_vec(),
        grid_evaluations: grid.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointwiseLimit {
    pub worst_slack: f64,
    pub passed: bool,
}

/// Final-step error of `(ε+F_k(t²))^{(p−2)/2} t` against `|t|^{p−2} t` on a sample grid.
///
/// With `r = (p−2)/2`, for `|t| ≤ k` the error is at most
/// `ε^{min(r,1)} · max(1, r) · (ε + t²)^{max(r−1, 0)} · (1 + |t|)`; beyond that
/// the bound is the sum of both magnitudes.
pub fn check_pointwise_limit(schedule: &SweepSchedule, p: f64, samples: &[f64]) -> PointwiseLimit {
    let reg = schedule.finest();
    let r = 0.5 * (p - 2.0);
    let mut worst = f64::INFINITY;
    for &t in samples {
        let reg_val = bracket(t * t, reg, p) * t;
        let exact = t.abs().powf(p - 2.0) * t;
        let err = (reg_val - exact).abs();
        let bound = if t.abs() <= reg.k {
            reg.epsilon.powf(r.min(1.0)) * r.max(1.0) * (reg.epsilon + t * t).powf((r - 1.0).max(0.0)) * (1.0 + t.abs())
        } else {
            reg_val.abs() + exact.abs()
        };
        worst = worst.min(bound - err);
    }
    PointwiseLimit {
        worst_slack: worst,
        passed: worst >= -1e-12,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{parameterize, ControlScheme, SymMat};

    fn short_schedule() -> SweepSchedule {
        SweepSchedule::from_pairs(&[(1e-1, 2.0), (1e-2, 4.0), (1e-3, 8.0)], 0.5).unwrap()
    }

    #[test]
    fn schedule_validation() {
        assert_eq!(SweepSchedule::default().len(), 6);
        assert!(SweepSchedule::from_pairs(&[(1e-1, 2.0), (1e-1, 4.0)], 0.5).is_err());
        assert!(SweepSchedule::from_pairs(&[(1e-1, 2.0), (1e-2, 2.0)], 0.5).is_err());
        assert!(SweepSchedule::new(vec![]).is_err());
    }

    #[test]
    fn poincare_1d_and_random_fields() {
        let mesh = Mesh::build(1, 64).unwrap();
        let c = estimate_poincare(&mesh);
        assert!((c.c_omega * std::f64::consts::PI - 1.0).abs() < 0.01);
        // discrete eigenvalue of the P1 scheme with consistent mass: (6/h²)(1−cos πh)/(2+cos πh)
        let h = mesh.h();
        let ch = (std::f64::consts::PI * h).cos();
        let lambda = 6.0 / (h * h) * (1.0 - ch) / (2.0 + ch);
        assert!((c.lambda_min - lambda).abs() < 1e-8 * lambda);
        let ctx = PlapContext::new(&mesh);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let free: Vec<f64> = (0..ctx.dofs.n_free).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v = StateField::from_free(&mesh, &ctx.dofs, &free);
            let grad: f64 = v.gradients().iter().zip(mesh.cell_volumes()).map(|(g, w)| w * g[0] * g[0]).sum::<f64>().sqrt();
            assert!(ctx.l2_norm(v.values()) <= c.c_omega * (1.0 + 1e-6) * grad);
        }
    }

    #[test]
    fn p2_sweep_is_step_independent() {
        let mesh = Mesh::build(1, 32).unwrap();
        let a = ControlField::identity(&mesh);
        let params = ProblemParams::constant_source(&mesh, 2.0, 1.0).unwrap();
        let m = run_state_sweep(&a, &short_schedule(), &params, &ControlBounds::default(), &mesh).unwrap();
        assert!(m.completed());
        for r in &m.records {
            assert!(r.y_diff_h1 < 1e-12);
            assert!((r.h1 - m.records[0].h1).abs() < 1e-12);
        }
        assert!(m.limit_bound.as_ref().unwrap().passed);
    }

    #[test]
    fn zero_kernel_coupled_sweep() {
        let mesh = Mesh::build(1, 32).unwrap();
        let a = ControlField::identity(&mesh);
        let params = ProblemParams::constant_source(&mesh, 3.0, 1.0).unwrap();
        let m = run_coupled_sweep(&a, &short_schedule(), &params, &ControlBounds::default(), &Kernel::zero(&mesh), &mesh, None)
            .unwrap();
        assert!(m.z_diffs().iter().all(|d| *d == 0.0));
        assert!(m.records.iter().all(|r| r.z_lp == Some(0.0)));
        assert!(m.measures_ok());
        assert!(m.h1_within_chain());
    }

    #[test]
    fn test_estimate_cases() {
        let mesh = Mesh::build(2, 8).unwrap();
        let ctx = PlapContext::new(&mesh);
        let a = parameterize(&[1.0, 3.0, 0.6], ControlScheme::ConstantRotated, &mesh, &ControlBounds::default()).unwrap();
        let c = estimate_poincare_with(&ctx);
        for p in [2.0, 3.0] {
            let reg = RegParams::with_default_delta(1e-2, 4.0).unwrap();
            let params = ProblemParams::constant_source(&mesh, p, 1.0).unwrap();
            let (y, _) = ctx.solve(&a, &reg, &params, &SolverOptions::default()).unwrap();
            let zero = vec![0.0; mesh.n_cells()];
            let t = check_test_estimate(&zero, &y, &a, &reg, p, &ControlBounds::default(), &c, &ctx);
            assert!(t.passed && t.lhs == 0.0 && t.rhs == 0.0);
            let g: Vec<f64> = mesh.barycenters().iter().map(|b| (7.0 * b[0]).sin() + b[1]).collect();
            let t = check_test_estimate(&g, &y, &a, &reg, p, &ControlBounds::default(), &c, &ctx);
            assert!(t.passed && t.margin > 0.0, "{t:?}");
        }
    }

    #[test]
    fn pointwise_limit_bound() {
        let samples: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.25).collect();
        for p in [2.0, 3.0, 4.0, 5.0] {
            let chk = check_pointwise_limit(&SweepSchedule::default(), p, &samples);
            assert!(chk.passed, "p={p}: {chk:?}");
        }
    }

    #[test]
    fn truncation_is_inert_below_k() {
        let mesh = Mesh::build(1, 16).unwrap();
        let ctx = PlapContext::new(&mesh);
        let a = ControlField::constant(&mesh, SymMat::scalar(1, 1.0));
        let params = ProblemParams::constant_source(&mesh, 4.0, 1.0).unwrap();
        let coarse = RegParams::with_default_delta(1e-2, 2.0).unwrap();
        let fine = RegParams::with_default_delta(1e-2, 50.0).unwrap();
        let (y, _) = ctx.solve(&a, &coarse, &params, &SolverOptions::default()).unwrap();
        let max_arg = ctx.cell_arguments(y.gradients(), &a).into_iter().fold(0.0, f64::max);
        assert!(max_arg <= 4.0);
        assert_eq!(ctx.assemble(&y, &a, &coarse, 4.0).1, ctx.assemble(&y, &a, &fine, 4.0).1);
    }
}
