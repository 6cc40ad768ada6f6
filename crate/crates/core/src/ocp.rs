//! Tracking cost over parameterized controls and a derivative-free minimizer.
//!
//! Each cost evaluation builds `A(θ)`, solves the regularized state equation,
//! averages the state onto cell barycenters, solves the Hammerstein equation and
//! integrates `(z − z_d)²`. Exceeding the TV budget is penalized quadratically.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::control::{parameterize, project_to_admissible, tv_report, ControlBounds, ControlField, ControlScheme, TvReport};
use crate::error::{Error, Result};
use crate::hammerstein::{solve_hammerstein, HammersteinState, Kernel};
use crate::io::fmt_f64;
use crate::mesh::Mesh;
use crate::plap::{PlapContext, ProblemParams, SolverOptions, StateField};
use crate::truncation::RegParams;

/// Regularization used for the state equation when an instance carries none.
pub const FALLBACK_STATE_REG: RegParams = RegParams {
    epsilon: 1e-6,
    k: 1e3,
    delta: 0.5,
};

pub const DEFAULT_TV_PENALTY: f64 = 1e3;

#[derive(Debug, Clone)]
pub struct OcpInstance<'m> {
    pub mesh: &'m Mesh,
    pub params: ProblemParams,
    pub bounds: ControlBounds,
    pub kernel: Kernel,
    pub z_d: Vec<f64>,
    pub reg: Option<RegParams>,
    pub scheme: ControlScheme,
    pub tv_penalty_weight: f64,
    pub state_options: SolverOptions,
    pub hammerstein_tol: f64,
    pub hammerstein_max_iter: usize,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub theta: Vec<f64>,
    pub cost: f64,
    pub valid: bool,
    pub tv_report: TvReport,
    pub state: Option<StateField>,
    pub zstate: Option<HammersteinState>,
    pub message: Option<String>,
}

impl<'m> OcpInstance<'m> {
    pub fn new(
        mesh: &'m Mesh,
        params: ProblemParams,
        bounds: ControlBounds,
        kernel: Kernel,
        z_d: Vec<f64>,
        reg: Option<RegParams>,
        scheme: ControlScheme,
    ) -> Result<Self> {
        bounds.validate()?;
        if let Some(r) = &reg {
            r.validate()?;
        }
        if z_d.len() != mesh.n_cells() || kernel.size() != mesh.n_cells() {
            return Err(Error::Validation("target field and kernel must have one entry per cell".into()));
        }
        if z_d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("target field must be finite".into()));
        }
        Ok(Self {
            mesh,
            params,
            bounds,
            kernel,
            z_d,
            reg,
            scheme,
            tv_penalty_weight: DEFAULT_TV_PENALTY,
            state_options: SolverOptions::default(),
            hammerstein_tol: 1e-12,
            hammerstein_max_iter: 100,
        })
    }

    /// Instance whose target is the Hammerstein state produced by `theta_star`.
    pub fn self_target(
        mesh: &'m Mesh,
        params: ProblemParams,
        bounds: ControlBounds,
        kernel: Kernel,
        reg: Option<RegParams>,
        scheme: ControlScheme,
        theta_star: &[f64],
    ) -> Result<Self> {
        let mut inst = Self::new(mesh, params, bounds, kernel, vec![0.0; mesh.n_cells()], reg, scheme)?;
        let ev = inst.evaluate(theta_star)?;
        let z = ev
            .zstate
            .filter(|_| ev.valid)
            .ok_or_else(|| Error::Optimization(format!("target solve failed: {}", ev.message.unwrap_or_default())))?;
        inst.z_d = z.values;
        Ok(inst)
    }

    pub fn state_reg(&self) -> RegParams {
        self.reg.unwrap_or(FALLBACK_STATE_REG)
    }

    /// Clips eigenvalue parameters into `[ξ₁², ξ₂²]`; angles are left alone.
    pub fn canonical_theta(&self, theta: &[f64]) -> Vec<f64> {
        let (lo, hi) = (self.bounds.lower_eig(), self.bounds.upper_eig());
        theta
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if self.scheme == ControlScheme::ConstantRotated && i == 2 {
                    v
                } else {
                    v.clamp(lo, hi)
                }
            })
            .collect()
    }

    pub fn control(&self, theta: &[f64]) -> Result<ControlField> {
        parameterize(theta, self.scheme, self.mesh, &self.bounds)
    }

    fn tracking(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(&self.z_d)
            .zip(self.mesh.cell_volumes())
            .map(|((a, b), w)| w * (a - b) * (a - b))
            .sum()
    }

    /// Full evaluation; solver failures yield `valid = false` and a `+∞` cost.
    pub fn evaluate(&self, theta: &[f64]) -> Result<Evaluation> {
        let a = self.control(theta)?;
        let tv = tv_report(&a, self.mesh, &self.bounds);
        let penalty = self.tv_penalty_weight * (tv.tv_value - self.bounds.gamma).max(0.0).powi(2);
        let invalid = |msg: String| Evaluation {
            theta: theta.to_vec(),
            cost: f64::INFINITY,
            valid: false,
            tv_report: tv,
            state: None,
            zstate: None,
            message: Some(msg),
        };
        let ctx = PlapContext::new(self.mesh);
        let (y, rep) = match ctx.solve(&a, &self.state_reg(), &self.params, &self.state_options) {
            Ok(v) => v,
            Err(e) => return Ok(invalid(format!("state solve failed: {e}"))),
        };
        if !rep.converged {
            return Ok(invalid(format!("state solve stopped at residual {:e}", rep.final_residual)));
        }
        let y_cells = self.mesh.cell_means(y.values());
        let (z, zrep) = match solve_hammerstein(
            &y_cells,
            &self.kernel,
            self.params.p,
            self.reg.as_ref(),
            self.hammerstein_tol,
            self.hammerstein_max_iter,
        ) {
            Ok(v) => v,
            Err(e) => return Ok(invalid(format!("hammerstein solve failed: {e}"))),
        };
        if !zrep.converged {
            return Ok(invalid(format!("hammerstein solve stopped at residual {:e}", zrep.final_residual)));
        }
        let cost = self.tracking(&z.values) + penalty;
        Ok(Evaluation {
            theta: theta.to_vec(),
            cost,
            valid: cost.is_finite(),
            tv_report: tv,
            state: Some(y),
            zstate: Some(z),
            message: None,
        })
    }

    pub fn evaluate_cost(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.evaluate(theta)?.cost)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    NelderMead,
    FdProjectedGradient,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nelder-mead" => Ok(Method::NelderMead),
            "fd-projected-gradient" => Ok(Method::FdProjectedGradient),
            other => Err(Error::Config(format!("unknown optimization method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub evaluation_id: usize,
    pub theta: Vec<f64>,
    pub cost: f64,
    pub tv: f64,
    pub valid: bool,
    pub best_so_far: f64,
}

#[derive(Debug, Clone)]
pub struct OcpResult {
    pub theta_opt: Vec<f64>,
    pub cost_opt: f64,
    pub state: StateField,
    pub zstate: HammersteinState,
    pub evaluations: usize,
    pub tv_report: TvReport,
    pub trace: Vec<TraceRow>,
}

impl OcpResult {
    pub fn summary(&self) -> OcpSummary {
        OcpSummary {
            theta_opt: self.theta_opt.clone(),
            cost_opt: self.cost_opt,
            evaluations: self.evaluations,
            tv_report: self.tv_report,
            z_l2_norm: self.zstate.l2_norm,
            z_lp_norm: self.zstate.lp_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSummary {
    pub theta_opt: Vec<f64>,
    pub cost_opt: f64,
    pub evaluations: usize,
    pub tv_report: TvReport,
    pub z_l2_norm: f64,
    pub z_lp_norm: f64,
}

/// `evaluation_id,theta_0..,cost,tv,valid`.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let n = trace.first().map_or(0, |r| r.theta.len());
    let mut out = String::from("evaluation_id");
    for i in 0..n {
        out.push_str(&format!(",theta_{i}"));
    }
    out.push_str(",cost,tv,valid\n");
    for r in trace {
        out.push_str(&r.evaluation_id.to_string());
        for v in &r.theta {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push_str(&format!(",{},{},{}\n", fmt_f64(r.cost), fmt_f64(r.tv), r.valid));
    }
    out
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// Cost first, then lexicographic θ.
fn better(cost_a: f64, theta_a: &[f64], cost_b: f64, theta_b: &[f64]) -> bool {
    match cost_a.total_cmp(&cost_b) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => lex_cmp(theta_a, theta_b) == Ordering::Less,
    }
}

struct Evaluator<'a, 'm> {
    inst: &'a OcpInstance<'m>,
    budget: usize,
    trace: Vec<TraceRow>,
    cache: Vec<(Vec<u64>, f64)>,
    best: Option<Evaluation>,
    best_feasible: Option<Evaluation>,
}

impl<'a, 'm> Evaluator<'a, 'm> {
    fn exhausted(&self) -> bool {
        self.trace.len() >= self.budget
    }

    /// Returns `None` once the budget is spent.
    fn eval(&mut self, theta: &[f64]) -> Result<Option<f64>> {
        let theta = self.inst.canonical_theta(theta);
        let key: Vec<u64> = theta.iter().map(|v| v.to_bits()).collect();
        if let Some((_, c)) = self.cache.iter().find(|(k, _)| *k == key) {
            return Ok(Some(*c));
        }
        if self.exhausted() {
            return Ok(None);
        }
        let ev = self.inst.evaluate(&theta)?;
        let cost = ev.cost;
        self.cache.push((key, cost));
        if ev.valid {
            if self.best.as_ref().is_none_or(|b| better(cost, &theta, b.cost, &b.theta)) {
                self.best = Some(ev.clone());
            }
            if ev.tv_report.within_budget
                && self.best_feasible.as_ref().is_none_or(|b| better(cost, &theta, b.cost, &b.theta))
            {
                self.best_feasible = Some(ev.clone());
            }
        }
        let best_so_far = self.best.as_ref().map_or(f64::INFINITY, |b| b.cost);
        self.trace.push(TraceRow {
            evaluation_id: self.trace.len(),
            theta,
            cost,
            tv: ev.tv_report.tv_value,
            valid: ev.valid,
            best_so_far,
        });
        Ok(Some(cost))
    }
}

/// Minimizes the cost from `theta0` within `budget` fresh evaluations.
pub fn minimize(inst: &OcpInstance<'_>, theta0: &[f64], method: Method, budget: usize) -> Result<OcpResult> {
    if budget < 10 {
        return Err(Error::Config(format!("optimization budget must be >= 10 (got {budget})")));
    }
    if theta0.len() != inst.scheme.theta_len() {
        return Err(Error::Config(format!(
            "scheme {} expects {} parameters, got {}",
            inst.scheme,
            inst.scheme.theta_len(),
            theta0.len()
        )));
    }
    let mut ev = Evaluator {
        inst,
        budget,
        trace: Vec::new(),
        cache: Vec::new(),
        best: None,
        best_feasible: None,
    };
    let start = inst.canonical_theta(theta0);
    match method {
        Method::NelderMead => nelder_mead(&mut ev, &start)?,
        Method::FdProjectedGradient => projected_gradient(&mut ev, &start)?,
    }
    let evaluations = ev.trace.len();
    let trace = ev.trace;
    let best = ev.best_feasible.ok_or_else(|| {
        Error::Optimization(if ev.best.is_some() {
            "no evaluated control met the TV budget".into()
        } else {
            "every cost evaluation failed".into()
        })
    })?;
    let control = inst.control(&best.theta)?;
    let mats: Vec<_> = control.matrices().iter().map(|m| m.to_mat2()).collect();
    let proj = project_to_admissible(&mats, inst.mesh.dim(), &inst.bounds);
    if proj.field.max_abs_diff(&control) != 0.0 {
        return Err(Error::Optimization("optimal control is not admissible".into()));
    }
    Ok(OcpResult {
        theta_opt: best.theta,
        cost_opt: best.cost,
        state: best.state.expect("valid evaluation carries a state"),
        zstate: best.zstate.expect("valid evaluation carries a Hammerstein state"),
        evaluations,
        tv_report: best.tv_report,
        trace,
    })
}

fn nelder_mead(ev: &mut Evaluator<'_, '_>, start: &[f64]) -> Result<()> {
    let n = start.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let Some(c0) = ev.eval(start)? else { return Ok(()) };
    simplex.push((start.to_vec(), c0));
    for i in 0..n {
        let mut v = start.to_vec();
        let step = 0.2 * start[i].abs().max(1.0);
        v[i] += step;
        // stay inside the box so the vertex is not a clipped duplicate of the start
        if ev.inst.canonical_theta(&v) == start {
            v[i] = start[i] - step;
        }
        let v = ev.inst.canonical_theta(&v);
        let Some(c) = ev.eval(&v)? else { return Ok(()) };
        simplex.push((v, c));
    }
    let order = |s: &mut Vec<(Vec<f64>, f64)>| {
        s.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lex_cmp(&a.0, &b.0)));
    };
    loop {
        order(&mut simplex);
        let spread = simplex[n].1 - simplex[0].1;
        let diameter = simplex
            .iter()
            .skip(1)
            .map(|(v, _)| v.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if ev.exhausted() || (diameter < 1e-10 && spread.abs() < 1e-16) {
            return Ok(());
        }
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|(v, _)| v[j]).sum::<f64>() / n as f64).collect();
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> {
            ev.inst
                .canonical_theta(&centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (c - w)).collect::<Vec<_>>())
        };
        let xr = along(1.0);
        let Some(fr) = ev.eval(&xr)? else { return Ok(()) };
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let Some(fe) = ev.eval(&xe)? else { return Ok(()) };
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc_bound) = if fr < worst.1 { (along(0.5), fr) } else { (along(-0.5), worst.1) };
        let Some(fc) = ev.eval(&xc)? else { return Ok(()) };
        if fc < fc_bound {
            simplex[n] = (xc, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let v: Vec<f64> = best.iter().zip(&vertex.0).map(|(b, x)| b + 0.5 * (x - b)).collect();
            let v = ev.inst.canonical_theta(&v);
            let Some(c) = ev.eval(&v)? else { return Ok(()) };
            *vertex = (v, c);
        }
    }
}

fn projected_gradient(ev: &mut Evaluator<'_, '_>, start: &[f64]) -> Result<()> {
    let n = start.len();
    let mut x = start.to_vec();
    let Some(mut fx) = ev.eval(&x)? else { return Ok(()) };
    if !fx.is_finite() {
        return Ok(());
    }
    let mut step = 1.0;
    loop {
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let h = 1e-4 * x[i].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let Some(fp) = ev.eval(&xp)? else { return Ok(()) };
            let Some(fm) = ev.eval(&xm)? else { return Ok(()) };
            // one-sided difference on the box boundary, where the clipped side is flat
            let (xp_c, xm_c) = (ev.inst.canonical_theta(&xp), ev.inst.canonical_theta(&xm));
            let width = xp_c[i] - xm_c[i];
            grad[i] = if width > 0.0 { (fp - fm) / width } else { 0.0 };
        }
        if !grad.iter().all(|g| g.is_finite()) || grad.iter().all(|g| *g == 0.0) {
            return Ok(());
        }
        let mut accepted = false;
        while step > 1e-14 {
            let trial = ev.inst.canonical_theta(&x.iter().zip(&grad).map(|(a, g)| a - step * g).collect::<Vec<_>>());
            if trial == x {
                break;
            }
            let Some(ft) = ev.eval(&trial)? else { return Ok(()) };
            if ft < fx {
                x = trial;
                fx = ft;
                accepted = true;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Ok(());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance(mesh: &Mesh, kernel: Kernel) -> OcpInstance<'_> {
        let params = ProblemParams::constant_source(mesh, 3.0, 1.0).unwrap();
        let reg = RegParams::with_default_delta(1e-2, 4.0).unwrap();
        OcpInstance::self_target(
            mesh,
            params,
            ControlBounds::default(),
            kernel,
            Some(reg),
            ControlScheme::ConstantDiagonal,
            &[1.5, 1.5],
        )
        .unwrap()
    }

    #[test]
    fn self_target_has_zero_cost() {
        let mesh = Mesh::build(1, 16).unwrap();
        let inst = instance(&mesh, Kernel::separable_rank1(&mesh, 1.0, 3.0).unwrap());
        assert_eq!(inst.evaluate_cost(&[1.5, 1.5]).unwrap(), 0.0);
        assert!(inst.evaluate_cost(&[1.0, 1.5]).unwrap() > 0.0);
    }

    #[test]
    fn zero_kernel_cost_is_independent_of_control() {
        let mesh = Mesh::build(1, 16).unwrap();
        let params = ProblemParams::constant_source(&mesh, 3.0, 1.0).unwrap();
        let z_d: Vec<f64> = mesh.barycenters().iter().map(|b| b[0]).collect();
        let expected: f64 = z_d.iter().zip(mesh.cell_volumes()).map(|(z, w)| w * z * z).sum();
        let inst = OcpInstance::new(
            &mesh,
            params,
            ControlBounds::default(),
            Kernel::zero(&mesh),
            z_d,
            Some(RegParams::with_default_delta(1e-2, 4.0).unwrap()),
            ControlScheme::ConstantDiagonal,
        )
        .unwrap();
        for th in [[0.5, 0.5], [1.0, 2.0], [3.0, 1.0]] {
            assert!((inst.evaluate_cost(&th).unwrap() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn start_at_optimum_returns_it() {
        let mesh = Mesh::build(1, 16).unwrap();
        let inst = instance(&mesh, Kernel::separable_rank1(&mesh, 1.0, 3.0).unwrap());
        let r = minimize(&inst, &[1.5, 1.5], Method::NelderMead, 30).unwrap();
        assert_eq!(r.cost_opt, 0.0);
        assert_eq!(r.theta_opt[0], 1.5);
    }

    #[test]
    fn recovers_target_and_trace_is_monotone() {
        let mesh = Mesh::build(1, 16).unwrap();
        let inst = instance(&mesh, Kernel::gaussian(&mesh, 0.3, 3.0).unwrap());
        for method in [Method::NelderMead, Method::FdProjectedGradient] {
            let r = minimize(&inst, &[0.6, 0.6], method, 200).unwrap();
            assert!(r.cost_opt <= 1e-6, "{method:?}: {}", r.cost_opt);
            assert!(r.cost_opt <= r.trace[0].cost);
            assert!(r.trace.windows(2).all(|w| w[1].best_so_far <= w[0].best_so_far));
            assert!(r.evaluations <= 200);
            assert_eq!(inst.evaluate_cost(&r.theta_opt).unwrap(), r.cost_opt);
            assert!(r.tv_report.within_budget);
        }
    }

    #[test]
    fn ties_prefer_smaller_theta() {
        assert!(better(1.0, &[0.5, 2.0], 1.0, &[0.5, 3.0]));
        assert!(!better(1.0, &[0.6, 0.0], 1.0, &[0.5, 3.0]));
        // zero kernel: every control has the same cost
        let mesh = Mesh::build(1, 8).unwrap();
        let inst = instance(&mesh, Kernel::zero(&mesh));
        let r = minimize(&inst, &[1.0, 2.0], Method::NelderMead, 20).unwrap();
        let lex_min = r.trace.iter().map(|t| t.theta.clone()).min_by(|a, b| lex_cmp(a, b)).unwrap();
        assert_eq!(r.theta_opt, lex_min);
    }

    #[test]
    fn small_budget_and_bad_theta_rejected() {
        let mesh = Mesh::build(1, 8).unwrap();
        let inst = instance(&mesh, Kernel::zero(&mesh));
        assert!(matches!(minimize(&inst, &[1.0, 1.0], Method::NelderMead, 5), Err(Error::Config(_))));
        assert!(minimize(&inst, &[1.0], Method::NelderMead, 20).is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![TraceRow {
            evaluation_id: 0,
            theta: vec![1.0, 2.0],
            cost: 0.5,
            tv: 0.0,
            valid: true,
            best_so_far: 0.5,
        }];
        let csv = trace_csv(&rows);
        assert!(csv.starts_with("evaluation_id,theta_0,theta_1,cost,tv,valid\n0,"));
        assert!(csv.trim_end().ends_with(",true"));
    }
}
