//! Subcommand bodies. Each returns the files to write plus its reports and
//! invariant checks; nothing here touches the filesystem.

use std::collections::BTreeMap;

use anyhow::{anyhow, Result};
use serde_json::{json, Value};

use anisopt_core::control::{tv_report, ControlScheme};
use anisopt_core::conv_lab::{run_coupled_sweep, run_state_sweep};
use anisopt_core::hammerstein::{solve_hammerstein_with, uniqueness_probe, weighted_lp, HammersteinOptions, Kernel};
use anisopt_core::inequality::{battery_csv, default_battery};
use anisopt_core::io::cell_csv;
use anisopt_core::ocp::{minimize, trace_csv, OcpInstance};
use anisopt_core::plap::{apriori_check, PlapContext, SolverOptions, StateField};
use anisopt_core::io::nodal_csv;

use crate::config::{Resolved, RunConfig, Subcommand};

/// Largest tolerated spread between Hammerstein solutions from different starts.
const PROBE_TOL: f64 = 1e-8;

pub struct Outcome {
    pub files: Vec<(String, Vec<u8>)>,
    pub reports: Value,
    pub invariants: BTreeMap<String, bool>,
    pub condition_value: Option<f64>,
}

impl Outcome {
    fn new() -> Self {
        Self {
            files: Vec::new(),
            reports: json!({}),
            invariants: BTreeMap::new(),
            condition_value: None,
        }
    }

    fn file(&mut self, name: &str, body: String) {
        self.files.push((name.to_string(), body.into_bytes()));
    }
}

fn solver_options(cfg: &RunConfig) -> SolverOptions {
    let mut opts = SolverOptions::default();
    if let Some(s) = &cfg.solver {
        opts.tol = s.tol;
        opts.max_iter = s.max_iter;
    }
    opts
}

fn hammerstein_settings(cfg: &RunConfig) -> (f64, usize, usize, bool) {
    match &cfg.hammerstein {
        Some(h) => (h.tol, h.max_iter, h.probe_starts, h.unregularized),
        None => (1e-12, 100, 3, false),
    }
}

pub fn run(sub: Subcommand, cfg: &RunConfig, r: &Resolved) -> Result<Outcome> {
    match sub {
        Subcommand::SolveState => solve_state(cfg, r),
        Subcommand::SolveHammerstein => solve_coupled(cfg, r),
        Subcommand::Optimize => optimize(cfg, r),
        Subcommand::Sweep => sweep(cfg, r),
        Subcommand::CheckInequalities => check_inequalities(cfg),
    }
}

fn state_step(cfg: &RunConfig, r: &Resolved, out: &mut Outcome) -> Result<StateField> {
    let (params, control) = (r.params.as_ref().unwrap(), r.control.as_ref().unwrap());
    let reg = r.reg.as_ref().ok_or_else(|| anyhow!("missing regularization"))?;
    let ctx = PlapContext::new(&r.mesh);
    let (y, report) = ctx.solve(control, reg, params, &solver_options(cfg))?;
    let apriori = apriori_check(&y, &report, &r.bounds, reg, params, &ctx);
    let tv = tv_report(control, &r.mesh, &r.bounds);
    out.invariants.insert("state_converged".into(), report.converged);
    out.invariants.insert("spectral_bounds".into(), control.satisfies_spectral_bounds(&r.bounds));
    out.invariants.insert("tv_within_budget".into(), tv.within_budget);
    out.invariants.insert("apriori_bound".into(), apriori.passed);
    out.invariants.insert("apriori_chain_bound".into(), apriori.chain_passed);
    out.reports["state"] = serde_json::to_value(&report)?;
    out.reports["apriori"] = serde_json::to_value(apriori)?;
    out.reports["tv"] = serde_json::to_value(tv)?;
    out.file("state.csv", nodal_csv(&r.mesh, y.values()));
    out.file("control.csv", control.to_csv());
    Ok(y)
}

fn solve_state(cfg: &RunConfig, r: &Resolved) -> Result<Outcome> {
    let mut out = Outcome::new();
    state_step(cfg, r, &mut out)?;
    Ok(out)
}

fn solve_coupled(cfg: &RunConfig, r: &Resolved) -> Result<Outcome> {
    let mut out = Outcome::new();
    let y = state_step(cfg, r, &mut out)?;
    let kernel: &Kernel = r.kernel.as_ref().unwrap();
    let p = r.params.as_ref().unwrap().p;
    let (tol, max_iter, starts, unregularized) = hammerstein_settings(cfg);
    let reg = if unregularized { None } else { r.reg.as_ref() };
    let y_cells = r.mesh.cell_means(y.values());
    let (z, report) = solve_hammerstein_with(
        &y_cells,
        kernel,
        p,
        reg,
        &HammersteinOptions {
            tol,
            max_iter,
            ..Default::default()
        },
    )?;
    let w = r.mesh.cell_volumes();
    // regularized solutions are bounded in L², unregularized ones in L^p
    let bounded = match reg {
        Some(_) => z.l2_norm <= weighted_lp(&y_cells, w, 2.0) + 10.0 * tol,
        None => z.lp_norm <= weighted_lp(&y_cells, w, p) + 10.0 * tol,
    };
    out.invariants.insert("hammerstein_converged".into(), report.converged);
    out.invariants.insert("hammerstein_bounded_by_state".into(), bounded);
    if starts >= 2 {
        let spread = uniqueness_probe(&y_cells, kernel, p, reg, starts, cfg.seed, tol)?;
        out.invariants.insert("hammerstein_unique".into(), spread <= PROBE_TOL);
        out.reports["uniqueness_spread"] = json!(spread);
    }
    out.reports["hammerstein"] = serde_json::to_value(report)?;
    out.reports["z_l2_norm"] = json!(z.l2_norm);
    out.reports["z_lp_norm"] = json!(z.lp_norm);
    out.condition_value = Some(kernel.condition_value);
    out.file("z.csv", cell_csv(&r.mesh, &z.values));
    Ok(out)
}

fn ocp_instance<'m>(cfg: &RunConfig, r: &'m Resolved) -> Result<OcpInstance<'m>> {
    let oc = cfg.optimize.as_ref().unwrap();
    let scheme: ControlScheme = cfg.control.as_ref().unwrap().scheme.parse()?;
    let params = r.params.clone().unwrap();
    let kernel = r.kernel.clone().unwrap();
    let (tol, max_iter, _, _) = hammerstein_settings(cfg);
    let mut inst = OcpInstance::new(&r.mesh, params, r.bounds, kernel, vec![0.0; r.mesh.n_cells()], r.reg, scheme)?;
    inst.tv_penalty_weight = oc.tv_penalty_weight;
    inst.state_options = solver_options(cfg);
    inst.hammerstein_tol = tol;
    inst.hammerstein_max_iter = max_iter;
    if let Some(target) = &oc.target_theta {
        let ev = inst.evaluate(target)?;
        let z = ev
            .zstate
            .filter(|_| ev.valid)
            .ok_or_else(|| anyhow!("target solve failed: {}", ev.message.unwrap_or_default()))?;
        inst.z_d = z.values;
    }
    Ok(inst)
}

fn optimize(cfg: &RunConfig, r: &Resolved) -> Result<Outcome> {
    let mut out = Outcome::new();
    let oc = cfg.optimize.as_ref().unwrap();
    let inst = ocp_instance(cfg, r)?;
    let res = minimize(&inst, &oc.theta0, r.method.unwrap(), oc.budget)?;
    let control = inst.control(&res.theta_opt)?;
    out.invariants.insert("cost_finite".into(), res.cost_opt.is_finite());
    out.invariants.insert("tv_within_budget".into(), res.tv_report.within_budget);
    out.invariants.insert("spectral_bounds".into(), control.satisfies_spectral_bounds(&r.bounds));
    out.invariants.insert("budget_respected".into(), res.evaluations <= oc.budget);
    out.reports["optimize"] = serde_json::to_value(res.summary())?;
    out.condition_value = Some(inst.kernel.condition_value);
    out.file("trace.csv", trace_csv(&res.trace));
    out.file("state.csv", nodal_csv(&r.mesh, res.state.values()));
    out.file("z.csv", cell_csv(&r.mesh, &res.zstate.values));
    out.file("control.csv", control.to_csv());
    Ok(out)
}

fn sweep(cfg: &RunConfig, r: &Resolved) -> Result<Outcome> {
    let mut out = Outcome::new();
    let (params, control) = (r.params.as_ref().unwrap(), r.control.as_ref().unwrap());
    let schedule = r.schedule.as_ref().unwrap();
    let coupled = cfg.sweep.as_ref().is_some_and(|s| s.kind == "coupled");
    let manifest = if coupled {
        let kernel = r.kernel.as_ref().unwrap();
        out.condition_value = Some(kernel.condition_value);
        run_coupled_sweep(control, schedule, params, &r.bounds, kernel, &r.mesh, None)?
    } else {
        run_state_sweep(control, schedule, params, &r.bounds, &r.mesh)?
    };
    out.invariants.insert("sweep_completed".into(), manifest.completed());
    out.invariants.insert("exceedance_measures".into(), manifest.measures_ok());
    out.invariants.insert("h1_within_chain".into(), manifest.h1_within_chain());
    if let Some(l) = &manifest.limit_bound {
        out.invariants.insert("limit_bound".into(), l.passed);
    }
    if coupled && manifest.completed() {
        out.invariants.insert("z_trend".into(), manifest.z_trend_ok());
    }
    out.reports["y_trend_non_increasing"] = json!(manifest.y_trend_ok());
    out.reports["sweep_steps"] = json!(manifest.records.len());
    out.file("sweep.csv", manifest.to_csv());
    out.file("sweep.json", serde_json::to_string_pretty(&manifest)? + "\n");
    Ok(out)
}

fn check_inequalities(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::new();
    let cases = default_battery(cfg.seed);
    for c in &cases {
        out.invariants.insert(c.name.clone(), c.passed);
    }
    out.reports["inequalities"] = serde_json::to_value(&cases)?;
    out.file("inequalities.csv", battery_csv(&cases));
    Ok(out)
}
