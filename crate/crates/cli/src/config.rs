//! Run configuration: a TOML file merged with `--set key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use anisopt_core::control::{parameterize, ControlBounds, ControlField, ControlScheme};
use anisopt_core::conv_lab::SweepSchedule;
use anisopt_core::hammerstein::{Kernel, KernelId};
use anisopt_core::mesh::Mesh;
use anisopt_core::ocp::Method;
use anisopt_core::plap::{validate_exponent, ProblemParams};
use anisopt_core::truncation::RegParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    SolveState,
    SolveHammerstein,
    Optimize,
    Sweep,
    CheckInequalities,
}

impl Subcommand {
    pub fn id(self) -> &'static str {
        match self {
            Subcommand::SolveState => "solve-state",
            Subcommand::SolveHammerstein => "solve-hammerstein",
            Subcommand::Optimize => "optimize",
            Subcommand::Sweep => "sweep",
            Subcommand::CheckInequalities => "check-inequalities",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub subcommand: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub mesh: Option<MeshConfig>,
    pub problem: Option<ProblemConfig>,
    pub control: Option<ControlConfig>,
    #[serde(default)]
    pub bounds: BoundsConfig,
    pub regularization: Option<RegConfig>,
    pub solver: Option<SolverConfig>,
    pub schedule: Option<ScheduleConfig>,
    pub kernel: Option<KernelConfig>,
    pub hammerstein: Option<HammersteinConfig>,
    pub optimize: Option<OptimizeConfig>,
    pub sweep: Option<SweepConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub dim: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub p: f64,
    /// Constant source term `f`.
    #[serde(default = "one")]
    pub source: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    /// `identity` or a parameterization scheme id.
    pub scheme: String,
    #[serde(default)]
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub xi1: f64,
    pub xi2: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        let b = ControlBounds::default();
        Self {
            xi1: b.xi1,
            xi2: b.xi2,
            alpha: b.alpha,
            gamma: b.gamma,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegConfig {
    pub epsilon: f64,
    pub k: f64,
    #[serde(default = "half")]
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "solver_tol")]
    pub tol: f64,
    #[serde(default = "solver_max_iter")]
    pub max_iter: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epsilon: Vec<f64>,
    pub k: Vec<f64>,
    #[serde(default = "half")]
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub id: String,
    /// Scale; for `gaussian` it defaults to the value giving `C₁ = 1`.
    pub c: Option<f64>,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HammersteinConfig {
    #[serde(default = "hammerstein_tol")]
    pub tol: f64,
    #[serde(default = "hammerstein_max_iter")]
    pub max_iter: usize,
    #[serde(default = "probe_starts")]
    pub probe_starts: usize,
    /// Solve the unregularized power form even when a regularization block is present.
    #[serde(default)]
    pub unregularized: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeConfig {
    #[serde(default = "nelder_mead")]
    pub method: String,
    #[serde(default = "budget")]
    pub budget: usize,
    pub theta0: Vec<f64>,
    /// Target `z_d` is the Hammerstein state of this control; `z_d ≡ 0` when absent.
    pub target_theta: Option<Vec<f64>>,
    #[serde(default = "tv_penalty")]
    pub tv_penalty_weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// `state` or `coupled`.
    #[serde(default = "state_kind")]
    pub kind: String,
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn solver_tol() -> f64 {
    1e-10
}
fn solver_max_iter() -> usize {
    500
}
fn hammerstein_tol() -> f64 {
    1e-12
}
fn hammerstein_max_iter() -> usize {
    100
}
fn probe_starts() -> usize {
    3
}
fn nelder_mead() -> String {
    "nelder-mead".into()
}
fn budget() -> usize {
    200
}
fn tv_penalty() -> f64 {
    1e3
}
fn state_kind() -> String {
    "state".into()
}

/// Reads the file (if any), applies overrides in order, and returns the merged table.
pub fn load_table(path: Option<&Path>, overrides: &[String]) -> Result<Table> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            text.parse::<Table>()
                .map_err(|e| anyhow!("config parse error in {}: {}", p.display(), e.to_string().trim_end()))?
        }
        None => Table::new(),
    };
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    Ok(table)
}

fn apply_override(table: &mut Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| anyhow!("override '{item}' is not of the form key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override key '{key}' is malformed");
    }
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let mut cur = table;
    for seg in &path[..path.len() - 1] {
        let entry = cur.entry(seg.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override '{key}': '{seg}' is not a table"))?;
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

pub fn parse_config(table: &Table) -> Result<RunConfig> {
    RunConfig::deserialize(table.clone()).map_err(|e| anyhow!("configuration error: {}", e.to_string().trim_end()))
}

/// SHA-256 over `blob <len>\0<canonical TOML>`.
pub fn content_hash(table: &Table) -> Result<String> {
    let body = toml::to_string(table)?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(body.as_bytes());
    Ok(hex::encode(h.finalize()))
}

fn required<'a, T>(block: &'a Option<T>, key: &str, sub: Subcommand) -> Result<&'a T> {
    block
        .as_ref()
        .ok_or_else(|| anyhow!("configuration error: missing required key `{key}` for {}", sub.id()))
}

/// Fully validated inputs for one subcommand.
#[derive(Debug)]
pub struct Resolved {
    pub mesh: Mesh,
    pub params: Option<ProblemParams>,
    pub bounds: ControlBounds,
    pub control: Option<ControlField>,
    pub reg: Option<RegParams>,
    pub schedule: Option<SweepSchedule>,
    pub kernel: Option<Kernel>,
    pub method: Option<Method>,
}

impl RunConfig {
    pub fn validate(&self, sub: Subcommand) -> Result<Resolved> {
        if let Some(s) = &self.subcommand {
            if s != sub.id() {
                bail!("configuration error: config names subcommand `{s}` but `{}` was invoked", sub.id());
            }
        }
        let b = &self.bounds;
        let bounds = ControlBounds::new(b.xi1, b.xi2, b.alpha, b.gamma)?;
        if sub == Subcommand::CheckInequalities {
            return Ok(Resolved {
                mesh: Mesh::build(1, 2)?,
                params: None,
                bounds,
                control: None,
                reg: None,
                schedule: None,
                kernel: None,
                method: None,
            });
        }
        let mc = required(&self.mesh, "mesh", sub)?;
        let pc = required(&self.problem, "problem", sub)?;
        validate_exponent(pc.p)?;
        let mesh = Mesh::build(mc.dim, mc.n)?;
        let params = ProblemParams::constant_source(&mesh, pc.p, pc.source)?;
        let control = match &self.control {
            None => ControlField::identity(&mesh),
            Some(c) if c.scheme == "identity" => ControlField::identity(&mesh),
            Some(c) => {
                let scheme: ControlScheme = c.scheme.parse()?;
                let theta = match (&self.optimize, sub) {
                    (Some(o), Subcommand::Optimize) if c.theta.is_empty() => &o.theta0,
                    _ => &c.theta,
                };
                if theta.len() != scheme.theta_len() {
                    bail!("validation error: control.theta needs {} entries for {}", scheme.theta_len(), scheme);
                }
                parameterize(theta, scheme, &mesh, &bounds)?
            }
        };
        let reg = match &self.regularization {
            Some(r) => Some(RegParams::new(r.epsilon, r.k, r.delta)?),
            None => None,
        };
        let needs_reg = matches!(sub, Subcommand::SolveState | Subcommand::SolveHammerstein);
        if needs_reg && reg.is_none() {
            required(&self.regularization, "regularization", sub)?;
        }
        let kernel = match &self.kernel {
            Some(k) => Some(build_kernel(k, &mesh, pc.p)?),
            None => None,
        };
        if matches!(sub, Subcommand::SolveHammerstein | Subcommand::Optimize) && kernel.is_none() {
            required(&self.kernel, "kernel", sub)?;
        }
        let schedule = match &self.schedule {
            Some(s) => {
                if s.epsilon.len() != s.k.len() {
                    bail!("validation error: schedule.epsilon and schedule.k differ in length");
                }
                let pairs: Vec<(f64, f64)> = s.epsilon.iter().copied().zip(s.k.iter().copied()).collect();
                Some(SweepSchedule::from_pairs(&pairs, s.delta)?)
            }
            None if sub == Subcommand::Sweep => Some(SweepSchedule::default()),
            None => None,
        };
        let mut method = None;
        if sub == Subcommand::Optimize {
            let oc = required(&self.optimize, "optimize", sub)?;
            method = Some(oc.method.parse::<Method>()?);
            let scheme = self
                .control
                .as_ref()
                .filter(|c| c.scheme != "identity")
                .ok_or_else(|| anyhow!("configuration error: missing required key `control.scheme` (a parameterization) for optimize"))?;
            let scheme: ControlScheme = scheme.scheme.parse()?;
            if oc.theta0.len() != scheme.theta_len() {
                bail!("validation error: optimize.theta0 needs {} entries for {}", scheme.theta_len(), scheme);
            }
            if oc.budget < 10 {
                bail!("validation error: optimize.budget must be >= 10");
            }
            if !(oc.tv_penalty_weight >= 0.0) {
                bail!("validation error: optimize.tv_penalty_weight must be >= 0");
            }
        }
        if sub == Subcommand::Sweep {
            let kind = self.sweep.as_ref().map_or("state", |s| s.kind.as_str());
            match kind {
                "state" => {}
                "coupled" => {
                    if kernel.is_none() {
                        required(&self.kernel, "kernel", sub)?;
                    }
                }
                other => bail!("configuration error: unknown sweep.kind `{other}`"),
            }
        }
        if let Some(h) = &self.hammerstein {
            if !(h.tol > 0.0) || h.max_iter == 0 || h.probe_starts == 1 {
                bail!("validation error: hammerstein needs tol > 0, max_iter >= 1 and probe_starts 0 or >= 2");
            }
        }
        if let Some(s) = &self.solver {
            if !(s.tol > 0.0) || s.max_iter == 0 {
                bail!("validation error: solver needs tol > 0 and max_iter >= 1");
            }
        }
        Ok(Resolved {
            mesh,
            params: Some(params),
            bounds,
            control: Some(control),
            reg,
            schedule,
            kernel,
            method,
        })
    }
}

fn build_kernel(k: &KernelConfig, mesh: &Mesh, p: f64) -> Result<Kernel> {
    let id: KernelId = k.id.parse()?;
    Ok(match id {
        KernelId::Zero => Kernel::zero(mesh),
        KernelId::SeparableRank1 => {
            let c = k.c.ok_or_else(|| anyhow!("configuration error: missing required key `kernel.c`"))?;
            Kernel::separable_rank1(mesh, c, p)?
        }
        KernelId::Gaussian => {
            let sigma = k.sigma.ok_or_else(|| anyhow!("configuration error: missing required key `kernel.sigma`"))?;
            match k.c {
                Some(c) => Kernel::gaussian_with_scale(mesh, c, sigma, p)?,
                None => Kernel::gaussian(mesh, sigma, p)?,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[mesh]
dim = 1
n = 32

[problem]
p = 4.0
source = 1.0

[control]
scheme = "identity"

[regularization]
epsilon = 1e-3
k = 8.0
"#;

    fn table(text: &str) -> Result<Table> {
        Ok(text.parse::<Table>()?)
    }

    #[test]
    fn minimal_solve_state_config_is_valid() {
        let cfg = parse_config(&table(MINIMAL).unwrap()).unwrap();
        let r = cfg.validate(Subcommand::SolveState).unwrap();
        assert_eq!(r.mesh.n_cells(), 32);
        assert_eq!(r.reg.unwrap().k, 8.0);
    }

    #[test]
    fn low_exponent_cites_the_range() {
        let mut t = table(MINIMAL).unwrap();
        apply_override(&mut t, "problem.p=1.5").unwrap();
        let err = parse_config(&t).unwrap().validate(Subcommand::SolveState).unwrap_err();
        assert!(err.to_string().contains("2 ≤ p < ∞"), "{err}");
    }

    #[test]
    fn duplicate_key_reports_line() {
        let text = "[problem]\np = 3.0\np = 4.0\n";
        let err = text.parse::<Table>().unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn missing_and_unknown_keys() {
        let err = parse_config(&table("[problem]\nsource = 1.0\n").unwrap()).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
        let err = parse_config(&table("[mesh]\ndim = 1\nn = 4\nsize = 3\n").unwrap()).unwrap_err();
        assert!(err.to_string().contains("size"), "{err}");
        let cfg = parse_config(&table("[problem]\np = 3.0\n").unwrap()).unwrap();
        let err = cfg.validate(Subcommand::SolveState).err().unwrap();
        assert!(err.to_string().contains("`mesh`"), "{err}");
    }

    #[test]
    fn overrides_create_and_replace() {
        let mut t = table(MINIMAL).unwrap();
        apply_override(&mut t, "kernel.id=gaussian").unwrap();
        apply_override(&mut t, "kernel.sigma=0.2").unwrap();
        apply_override(&mut t, "mesh.n=8").unwrap();
        let cfg = parse_config(&t).unwrap();
        assert_eq!(cfg.mesh.as_ref().unwrap().n, 8);
        assert_eq!(cfg.kernel.as_ref().unwrap().id, "gaussian");
        assert!(apply_override(&mut t, "novalue").is_err());
    }

    #[test]
    fn hash_is_stable_under_key_order() {
        let a = table("seed = 1\n[mesh]\ndim = 1\nn = 4\n").unwrap();
        let b = table("[mesh]\nn = 4\ndim = 1\n\n[x]\n").unwrap();
        let mut b = b;
        b.remove("x");
        b.insert("seed".into(), Value::Integer(1));
        assert_eq!(content_hash(&a).unwrap(), content_hash(&b).unwrap());
    }
}
