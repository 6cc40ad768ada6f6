//! Randomized checks of the scalar and matrix inequalities the analysis relies on.
//!
//! Every check reports a signed margin: the minimum over samples of
//! `right-hand slack`, so a case passes when `worst_violation ≥ −tolerance`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::SymMat;
use crate::io::fmt_f64;
use crate::truncation::{bracket, truncate, truncate_derivative, RegParams};

pub const DEFAULT_TOLERANCE: f64 = 1e-12;
pub const DEFAULT_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCase {
    pub name: String,
    pub sample_count: usize,
    pub tolerance: f64,
    pub worst_violation: f64,
    pub passed: bool,
}

impl PropertyCase {
    fn new(name: &str, sample_count: usize, worst_violation: f64) -> Self {
        Self {
            name: name.to_string(),
            sample_count,
            tolerance: DEFAULT_TOLERANCE,
            worst_violation,
            passed: worst_violation >= -DEFAULT_TOLERANCE,
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    [phi.cos(), phi.sin()]
}

/// Magnitude drawn from one of the three truncation regimes with equal odds.
fn regime_magnitude(rng: &mut ChaCha8Rng, k: f64) -> f64 {
    let band_top = (k * k + 1.0).sqrt();
    match rng.gen_range(0..3) {
        0 => rng.gen_range(0.0..=k),
        1 => rng.gen_range(k..=band_top),
        _ => rng.gen_range(band_top..=3.0 * k),
    }
}

/// `(c(|a|²)a − c(|b|²)b)·(a−b) − ε^{(p−2)/2}|a−b|²` with `c = (ε + F_k)^{(p−2)/2}`.
pub fn regularized_monotonicity_gap(a: [f64; 2], b: [f64; 2], reg: &RegParams, p: f64) -> f64 {
    let ca = bracket(a[0] * a[0] + a[1] * a[1], reg, p);
    let cb = bracket(b[0] * b[0] + b[1] * b[1], reg, p);
    let d = [a[0] - b[0], a[1] - b[1]];
    let lhs = (ca * a[0] - cb * b[0]) * d[0] + (ca * a[1] - cb * b[1]) * d[1];
    lhs - reg.epsilon.powf(0.5 * (p - 2.0)) * (d[0] * d[0] + d[1] * d[1])
}

pub fn check_regularized_monotonicity(p: f64, reg: &RegParams, samples: usize, rng: &mut ChaCha8Rng) -> PropertyCase {
    let mut worst = f64::INFINITY;
    for _ in 0..samples.max(1) {
        let (ra, rb) = (regime_magnitude(rng, reg.k), regime_magnitude(rng, reg.k));
        let (ua, ub) = (unit_vector(rng), unit_vector(rng));
        let a = [ra * ua[0], ra * ua[1]];
        let b = [rb * ub[0], rb * ub[1]];
        worst = worst.min(regularized_monotonicity_gap(a, b, reg, p));
    }
    PropertyCase::new("regularized_monotonicity", samples, worst)
}

/// `(|a|^{p−2}a − |b|^{p−2}b)(a−b) − 2^{2−p}|a−b|^p`.
pub fn power_monotonicity_gap(a: f64, b: f64, p: f64) -> f64 {
    let pa = a.abs().powf(p - 2.0) * a;
    let pb = b.abs().powf(p - 2.0) * b;
    (pa - pb) * (a - b) - 2f64.powf(2.0 - p) * (a - b).abs().powf(p)
}

/// Cycles through `exponents` sample by sample.
pub fn check_power_monotonicity(exponents: &[f64], samples: usize, rng: &mut ChaCha8Rng) -> PropertyCase {
    let mut worst = f64::INFINITY;
    for i in 0..samples {
        let p = exponents[i % exponents.len()];
        let a = rng.gen_range(-3.0..=3.0);
        // every fourth pair is the equality case b = −a
        let b = if i % 4 == 3 { -a } else { rng.gen_range(-3.0..=3.0) };
        worst = worst.min(power_monotonicity_gap(a, b, p));
    }
    PropertyCase::new("power_monotonicity", samples, worst)
}

/// Slack in `(ε+z²)^r ≤ 2^{r−1}(ε^r+z^{2r})` for `r ≥ 1`, `(ε+z²)^r ≤ ε^r+z^{2r}` for `0 < r < 1`.
pub fn bracket_bound_slack(eps: f64, z: f64, r: f64) -> f64 {
    let lhs = (eps + z * z).powf(r);
    let sum = eps.powf(r) + (z * z).powf(r);
    let rhs = if r >= 1.0 { 2f64.powf(r - 1.0) * sum } else { sum };
    rhs - lhs
}

pub fn check_bracket_bounds(samples: usize, rng: &mut ChaCha8Rng) -> PropertyCase {
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let eps = rng.gen_range(0.0..=1.0);
        let z = rng.gen_range(-3.0..=3.0);
        let r = rng.gen_range(0.0..=3.0f64).max(1e-3);
        worst = worst.min(bracket_bound_slack(eps, z, r));
    }
    PropertyCase::new("bracket_bounds", samples, worst)
}

/// `min(‖A‖_F − ‖A‖₂, √2‖A‖₂ − ‖A‖_F)` for a symmetric 2×2 matrix.
pub fn norm_equivalence_slack(m: &SymMat) -> f64 {
    let spec = m.spectral_norm(2);
    let frob = m.frobenius();
    (frob - spec).min(std::f64::consts::SQRT_2 * spec - frob)
}

pub fn check_norm_equivalence(samples: usize, rng: &mut ChaCha8Rng) -> PropertyCase {
    let mut worst = f64::INFINITY;
    for i in 0..samples {
        let m = if i % 5 == 4 {
            // rank one, where the lower bound is tight
            let e = [rng.gen_range(-3.0..=3.0), rng.gen_range(-3.0..=3.0)];
            SymMat::new(e[0] * e[0], e[0] * e[1], e[1] * e[1])
        } else {
            SymMat::new(rng.gen_range(-5.0..=5.0), rng.gen_range(-5.0..=5.0), rng.gen_range(-5.0..=5.0))
        };
        worst = worst.min(norm_equivalence_slack(&m));
    }
    PropertyCase::new("norm_equivalence", samples, worst)
}

const FD_STEP: f64 = 1e-7;
const FD_AGREEMENT: f64 = 1e-6;

fn truncation_slack(t: f64, reg: &RegParams) -> f64 {
    let k2 = reg.k_sq();
    let f = truncate(t, reg.k);
    let d = truncate_derivative(t, reg.k);
    let fd = (truncate(t + FD_STEP, reg.k) - truncate((t - FD_STEP).max(0.0), reg.k)) / (t + FD_STEP - (t - FD_STEP).max(0.0));
    let fd_slack = FD_AGREEMENT - (fd - d).abs();
    let shape = if t <= k2 {
        -(f - t).abs()
    } else if t >= k2 + 1.0 {
        -(f - (k2 + 1.0)).abs()
    } else {
        (f - t).min(t + reg.delta - f)
    };
    shape.min(d).min(fd_slack)
}

/// Identity below `k²`, constant above `k² + 1`, band bound, `F' ≥ 0` matching
/// central differences, and monotone on a dense sorted grid.
pub fn check_truncation_contract(reg: &RegParams, samples: usize, rng: &mut ChaCha8Rng) -> PropertyCase {
    let k2 = reg.k_sq();
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let t = rng.gen_range(0.0..=k2 + 2.0);
        worst = worst.min(truncation_slack(t, reg));
    }
    let dense = 1000;
    let mut prev = truncate(k2, reg.k);
    for i in 1..=dense {
        let t = k2 + i as f64 / dense as f64;
        worst = worst.min(truncation_slack(t, reg));
        let v = truncate(t, reg.k);
        worst = worst.min(v - prev);
        prev = v;
    }
    PropertyCase::new("truncation_contract", samples + dense, worst)
}

/// The five standard cases with 10⁴ samples each; case `i` draws from `seed + i`.
pub fn default_battery(seed: u64) -> Vec<PropertyCase> {
    let reg = RegParams::new(0.01, 2.0, 0.5).expect("battery regularization is valid");
    let rng = |i: u64| ChaCha8Rng::seed_from_u64(seed.wrapping_add(i));
    let n = DEFAULT_SAMPLES;
    vec![
        check_regularized_monotonicity(4.0, &reg, n, &mut rng(0)),
        check_power_monotonicity(&[2.5, 3.0, 4.0], n, &mut rng(1)),
        check_bracket_bounds(n, &mut rng(2)),
        check_norm_equivalence(n, &mut rng(3)),
        check_truncation_contract(&reg, n, &mut rng(4)),
    ]
}

/// `name,sample_count,tolerance,worst_violation,passed`.
pub fn battery_csv(cases: &[PropertyCase]) -> String {
    let mut out = String::from("name,sample_count,tolerance,worst_violation,passed\n");
    for c in cases {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.name,
            c.sample_count,
            fmt_f64(c.tolerance),
            fmt_f64(c.worst_violation),
            c.passed
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_vectors_and_linear_case_give_zero() {
        let reg = RegParams::new(0.01, 2.0, 0.5).unwrap();
        assert_eq!(regularized_monotonicity_gap([1.0, 2.0], [1.0, 2.0], &reg, 4.0), 0.0);
        let g = regularized_monotonicity_gap([1.0, 2.0], [-0.5, 3.0], &reg, 2.0);
        assert!(g.abs() < 1e-14);
    }

    #[test]
    fn power_equality_case() {
        assert!(power_monotonicity_gap(1.0, -1.0, 4.0).abs() < 1e-15);
        assert!(power_monotonicity_gap(0.3, -2.0, 2.0).abs() < 1e-15);
    }

    #[test]
    fn bracket_bound_tight_cases() {
        assert!(bracket_bound_slack(0.3, 0.7, 1.0).abs() < 1e-15);
        // ε = 0, r ≥ 1: z^{2r} ≤ 2^{r−1} z^{2r}
        assert!(bracket_bound_slack(0.0, 1.3, 2.0) >= 0.0);
    }

    #[test]
    fn norm_equivalence_examples() {
        let i = SymMat::identity(2);
        assert!((i.frobenius() - 2f64.sqrt()).abs() < 1e-15);
        assert!(norm_equivalence_slack(&i).abs() < 1e-15);
        let r1 = SymMat::new(4.0, 2.0, 1.0);
        assert!((r1.frobenius() - r1.spectral_norm(2)).abs() < 1e-14);
    }

    #[test]
    fn truncation_junctions() {
        let reg = RegParams::new(0.01, 2.0, 0.5).unwrap();
        assert_eq!(truncate(4.0, 2.0), 4.0);
        assert_eq!(truncate(6.0, 2.0), 5.0);
        assert!(truncation_slack(4.0, &reg) >= 0.0);
        assert!(truncation_slack(5.0, &reg) >= 0.0);
    }

    #[test]
    fn battery_passes_and_is_reproducible() {
        let a = default_battery(7);
        assert_eq!(a.len(), 5);
        for c in &a {
            assert!(c.passed, "{c:?}");
        }
        assert_eq!(battery_csv(&a), battery_csv(&default_battery(7)));
        assert_eq!(battery_csv(&a).lines().count(), 6);
    }

    #[test]
    fn detects_a_broken_inequality() {
        // with ε inflated by 10, the monotonicity lower bound no longer holds
        let reg = RegParams::new(0.01, 2.0, 0.5).unwrap();
        let wrong = RegParams { epsilon: 0.1, ..reg };
        let a = [0.05, 0.0];
        let b = [-0.05, 0.0];
        let honest = regularized_monotonicity_gap(a, b, &reg, 4.0);
        assert!(honest >= 0.0);
        let ca = bracket(0.0025, &reg, 4.0);
        let lhs = 2.0 * ca * 0.05 * 0.1;
        assert!(lhs - wrong.epsilon.powf(1.0) * 0.01 < 0.0);
    }
}
