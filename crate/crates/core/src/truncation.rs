//! The (ε, k) regularization: truncation `F_k` and the bracket `(ε + F_k(t))^{(p−2)/2}`.
//!
//! `F_k` is the identity on `[0, k²]`, the constant `k² + 1` above `k² + 1`, and
//! on the band in between the cubic Hermite interpolant with end slopes 1 and 0:
//! with `s = t − k²`, `F_k(t) = k² + s + s² − s³`. The overshoot `s²(1 − s)` peaks
//! at `s = 2/3` with value `4/27`, so any `δ ≥ 4/27` satisfies the band bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `sup_{t in band} (F_k(t) − t)` for the Hermite transition.
pub const HERMITE_OVERSHOOT: f64 = 4.0 / 27.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegParams {
    pub epsilon: f64,
    pub k: f64,
    pub delta: f64,
}

impl RegParams {
    pub fn new(epsilon: f64, k: f64, delta: f64) -> Result<Self> {
        let r = Self { epsilon, k, delta };
        r.validate()?;
        Ok(r)
    }

    /// `δ = 1/2`.
    pub fn with_default_delta(epsilon: f64, k: f64) -> Result<Self> {
        Self::new(epsilon, k, 0.5)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Validation(format!("epsilon must be > 0 (got {})", self.epsilon)));
        }
        if !(self.k >= 1.0 && self.k.is_finite()) {
            return Err(Error::Validation(format!("k must be >= 1 (got {})", self.k)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Validation(format!("delta must lie in (0,1) (got {})", self.delta)));
        }
        let overshoot = sampled_overshoot(self.k, 2001);
        if overshoot > self.delta {
            return Err(Error::Validation(format!(
                "delta = {} is below the transition overshoot {:.6}",
                self.delta, overshoot
            )));
        }
        Ok(())
    }

    pub fn k_sq(&self) -> f64 {
        self.k * self.k
    }
}

fn sampled_overshoot(k: f64, samples: usize) -> f64 {
    let k2 = k * k;
    (0..=samples)
        .map(|i| {
            let t = k2 + i as f64 / samples as f64;
            truncate(t, k) - t
        })
        .fold(0.0, f64::max)
}

/// `F_k(t)`; checked version of [`truncate`].
pub fn truncation(t: f64, reg: &RegParams) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("truncation argument must be >= 0 (got {t})")));
    }
    Ok(truncate(t, reg.k))
}

/// `F_k(t)` for `t ≥ 0`.
#[inline]
pub fn truncate(t: f64, k: f64) -> f64 {
    let k2 = k * k;
    if t <= k2 {
        t
    } else if t >= k2 + 1.0 {
        k2 + 1.0
    } else {
        let s = t - k2;
        k2 + s + s * s - s * s * s
    }
}

/// `F_k'(t)`.
#[inline]
pub fn truncate_derivative(t: f64, k: f64) -> f64 {
    let k2 = k * k;
    if t <= k2 {
        1.0
    } else if t >= k2 + 1.0 {
        0.0
    } else {
        let s = t - k2;
        (1.0 - s) * (3.0 * s + 1.0)
    }
}

/// `(ε + F_k(t))^{(p−2)/2}`.
#[inline]
pub fn bracket(t: f64, reg: &RegParams, p: f64) -> f64 {
    if p == 2.0 {
        return 1.0;
    }
    (reg.epsilon + truncate(t, reg.k)).powf(0.5 * (p - 2.0))
}

/// Derivative of [`bracket`] in `t`.
#[inline]
pub fn bracket_derivative(t: f64, reg: &RegParams, p: f64) -> f64 {
    if p == 2.0 {
        return 0.0;
    }
    let r = 0.5 * (p - 2.0);
    let d = truncate_derivative(t, reg.k);
    if d == 0.0 {
        return 0.0;
    }
    r * (reg.epsilon + truncate(t, reg.k)).powf(r - 1.0) * d
}

const GAUSS5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

/// `∫₀ᵗ (ε + F_k(s))^{(p−2)/2} ds`, the potential whose derivative is the bracket.
pub fn bracket_integral(t: f64, reg: &RegParams, p: f64) -> f64 {
    if p == 2.0 {
        return t;
    }
    let r = 0.5 * (p - 2.0);
    let eps = reg.epsilon;
    let k2 = reg.k_sq();
    let power_part = |u: f64| ((eps + u).powf(r + 1.0) - eps.powf(r + 1.0)) / (r + 1.0);
    if t <= k2 {
        return power_part(t);
    }
    let band_end = t.min(k2 + 1.0);
    let pieces = 8;
    let width = (band_end - k2) / pieces as f64;
    let mut band = 0.0;
    for i in 0..pieces {
        let mid = k2 + (i as f64 + 0.5) * width;
        for (x, w) in GAUSS5 {
            band += w * 0.5 * width * bracket(mid + 0.5 * width * x, reg, p);
        }
    }
    let tail = if t > k2 + 1.0 {
        (eps + k2 + 1.0).powf(r) * (t - k2 - 1.0)
    } else {
        0.0
    };
    power_part(k2) + band + tail
}

/// Regularized scalar power `(ε + F_k(v²))^{(p−2)/2} v`.
#[inline]
pub fn regularized_power(v: f64, reg: &RegParams, p: f64) -> f64 {
    bracket(v * v, reg, p) * v
}

/// `|v|^{p−2} v`.
#[inline]
pub fn signed_power(v: f64, p: f64) -> f64 {
    if p == 2.0 {
        v
    } else {
        v.abs().powf(p - 2.0) * v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg(k: f64) -> RegParams {
        RegParams::new(0.01, k, 0.5).unwrap()
    }

    #[test]
    fn identity_and_cap() {
        let r = reg(1.0);
        assert_eq!(truncation(0.5, &r).unwrap(), 0.5);
        assert_eq!(truncation(5.0, &r).unwrap(), 2.0);
        assert_eq!(truncation(1.0, &r).unwrap(), 1.0);
        assert_eq!(truncation(3.0 + 2.0, &reg(2.0)).unwrap(), 5.0);
    }

    #[test]
    fn negative_argument_is_domain_error() {
        assert!(matches!(truncation(-1e-3, &reg(1.0)), Err(Error::Domain(_))));
        assert!(matches!(truncation(f64::NAN, &reg(1.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn band_is_monotone_and_within_delta() {
        let r = reg(1.0);
        let mut prev = truncate(1.0, 1.0);
        for i in 1..=10_000 {
            let t = 1.0 + i as f64 / 10_000.0;
            let v = truncate(t, 1.0);
            assert!(v >= prev - 1e-15);
            assert!(t - 1e-15 <= v && v <= t + r.delta);
            let d = truncate_derivative(t, 1.0);
            // mean slope over the band is 1 and the right end slope is 0, so the peak is 4/3
            assert!((0.0..=4.0 / 3.0 + 1e-15).contains(&d));
            prev = v;
        }
        let v = truncate(1.5, 1.0);
        assert!((1.5..=1.5 + r.delta).contains(&v));
    }

    #[test]
    fn overshoot_is_four_27ths() {
        let sampled = sampled_overshoot(3.0, 300_000);
        assert!((sampled - HERMITE_OVERSHOOT).abs() < 1e-9);
        assert!(RegParams::new(0.1, 2.0, 0.1).is_err());
        assert!(RegParams::new(0.1, 2.0, 0.15).is_ok());
    }

    #[test]
    fn c1_junctions() {
        for k in [1.0, 2.0, 5.0] {
            let k2: f64 = k * k;
            let h = 1e-7;
            let left = (truncate(k2, k) - truncate(k2 - h, k)) / h;
            let right = (truncate(k2 + h, k) - truncate(k2, k)) / h;
            assert!((left - right).abs() < 1e-5);
            let left = (truncate(k2 + 1.0, k) - truncate(k2 + 1.0 - h, k)) / h;
            assert!(left.abs() < 1e-5);
        }
    }

    #[test]
    fn param_validation() {
        assert!(RegParams::new(0.0, 2.0, 0.5).is_err());
        assert!(RegParams::new(0.1, 0.5, 0.5).is_err());
        assert!(RegParams::new(0.1, 2.0, 1.0).is_err());
    }

    #[test]
    fn bracket_integral_matches_quadrature() {
        let r = RegParams::new(0.05, 1.5, 0.5).unwrap();
        for p in [2.0, 3.0, 4.0, 5.5] {
            for t in [0.3, 2.25, 2.6, 3.0, 3.25, 7.0] {
                // fine composite midpoint oracle
                let n = 200_000;
                let h = t / n as f64;
                let oracle: f64 = (0..n).map(|i| bracket((i as f64 + 0.5) * h, &r, p) * h).sum();
                let got = bracket_integral(t, &r, p);
                assert!((got - oracle).abs() < 1e-8 * (1.0 + oracle.abs()), "p={p} t={t}: {got} vs {oracle}");
            }
        }
    }

    #[test]
    fn bracket_derivative_matches_finite_differences() {
        let r = RegParams::new(0.05, 1.5, 0.5).unwrap();
        for p in [3.0, 4.0] {
            for t in [0.5, 2.4, 2.9, 3.2, 5.0] {
                let h = 1e-6;
                let fd = (bracket(t + h, &r, p) - bracket(t - h, &r, p)) / (2.0 * h);
                assert!((fd - bracket_derivative(t, &r, p)).abs() < 1e-6);
            }
        }
    }
}
