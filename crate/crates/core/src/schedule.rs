//! Linear variance-preserving noise schedule.
//!
//! Forward time `u` runs from data (`u = 0`) to noise (`u = T`); generative
//! time is `t = T - u`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            horizon: 1.0,
        }
    }
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64, horizon: f64) -> Result<Self> {
        let s = Self {
            beta_min,
            beta_max,
            horizon,
        };
        s.validate()?;
        Ok(s)
    }

    /// Constant rate `beta` on `[0, horizon]`.
    pub fn constant(beta: f64, horizon: f64) -> Result<Self> {
        Self::new(beta, beta, horizon)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.beta_min.is_finite()
            && self.beta_max.is_finite()
            && self.horizon.is_finite()
            && self.beta_min > 0.0
            && self.beta_min <= self.beta_max
            && self.horizon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "schedule needs 0 < beta_min <= beta_max and horizon > 0, got {self:?}"
            )))
        }
    }

    /// β(u) in forward time.
    pub fn beta(&self, u: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * u / self.horizon
    }

    /// ∫₀ᵘ β.
    pub fn integrated_beta(&self, u: f64) -> f64 {
        self.beta_min * u + (self.beta_max - self.beta_min) * u * u / (2.0 * self.horizon)
    }

    /// Signal scale α(u) and noise variance σ²(u) = 1 − α².
    pub fn alpha_sigma(&self, u: f64) -> Result<(f64, f64)> {
        if !(0.0..=self.horizon).contains(&u) {
            return Err(Error::Domain {
                what: "forward time",
                value: u,
                lo: 0.0,
                hi: self.horizon,
            });
        }
        let half = 0.5 * self.integrated_beta(u);
        let alpha = (-half).exp();
        // 1 - exp(-2h) without cancellation near u = 0.
        let sigma2 = -(-2.0 * half).exp_m1();
        Ok((alpha, sigma2))
    }

    pub fn forward_time(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::Domain {
                what: "generative time",
                value: t,
                lo: 0.0,
                hi: self.horizon,
            });
        }
        Ok((self.horizon - t).max(0.0))
    }

    /// V(t)² = β(T − t) for generative time `t`.
    pub fn diffusion_sq(&self, t: f64) -> f64 {
        self.beta(self.horizon - t)
    }

    /// V(t) = √β(T − t).
    pub fn diffusion(&self, t: f64) -> f64 {
        self.diffusion_sq(t).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn alpha_sigma_at_origin() {
        let s = NoiseSchedule::default();
        let (a, s2) = s.alpha_sigma(0.0).unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(s2, 0.0);
    }

    #[test]
    fn constant_beta_closed_form() {
        let s = NoiseSchedule::constant(2.0, 1.0).unwrap();
        let (a, s2) = s.alpha_sigma(1.0).unwrap();
        assert_relative_eq!(a, (-1.0f64).exp(), max_relative = 1e-14);
        assert_relative_eq!(s2, 1.0 - (-2.0f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn default_schedule_matches_quadrature() {
        // Composite Simpson on β as an independent oracle for ∫β.
        let s = NoiseSchedule::default();
        let n = 10_000;
        let h = 1.0 / n as f64;
        let mut acc = s.beta(0.0) + s.beta(1.0);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * s.beta(k as f64 * h);
        }
        let integral = acc * h / 3.0;
        let alpha_oracle = (-0.5 * integral).exp();
        let (a, s2) = s.alpha_sigma(1.0).unwrap();
        assert_relative_eq!(a, alpha_oracle, max_relative = 1e-10);
        assert!((a - 0.006_571_586).abs() < 1e-8);
        assert!((s2 - 0.999957).abs() < 5e-7);
    }

    #[test]
    fn out_of_range_is_domain_error() {
        let s = NoiseSchedule::default();
        assert!(matches!(s.alpha_sigma(-0.1), Err(Error::Domain { .. })));
        assert!(matches!(s.alpha_sigma(1.5), Err(Error::Domain { .. })));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::new(0.0, 1.0, 1.0).is_err());
        assert!(NoiseSchedule::new(2.0, 1.0, 1.0).is_err());
        assert!(NoiseSchedule::new(0.1, 1.0, 0.0).is_err());
    }

    #[test]
    fn alpha_strictly_decreasing() {
        let s = NoiseSchedule::default();
        let mut prev = 1.0;
        for k in 1..=100 {
            let (a, s2) = s.alpha_sigma(k as f64 / 100.0).unwrap();
            assert!(a < prev);
            assert!((0.0..1.0).contains(&s2));
            prev = a;
        }
    }
}
