//! Generative SDE `dX = v(X,t) dt + V(t) dW` built from the exact reverse of a
//! variance-preserving forward process applied to a Gaussian mixture.

use ndarray::Array2;
use rand::RngCore;

use crate::error::{ensure_finite, Error, Result};
use crate::gmm::{Diffused, GmmTarget};
use crate::rng;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone)]
pub struct DiffusionSpec {
    pub schedule: NoiseSchedule,
    pub target: GmmTarget,
}

impl DiffusionSpec {
    pub fn new(schedule: NoiseSchedule, target: GmmTarget) -> Result<Self> {
        schedule.validate()?;
        Ok(Self { schedule, target })
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    pub fn horizon(&self) -> f64 {
        self.schedule.horizon
    }

    /// Diffused mixture parameters at generative time `t`.
    pub fn marginal_at(&self, t: f64) -> Result<Diffused> {
        let u = self.schedule.forward_time(t)?;
        let (alpha, sigma2) = self.schedule.alpha_sigma(u)?;
        Ok(self.target.diffused(alpha, sigma2))
    }

    pub fn diffusion(&self, t: f64) -> f64 {
        self.schedule.diffusion(t)
    }

    pub fn diffusion_sq(&self, t: f64) -> f64 {
        self.schedule.diffusion_sq(t)
    }

    pub fn log_marginal(&self, x: &[f64], t: f64) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.target.log_density(x, self.marginal_at(t)?))
    }

    /// ∇ₓ log p(x, t).
    pub fn marginal_score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let at = self.marginal_at(t)?;
        let mut out = vec![0.0; x.len()];
        self.target.score_into(x, at, &mut out);
        Ok(out)
    }

    /// Base drift `v(x,t) = ½β x + β ∇log p(x,t)` with β = β(T − t); the score
    /// is written into `score` as a by-product.
    pub(crate) fn drift_and_score_into(
        &self,
        x: &[f64],
        at: Diffused,
        beta: f64,
        drift: &mut [f64],
        score: &mut [f64],
    ) {
        self.target.score_into(x, at, score);
        for ((d, xi), s) in drift.iter_mut().zip(x).zip(score.iter()) {
            *d = 0.5 * beta * xi + beta * s;
        }
    }

    pub fn base_drift(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let at = self.marginal_at(t)?;
        let beta = self.diffusion_sq(t);
        let mut drift = vec![0.0; x.len()];
        let mut score = vec![0.0; x.len()];
        self.drift_and_score_into(x, at, beta, &mut drift, &mut score);
        Ok(drift)
    }

    /// `n` i.i.d. draws from the diffused mixture at generative time `t`.
    pub fn sample_marginal<R: RngCore + ?Sized>(
        &self,
        t: f64,
        n: usize,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        let at = self.marginal_at(t)?;
        let mut out = Array2::zeros((n, self.dim()));
        for mut row in out.rows_mut() {
            let row = row.as_slice_mut().expect("standard layout");
            self.target.sample_into(at, rng, row);
        }
        Ok(out)
    }

    /// `n` i.i.d. standard normal draws (the usual diffusion initialisation).
    pub fn sample_standard_normal<R: RngCore + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let mut out = Array2::zeros((n, self.dim()));
        rng::fill_standard_normal(rng, out.as_slice_mut().expect("standard layout"));
        out
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: x.len(),
            });
        }
        ensure_finite(x, "state")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    fn standard_gaussian_spec() -> DiffusionSpec {
        let target = GmmTarget::new(vec![vec![0.0]], 1.0, vec![1.0]).unwrap();
        DiffusionSpec::new(NoiseSchedule::default(), target).unwrap()
    }

    #[test]
    fn single_gaussian_score() {
        let spec = DiffusionSpec::new(
            NoiseSchedule::default(),
            GmmTarget::new(vec![vec![0.0, 0.0]], 3.0, vec![1.0]).unwrap(),
        )
        .unwrap();
        for &t in &[0.0, 0.3, 0.9, 1.0] {
            let at = spec.marginal_at(t).unwrap();
            let x = [0.7, -1.3];
            let s = spec.marginal_score(&x, t).unwrap();
            for (si, xi) in s.iter().zip(x) {
                assert!((si + xi / at.total_var).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_gaussian_drift_is_half_beta_contraction() {
        // With s² = 1 the total variance is 1 for all t, so v = ½βx − βx = −½βx.
        let spec = standard_gaussian_spec();
        for &t in &[0.0, 0.5, 1.0] {
            let beta = spec.diffusion_sq(t);
            let v = spec.base_drift(&[2.0], t).unwrap();
            assert!((v[0] + beta).abs() < 1e-12, "t={t}: {}", v[0]);
        }
    }

    #[test]
    fn symmetric_mixture_drift_vanishes_at_origin() {
        let target =
            GmmTarget::new(vec![vec![-2.0, 1.0], vec![2.0, -1.0]], 0.5, vec![0.5, 0.5]).unwrap();
        let spec = DiffusionSpec::new(NoiseSchedule::default(), target).unwrap();
        for &t in &[0.0, 0.4, 1.0] {
            let v = spec.base_drift(&[0.0, 0.0], t).unwrap();
            assert!(v.iter().all(|c| c.abs() < 1e-12));
        }
    }

    #[test]
    fn score_orthogonal_to_symmetry_axis_at_mean() {
        // Means (±3, 0): at x = (3, 0) the score has no second-axis component.
        let target =
            GmmTarget::new(vec![vec![-3.0, 0.0], vec![3.0, 0.0]], 1.0, vec![0.5, 0.5]).unwrap();
        let spec = DiffusionSpec::new(NoiseSchedule::default(), target).unwrap();
        let s = spec.marginal_score(&[3.0, 0.0], 1.0).unwrap();
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn rejects_non_finite_and_wrong_dim() {
        let spec = standard_gaussian_spec();
        assert!(spec.marginal_score(&[f64::NAN], 0.5).is_err());
        assert!(spec.marginal_score(&[0.0, 1.0], 0.5).is_err());
        assert!(spec.marginal_score(&[0.0], 1.5).is_err());
    }

    #[test]
    fn sample_marginal_moments() {
        let target =
            GmmTarget::new(vec![vec![-4.0, 1.0], vec![2.0, 3.0]], 2.0, vec![0.25, 0.75]).unwrap();
        let spec = DiffusionSpec::new(NoiseSchedule::default(), target.clone()).unwrap();
        let n = 50_000;
        let mut rng = stream(5, Domain::Verify, 0, 0);
        let xs = spec.sample_marginal(1.0, n, &mut rng).unwrap();
        let (mean, cov) = target.moments();
        for j in 0..2 {
            let col = xs.column(j);
            let m = col.mean().unwrap();
            let se = (cov[j][j] / n as f64).sqrt();
            assert!((m - mean[j]).abs() < 4.0 * se, "coord {j}: {m} vs {}", mean[j]);
        }
        assert_eq!(spec.sample_marginal(0.5, 0, &mut rng).unwrap().nrows(), 0);
    }

    #[test]
    fn standard_case_samples_are_standard_normal() {
        let spec = standard_gaussian_spec();
        let n = 40_000;
        let mut rng = stream(9, Domain::Verify, 0, 0);
        let xs = spec.sample_marginal(0.37, n, &mut rng).unwrap();
        let col = xs.column(0);
        let m = col.mean().unwrap();
        let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        assert!(m.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
    }
}
