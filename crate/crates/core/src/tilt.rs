//! Closed-form reward-tilted posterior of an isotropic mixture under a
//! quadratic reward.
//!
//! For `p = Σ_i w_i N(μ_i, s² I)` and `r(x) = −½ (x−μ_r)ᵀ P (x−μ_r)` the
//! product `p e^r` is again a mixture with shared covariance
//! `Σ̃ = (P + I/s²)⁻¹`, means `μ̃_i = Σ̃ (μ_i/s² + P μ_r)` and weights
//! `w̃_i ∝ w_i N(μ_i; μ_r, P⁻¹ + s² I)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::Array2;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::gmm::{pick_component, GmmTarget};
use crate::reward::QuadraticReward;
use crate::rng;

#[derive(Debug, Clone)]
pub struct TiltedGmm {
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    lower: DMatrix<f64>,
    means: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

impl TiltedGmm {
    pub fn new(cov: DMatrix<f64>, means: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("tilted component covariance"))?;
        let total: f64 = weights.iter().sum();
        if means.len() != weights.len() || (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidParameter(
                "tilted weights must match components and sum to 1".into(),
            ));
        }
        let lower = chol.l();
        Ok(Self {
            cov,
            chol,
            lower,
            means,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mixture mean and covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let mut mean = DVector::zeros(d);
        for (m, w) in self.means.iter().zip(&self.weights) {
            mean.axpy(*w, m, 1.0);
        }
        let mut cov = self.cov.clone();
        for (m, w) in self.means.iter().zip(&self.weights) {
            let c = m - &mean;
            cov.ger(*w, &c, &c, 1.0);
        }
        // Exact symmetry for downstream eigen/Frobenius work.
        let cov = (&cov + cov.transpose()) * 0.5;
        (mean, cov)
    }

    pub fn sample_into<R: RngCore + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let k = pick_component(&self.weights, rng::uniform01(rng));
        let mut z = vec![0.0; self.dim()];
        rng::fill_standard_normal(rng, &mut z);
        for i in 0..self.dim() {
            let mut acc = self.means[k][i];
            for j in 0..=i {
                acc += self.lower[(i, j)] * z[j];
            }
            out[i] = acc;
        }
    }

    pub fn sample<R: RngCore + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let mut out = Array2::zeros((n, self.dim()));
        for mut row in out.rows_mut() {
            self.sample_into(rng, row.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Density of the tilted mixture (normalized).
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let log_det: f64 = 2.0 * self.lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        let logs: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| {
                let diff = DVector::from_column_slice(x) - m;
                let sol = self.chol.solve(&diff);
                w.ln() + norm - 0.5 * diff.dot(&sol)
            })
            .collect();
        crate::weights::log_sum_exp(&logs)
    }
}

/// Tilt `target` by `reward`.
pub fn tilt_posterior(target: &GmmTarget, reward: &QuadraticReward) -> Result<TiltedGmm> {
    let d = target.dim();
    if reward.dim() != d {
        return Err(Error::Dimension {
            expected: d,
            found: reward.dim(),
        });
    }
    let s2 = target.variance();
    let p = reward.prec();
    let eye = DMatrix::<f64>::identity(d, d);

    let cov_inv = p + &eye * (1.0 / s2);
    let cov_inv_chol = cov_inv
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("tilted precision"))?;
    let cov = cov_inv_chol.inverse();
    let cov = (&cov + cov.transpose()) * 0.5;

    // (P⁻¹ + s² I)⁻¹ = P (I + s² P)⁻¹, which never inverts P itself.
    let shifted = &eye + p * s2;
    let shifted_chol = shifted
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("reward plus component covariance"))?;

    let p_mu = p * reward.mu();
    let mut means = Vec::with_capacity(target.components());
    let mut logw = Vec::with_capacity(target.components());
    for (mu, w) in target.means().iter().zip(target.weights()) {
        let mu = DVector::from_column_slice(mu);
        let rhs = &mu * (1.0 / s2) + &p_mu;
        means.push(cov_inv_chol.solve(&rhs));
        let diff = &mu - reward.mu();
        // P (I + s² P)⁻¹ diff; P and (I + s²P) commute.
        let q = p * shifted_chol.solve(&diff);
        logw.push(w.ln() - 0.5 * diff.dot(&q));
    }
    let lse = crate::weights::log_sum_exp(&logw);
    let weights = logw.iter().map(|l| (l - lse).exp()).collect();
    TiltedGmm::new(cov, means, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_case() {
        let target = GmmTarget::new(vec![vec![0.0]], 1.0, vec![1.0]).unwrap();
        let reward = QuadraticReward::isotropic(vec![0.0], 1.0).unwrap();
        let tg = tilt_posterior(&target, &reward).unwrap();
        assert!((tg.cov()[(0, 0)] - 0.5).abs() < 1e-14);
        assert!(tg.means()[0][0].abs() < 1e-14);
        assert_eq!(tg.weights(), &[1.0]);
    }

    #[test]
    fn vanishing_reward_recovers_target() {
        let target = GmmTarget::new(
            vec![vec![-3.0, 1.0], vec![2.0, 2.0], vec![0.5, -4.0]],
            2.5,
            vec![0.2, 0.3, 0.5],
        )
        .unwrap();
        let reward = QuadraticReward::isotropic(vec![1.0, 1.0], 1e-10).unwrap();
        let tg = tilt_posterior(&target, &reward).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 2.5 } else { 0.0 };
                assert!((tg.cov()[(i, j)] - want).abs() < 1e-6);
            }
        }
        for (k, m) in tg.means().iter().enumerate() {
            for j in 0..2 {
                assert!((m[j] - target.means()[k][j]).abs() < 1e-6);
            }
            assert!((tg.weights()[k] - target.weights()[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn tilting_never_inflates_covariance() {
        let target = GmmTarget::new(vec![vec![0.0; 3]], 4.0, vec![1.0]).unwrap();
        let p = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 0.5]);
        let reward = QuadraticReward::new(vec![1.0, 0.0, -1.0], p).unwrap();
        let tg = tilt_posterior(&target, &reward).unwrap();
        let gap = DMatrix::<f64>::identity(3, 3) * 4.0 - tg.cov();
        let eig = gap.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-12));
    }

    #[test]
    fn symmetric_tilt_has_zero_mean() {
        let target =
            GmmTarget::new(vec![vec![-2.0, 1.0], vec![2.0, -1.0]], 1.0, vec![0.5, 0.5]).unwrap();
        let reward = QuadraticReward::isotropic(vec![0.0, 0.0], 0.7).unwrap();
        let (mean, _) = tilt_posterior(&target, &reward).unwrap().moments();
        assert!(mean.iter().all(|m| m.abs() < 1e-14));
    }

    #[test]
    fn dimension_mismatch() {
        let target = GmmTarget::new(vec![vec![0.0, 0.0]], 1.0, vec![1.0]).unwrap();
        let reward = QuadraticReward::isotropic(vec![0.0], 1.0).unwrap();
        assert!(tilt_posterior(&target, &reward).is_err());
    }
}
