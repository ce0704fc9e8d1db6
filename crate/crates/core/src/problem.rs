use crate::error::{Error, Result};
use crate::model::DiffusionSpec;
use crate::reward::{GuidanceChoice, QuadraticReward, ScheduledReward};
use crate::tilt::{tilt_posterior, TiltedGmm};

/// Base diffusion, reward and guidance potential of one sampling task.
#[derive(Debug, Clone)]
pub struct GuidedProblem {
    pub spec: DiffusionSpec,
    pub reward: ScheduledReward,
    pub guidance: GuidanceChoice,
}

impl GuidedProblem {
    pub fn new(spec: DiffusionSpec, reward: ScheduledReward, guidance: GuidanceChoice) -> Result<Self> {
        if reward.dim() != spec.dim() {
            return Err(Error::Dimension {
                expected: spec.dim(),
                found: reward.dim(),
            });
        }
        if (reward.horizon - spec.horizon()).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "reward horizon {} differs from schedule horizon {}",
                reward.horizon,
                spec.horizon()
            )));
        }
        guidance.validate()?;
        Ok(Self {
            spec,
            reward,
            guidance,
        })
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn horizon(&self) -> f64 {
        self.spec.horizon()
    }

    /// Analytic terminal target `p_data e^{r(·, T)}`.
    pub fn oracle(&self) -> Result<TiltedGmm> {
        if self.reward.scale(self.horizon()) == 1.0 {
            tilt_posterior(&self.spec.target, &self.reward.base)
        } else {
            self.tilted_marginal(self.horizon())
        }
    }

    /// Closed-form tilted marginal `q(·, t) ∝ p(·, t) e^{r(·, t)}`.
    pub fn tilted_marginal(&self, t: f64) -> Result<TiltedGmm> {
        let at = self.spec.marginal_at(t)?;
        let means = self
            .spec
            .target
            .means()
            .iter()
            .map(|m| m.iter().map(|v| at.alpha * v).collect())
            .collect();
        let diffused = crate::gmm::GmmTarget::new(
            means,
            at.total_var,
            self.spec.target.weights().to_vec(),
        )?;
        let g = self.reward.scale(t);
        if g == 0.0 {
            // e^{0} leaves the mixture unchanged; P = 0 is not a valid quadratic reward.
            let d = self.dim();
            let cov = nalgebra::DMatrix::identity(d, d) * at.total_var;
            let means = diffused
                .means()
                .iter()
                .map(|m| nalgebra::DVector::from_column_slice(m))
                .collect();
            return TiltedGmm::new(cov, means, diffused.weights().to_vec());
        }
        let base = &self.reward.base;
        let scaled = QuadraticReward::new(base.mu().iter().copied().collect(), base.prec() * g)?;
        tilt_posterior(&diffused, &scaled)
    }
}
