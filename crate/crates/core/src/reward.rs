//! Quadratic rewards, their time schedules and guidance potentials.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// `r(x) = −½ (x − μ_r)ᵀ P (x − μ_r)` with `P` symmetric positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticReward {
    mu: DVector<f64>,
    prec: DMatrix<f64>,
    diag: Option<Vec<f64>>,
    trace: f64,
}

impl QuadraticReward {
    pub fn new(mu: Vec<f64>, prec: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if prec.nrows() != d || prec.ncols() != d {
            return Err(Error::Dimension {
                expected: d,
                found: prec.nrows(),
            });
        }
        ensure_finite(&mu, "reward centre")?;
        ensure_finite(prec.as_slice(), "reward precision")?;
        for i in 0..d {
            for j in 0..i {
                if (prec[(i, j)] - prec[(j, i)]).abs() > 1e-10 {
                    return Err(Error::NotPositiveDefinite("reward precision is not symmetric"));
                }
            }
        }
        if prec.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("reward precision"));
        }
        let trace = prec.trace();
        let is_diag = (0..d).all(|i| (0..d).all(|j| i == j || prec[(i, j)] == 0.0));
        let diag = is_diag.then(|| prec.diagonal().iter().copied().collect());
        Ok(Self {
            mu: DVector::from_vec(mu),
            prec,
            diag,
            trace,
        })
    }

    /// Diagonal precision.
    pub fn diagonal(mu: Vec<f64>, prec_diag: &[f64]) -> Result<Self> {
        let prec = DMatrix::from_diagonal(&DVector::from_column_slice(prec_diag));
        Self::new(mu, prec)
    }

    /// `P = prec · I` centred at `mu`.
    pub fn isotropic(mu: Vec<f64>, prec: f64) -> Result<Self> {
        let d = mu.len();
        Self::diagonal(mu, &vec![prec; d])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn prec(&self) -> &DMatrix<f64> {
        &self.prec
    }

    /// Value and gradient on a raw slice; `grad` receives `−P (x − μ)`.
    pub(crate) fn value_grad_into(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.dim();
        let mut value = 0.0;
        if let Some(diag) = &self.diag {
            for i in 0..d {
                let c = x[i] - self.mu[i];
                let acc = diag[i] * c;
                grad[i] = -acc;
                value += c * acc;
            }
            return -0.5 * value;
        }
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.prec[(i, j)] * (x[j] - self.mu[j]);
            }
            grad[i] = -acc;
            value += (x[i] - self.mu[i]) * acc;
        }
        -0.5 * value
    }

    pub(crate) fn value(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut value = 0.0;
        match &self.diag {
            Some(diag) => {
                for i in 0..d {
                    let c = x[i] - self.mu[i];
                    value += diag[i] * c * c;
                }
            }
            None => {
                for i in 0..d {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += self.prec[(i, j)] * (x[j] - self.mu[j]);
                    }
                    value += (x[i] - self.mu[i]) * acc;
                }
            }
        }
        -0.5 * value
    }

    /// Δr = −tr P.
    pub fn laplacian(&self) -> f64 {
        -self.trace
    }
}

/// Time interpolation `g(t)` in `r(x,t) = g(t) r(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    /// g ≡ 1.
    #[default]
    Constant,
    /// g(t) = t / T.
    Linear,
    /// g ≡ 0: the reward is switched off entirely.
    Zero,
}

/// Value and derivatives of `r(·, t)` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardEval {
    pub value: f64,
    pub grad: Vec<f64>,
    pub lap: f64,
    pub dt: f64,
}

#[derive(Debug, Clone)]
pub struct ScheduledReward {
    pub base: QuadraticReward,
    pub interp: Interp,
    pub horizon: f64,
}

impl ScheduledReward {
    pub fn new(base: QuadraticReward, interp: Interp, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "reward horizon must be positive, got {horizon}"
            )));
        }
        Ok(Self {
            base,
            interp,
            horizon,
        })
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// g(t).
    pub fn scale(&self, t: f64) -> f64 {
        match self.interp {
            Interp::Constant => 1.0,
            Interp::Linear => t / self.horizon,
            Interp::Zero => 0.0,
        }
    }

    /// g'(t).
    pub fn scale_rate(&self) -> f64 {
        match self.interp {
            Interp::Constant | Interp::Zero => 0.0,
            Interp::Linear => 1.0 / self.horizon,
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if (0.0..=self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain {
                what: "reward time",
                value: t,
                lo: 0.0,
                hi: self.horizon,
            })
        }
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Result<RewardEval> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: x.len(),
            });
        }
        ensure_finite(x, "reward argument")?;
        self.check_time(t)?;
        let mut grad = vec![0.0; x.len()];
        let (value, lap, dt) = self.eval_into(x, t, &mut grad);
        Ok(RewardEval {
            value,
            grad,
            lap,
            dt,
        })
    }

    /// Unchecked hot-path evaluation; returns `(value, lap, dt)` and fills `grad`.
    pub(crate) fn eval_into(&self, x: &[f64], t: f64, grad: &mut [f64]) -> (f64, f64, f64) {
        let g = self.scale(t);
        let base = self.base.value_grad_into(x, grad);
        for v in grad.iter_mut() {
            *v *= g;
        }
        (g * base, g * self.base.laplacian(), self.scale_rate() * base)
    }

    pub(crate) fn value_at(&self, x: &[f64], t: f64) -> f64 {
        match self.interp {
            Interp::Zero => 0.0,
            _ => self.scale(t) * self.base.value(x),
        }
    }

    pub fn value(&self, x: &[f64], t: f64) -> Result<f64> {
        ensure_finite(x, "reward argument")?;
        self.check_time(t)?;
        Ok(self.value_at(x, t))
    }
}

/// Guidance potential G in the guided drift `v + V² ∇G`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GuidanceChoice {
    /// G ≡ 0.
    None,
    /// G ≡ r(·, t).
    #[default]
    Reward,
    /// G = κ r(·, t).
    Scaled { kappa: f64 },
}

impl GuidanceChoice {
    /// Multiplier κ with G = κ r.
    pub fn kappa(&self) -> f64 {
        match *self {
            GuidanceChoice::None => 0.0,
            GuidanceChoice::Reward => 1.0,
            GuidanceChoice::Scaled { kappa } => kappa,
        }
    }

    /// ∇G from an already evaluated ∇r.
    pub fn grad_from(&self, reward_grad: &[f64], out: &mut [f64]) {
        let k = self.kappa();
        for (o, g) in out.iter_mut().zip(reward_grad) {
            *o = k * g;
        }
    }

    /// ΔG from Δr.
    pub fn laplacian_from(&self, reward_lap: f64) -> f64 {
        self.kappa() * reward_lap
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            GuidanceChoice::Scaled { kappa } if !kappa.is_finite() => Err(
                Error::InvalidParameter(format!("guidance scale must be finite, got {kappa}")),
            ),
            _ => Ok(()),
        }
    }
}
