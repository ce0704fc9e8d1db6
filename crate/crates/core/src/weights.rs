//! Log-space weight algebra and the per-step log-weight increments of each
//! reweighting scheme.
//!
//! | scheme          | increment over `[t, t+Δt]`                                         |
//! |-----------------|--------------------------------------------------------------------|
//! | `urge`          | `r(x', t+Δt) − r(x, t) − V ∇Gᵀ √Δt ξ − ½ V² ‖∇G‖² Δt`              |
//! | `fk_steering`   | `r(x', t+Δt) − r(x, t)`                                            |
//! | `afdps`         | `w_AFDPS(x, t) Δt` (left-point rule)                               |
//! | `pure_guidance` | `0`                                                                |

use ndarray::Zip;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Ensemble, StepIncrement};
use crate::error::{Error, Result};
use crate::problem::GuidedProblem;
use crate::reward::GuidanceChoice;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Urge,
    Afdps,
    FkSteering,
    PureGuidance,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 4] = [
        WeightScheme::Urge,
        WeightScheme::FkSteering,
        WeightScheme::Afdps,
        WeightScheme::PureGuidance,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            WeightScheme::Urge => "urge",
            WeightScheme::Afdps => "afdps",
            WeightScheme::FkSteering => "fk_steering",
            WeightScheme::PureGuidance => "pure_guidance",
        }
    }

    /// Whether the scheme ever reweights or resamples.
    pub fn is_weighted(&self) -> bool {
        !matches!(self, WeightScheme::PureGuidance)
    }
}

impl std::fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "urge" => Ok(WeightScheme::Urge),
            "afdps" => Ok(WeightScheme::Afdps),
            "fk_steering" => Ok(WeightScheme::FkSteering),
            "pure_guidance" => Ok(WeightScheme::PureGuidance),
            other => Err(Error::InvalidParameter(format!(
                "unknown method `{other}` (expected urge, afdps, fk_steering or pure_guidance)"
            ))),
        }
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

fn check_log_weights(log_w: &[f64]) -> Result<()> {
    if log_w.is_empty() {
        return Err(Error::WeightCollapse("empty ensemble".into()));
    }
    if log_w.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::WeightCollapse("log-weight is NaN or +inf".into()));
    }
    if log_w.iter().all(|l| *l == f64::NEG_INFINITY) {
        return Err(Error::WeightCollapse("every weight is zero".into()));
    }
    Ok(())
}

/// ŵ_i = exp(log w_i − logsumexp(log w)).
pub fn normalize(log_w: &[f64]) -> Result<Vec<f64>> {
    check_log_weights(log_w)?;
    let lse = log_sum_exp(log_w);
    Ok(log_w.iter().map(|l| (l - lse).exp()).collect())
}

/// (Σw)² / Σw², evaluated in log space.
pub fn ess(log_w: &[f64]) -> Result<f64> {
    check_log_weights(log_w)?;
    let lse = log_sum_exp(log_w);
    let doubled: Vec<f64> = log_w.iter().map(|l| 2.0 * l).collect();
    let lse2 = log_sum_exp(&doubled);
    let n = log_w.len() as f64;
    Ok((2.0 * lse - lse2).exp().clamp(1.0, n))
}

fn check_pair(before: &Ensemble, after: &Ensemble, inc: &StepIncrement) -> Result<()> {
    if before.states.dim() != after.states.dim() {
        return Err(Error::Dimension {
            expected: before.len(),
            found: after.len(),
        });
    }
    if inc.xi.dim() != before.states.dim() || inc.guidance_grad.dim() != before.states.dim() {
        return Err(Error::Dimension {
            expected: before.len(),
            found: inc.xi.nrows(),
        });
    }
    Ok(())
}

/// Girsanov path weight of one Euler–Maruyama step. Uses only reward values,
/// the recorded guidance gradient and the recorded noise.
pub fn urge_log_increment(
    before: &Ensemble,
    inc: &StepIncrement,
    after: &Ensemble,
    problem: &GuidedProblem,
) -> Result<Vec<f64>> {
    urge_log_increment_signed(before, inc, after, problem, 1.0)
}

/// `ito_sign = -1` flips the stochastic-integral term; used only by fault injection.
pub(crate) fn urge_log_increment_signed(
    before: &Ensemble,
    inc: &StepIncrement,
    after: &Ensemble,
    problem: &GuidedProblem,
    ito_sign: f64,
) -> Result<Vec<f64>> {
    check_pair(before, after, inc)?;
    let t0 = inc.t;
    let t1 = after.time;
    let v = inc.diffusion;
    let sqrt_dt = inc.dt.sqrt();
    let mut out = vec![0.0; before.len()];
    Zip::from(&mut out)
        .and(before.states.rows())
        .and(after.states.rows())
        .and(inc.xi.rows())
        .and(inc.guidance_grad.rows())
        .par_for_each(|o, x0, x1, xi, grad| {
            let x0 = x0.as_slice().expect("standard layout");
            let x1 = x1.as_slice().expect("standard layout");
            let reward_diff = problem.reward.value_at(x1, t1) - problem.reward.value_at(x0, t0);
            let mut ito = 0.0;
            let mut sq = 0.0;
            for (g, z) in grad.iter().zip(xi) {
                ito += g * z;
                sq += g * g;
            }
            *o = reward_diff - ito_sign * v * sqrt_dt * ito - 0.5 * v * v * sq * inc.dt;
        });
    Ok(out)
}

/// Reward difference across the step.
pub fn fk_steering_log_increment(
    before: &Ensemble,
    after: &Ensemble,
    problem: &GuidedProblem,
) -> Result<Vec<f64>> {
    if before.states.dim() != after.states.dim() {
        return Err(Error::Dimension {
            expected: before.len(),
            found: after.len(),
        });
    }
    let (t0, t1) = (before.time, after.time);
    let mut out = vec![0.0; before.len()];
    Zip::from(&mut out)
        .and(before.states.rows())
        .and(after.states.rows())
        .par_for_each(|o, x0, x1| {
            let x0 = x0.as_slice().expect("standard layout");
            let x1 = x1.as_slice().expect("standard layout");
            *o = problem.reward.value_at(x1, t1) - problem.reward.value_at(x0, t0);
        });
    Ok(out)
}

/// Which algebraic route evaluates the particle potential.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfdpsForm {
    /// Full expression including the score term.
    General,
    /// Score-free expression valid only when G ≡ r.
    Reduced,
}

/// Particle potential `w_AFDPS(x, t)`:
///
/// `∂_t r − ½V²(Δr + ‖∇r‖²) + ∇rᵀ(v + V²∇G) + V²ΔG + V² ∇log p_tᵀ ∇(G − r)`,
///
/// which for G ≡ r collapses to `∂_t r + ∇rᵀv + ½V²Δr + ½V²‖∇r‖²`.
pub fn afdps_rate(problem: &GuidedProblem, x: &[f64], t: f64, form: AfdpsForm) -> Result<f64> {
    if x.len() != problem.dim() {
        return Err(Error::Dimension {
            expected: problem.dim(),
            found: x.len(),
        });
    }
    crate::error::ensure_finite(x, "state")?;
    if form == AfdpsForm::Reduced && problem.guidance != GuidanceChoice::Reward {
        return Err(Error::InvalidParameter(
            "the score-free potential requires G = r".into(),
        ));
    }
    let at = problem.spec.marginal_at(t)?;
    let mut scratch = RateScratch::new(x.len());
    Ok(rate_into(problem, x, t, at, form, &mut scratch))
}

pub(crate) struct RateScratch {
    grad: Vec<f64>,
    drift: Vec<f64>,
    score: Vec<f64>,
}

impl RateScratch {
    pub(crate) fn new(d: usize) -> Self {
        Self {
            grad: vec![0.0; d],
            drift: vec![0.0; d],
            score: vec![0.0; d],
        }
    }
}

fn rate_into(
    problem: &GuidedProblem,
    x: &[f64],
    t: f64,
    at: crate::gmm::Diffused,
    form: AfdpsForm,
    s: &mut RateScratch,
) -> f64 {
    let v2 = problem.spec.diffusion_sq(t);
    let (_, lap_r, dt_r) = problem.reward.eval_into(x, t, &mut s.grad);
    problem
        .spec
        .drift_and_score_into(x, at, v2, &mut s.drift, &mut s.score);
    let grad_sq: f64 = s.grad.iter().map(|g| g * g).sum();
    let grad_dot_v: f64 = s.grad.iter().zip(&s.drift).map(|(g, v)| g * v).sum();
    match form {
        AfdpsForm::Reduced => dt_r + grad_dot_v + 0.5 * v2 * lap_r + 0.5 * v2 * grad_sq,
        AfdpsForm::General => {
            let kappa = problem.guidance.kappa();
            let lap_g = problem.guidance.laplacian_from(lap_r);
            // ∇G = κ∇r, ∇(G − r) = (κ − 1)∇r.
            let grad_dot_grad_g = kappa * grad_sq;
            let score_dot: f64 = s.score.iter().zip(&s.grad).map(|(a, b)| a * b).sum();
            dt_r - 0.5 * v2 * (lap_r + grad_sq)
                + grad_dot_v
                + v2 * grad_dot_grad_g
                + v2 * lap_g
                + v2 * (kappa - 1.0) * score_dot
        }
    }
}

/// `w_AFDPS(x_i, t)·Δt` for every particle; takes the score-free branch when G ≡ r.
pub fn afdps_log_increment(before: &Ensemble, problem: &GuidedProblem, dt: f64) -> Result<Vec<f64>> {
    let form = if problem.guidance == GuidanceChoice::Reward {
        AfdpsForm::Reduced
    } else {
        AfdpsForm::General
    };
    afdps_log_increment_with(before, problem, dt, form)
}

pub fn afdps_log_increment_with(
    before: &Ensemble,
    problem: &GuidedProblem,
    dt: f64,
    form: AfdpsForm,
) -> Result<Vec<f64>> {
    if before.dim() != problem.dim() {
        return Err(Error::Dimension {
            expected: problem.dim(),
            found: before.dim(),
        });
    }
    if form == AfdpsForm::Reduced && problem.guidance != GuidanceChoice::Reward {
        return Err(Error::InvalidParameter(
            "the score-free potential requires G = r".into(),
        ));
    }
    let t = before.time;
    let at = problem.spec.marginal_at(t)?;
    let d = before.dim();
    let src = before.states.as_slice().expect("standard layout");
    let out = src
        .par_chunks(d.max(1))
        .map_init(
            || RateScratch::new(d),
            |scratch, x| rate_into(problem, x, t, at, form, scratch) * dt,
        )
        .collect();
    Ok(out)
}
