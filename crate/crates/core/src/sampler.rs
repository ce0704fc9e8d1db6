//! Euler–Maruyama propagation and the weighted particle loop.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Ensemble, RngLineage, StepIncrement};
use crate::error::{Error, Result};
use crate::problem::GuidedProblem;
use crate::resample::{self, ResamplePolicy};
use crate::rng::{self, CounterNoise, Domain, NoiseSource};
use crate::weights::{self, WeightScheme};

/// Spread of log-weights above which a diagnostic warning is raised.
pub const SPREAD_WARNING: f64 = 700.0;
/// Consecutive fully degenerate steps tolerated before aborting.
pub const COLLAPSE_PATIENCE: usize = 10;

/// Initial particle law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Exact draws from the diffused mixture at t = 0.
    #[default]
    Exact,
    /// N(0, I).
    StandardNormal,
}

/// Deliberate defects used to check that the verification suite has teeth.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FaultInjection {
    #[default]
    None,
    /// Flip the sign of the stochastic integral in the path weight.
    FlipUrgeIto,
}

impl FaultInjection {
    pub(crate) fn ito_sign(self) -> f64 {
        match self {
            FaultInjection::None => 1.0,
            FaultInjection::FlipUrgeIto => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSettings {
    pub scheme: WeightScheme,
    pub particles: usize,
    pub steps: usize,
    pub policy: ResamplePolicy,
    pub init: InitMode,
    /// Start weighted schemes at `log w = r(x, 0)` so the terminal law is the
    /// tilted target even when `r(·, 0) ≠ 0`.
    pub initial_tilt: bool,
    pub seed: u64,
    #[doc(hidden)]
    pub fault: FaultInjection,
}

impl SamplerSettings {
    pub fn new(scheme: WeightScheme, particles: usize, steps: usize, seed: u64) -> Self {
        Self {
            scheme,
            particles,
            steps,
            policy: ResamplePolicy::default(),
            init: InitMode::default(),
            initial_tilt: true,
            seed,
            fault: FaultInjection::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::InvalidParameter("particle count must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidParameter("step count must be at least 1".into()));
        }
        self.policy.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub ess: f64,
    pub min_logw: f64,
    pub max_logw: f64,
    #[serde(serialize_with = "as_flag")]
    pub resampled: bool,
}

fn as_flag<S: serde::Serializer>(b: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u8(u8::from(*b))
}

#[derive(Debug, Clone, Default)]
pub struct RunDiagnostics {
    pub steps: Vec<StepRecord>,
    pub resample_events: usize,
    /// Steps whose log-weight spread exceeded [`SPREAD_WARNING`].
    pub spread_warnings: usize,
    pub wall_time: Duration,
}

impl RunDiagnostics {
    pub fn min_ess(&self) -> f64 {
        self.steps.iter().map(|r| r.ess).fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for rec in &self.steps {
            w.serialize(rec)?;
        }
        if self.steps.is_empty() {
            w.write_record(["step", "t", "ess", "min_logw", "max_logw", "resampled"])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One explicit Euler–Maruyama step of the guided SDE
/// `dX = (v + V²∇G) dt + V dW` over `[ens.time, ens.time + dt]`.
///
/// Returns the propagated ensemble (log-weights carried over unchanged) and
/// the record of the noise and guidance gradient that produced it.
pub fn em_step(
    ens: &Ensemble,
    problem: &GuidedProblem,
    dt: f64,
    noise: &dyn NoiseSource,
) -> Result<(Ensemble, StepIncrement)> {
    let (n, d) = ens.states.dim();
    if d != problem.dim() {
        return Err(Error::Dimension {
            expected: problem.dim(),
            found: d,
        });
    }
    let horizon = problem.horizon();
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParameter(format!("step size must be positive, got {dt}")));
    }
    let t = ens.time;
    let mut t_next = t + dt;
    // Absorb the rounding of k·Δt at the final grid point.
    if t_next > horizon && t_next - horizon <= 1e-9 * horizon {
        t_next = horizon;
    }
    if t_next > horizon {
        return Err(Error::Domain {
            what: "step end time",
            value: t_next,
            lo: 0.0,
            hi: horizon,
        });
    }
    let at = problem.spec.marginal_at(t)?;
    let v2 = problem.spec.diffusion_sq(t);
    let v = v2.sqrt();
    let sqrt_dt = dt.sqrt();
    let step = ens.step_index;
    let src = ens.states.as_slice().expect("standard layout");

    let mut next = vec![0.0; n * d];
    let mut xi = vec![0.0; n * d];
    let mut grad_g = vec![0.0; n * d];
    let bad = next
        .par_chunks_mut(d.max(1))
        .zip(xi.par_chunks_mut(d.max(1)))
        .zip(grad_g.par_chunks_mut(d.max(1)))
        .enumerate()
        .map_init(
            || (vec![0.0; d], vec![0.0; d], vec![0.0; d]),
            |(grad_r, drift, score), (i, ((out, z), gg))| {
                let x = &src[i * d..(i + 1) * d];
                noise.fill(step, i, z);
                problem.reward.eval_into(x, t, grad_r);
                problem.guidance.grad_from(grad_r, gg);
                problem.spec.drift_and_score_into(x, at, v2, drift, score);
                for k in 0..d {
                    out[k] = x[k] + (drift[k] + v2 * gg[k]) * dt + v * sqrt_dt * z[k];
                }
                out.iter().any(|c| !c.is_finite()).then_some(i)
            },
        )
        .flatten()
        .min();
    if let Some(particle) = bad {
        return Err(Error::NonFiniteState { particle, step });
    }

    let shape = (n, d);
    let states = Array2::from_shape_vec(shape, next).expect("shape matches");
    let after = Ensemble {
        states,
        log_w: ens.log_w.clone(),
        time: t_next,
        step_index: step + 1,
        resample_count: ens.resample_count,
        lineage: RngLineage {
            seed: ens.lineage.seed,
            counter: ens.lineage.counter + 1,
        },
    };
    let inc = StepIncrement {
        t,
        dt,
        diffusion: v,
        xi: Array2::from_shape_vec(shape, xi).expect("shape matches"),
        guidance_grad: Array2::from_shape_vec(shape, grad_g).expect("shape matches"),
    };
    Ok((after, inc))
}

/// Draw the initial ensemble. Particle `i` uses its own counter stream, so the
/// draw does not depend on the thread count.
pub fn initial_ensemble(problem: &GuidedProblem, settings: &SamplerSettings) -> Result<Ensemble> {
    let (n, d) = (settings.particles, problem.dim());
    let at = problem.spec.marginal_at(0.0)?;
    let mut states = Array2::zeros((n, d));
    states
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(d.max(1))
        .enumerate()
        .for_each(|(i, row)| {
            let mut rng = rng::stream(settings.seed, Domain::Init, i as u64, 0);
            match settings.init {
                InitMode::Exact => problem.spec.target.sample_into(at, &mut rng, row),
                InitMode::StandardNormal => rng::fill_standard_normal(&mut rng, row),
            }
        });
    let mut ens = Ensemble::new(states, 0.0, settings.seed);
    if settings.initial_tilt && settings.scheme.is_weighted() && problem.reward.scale(0.0) != 0.0 {
        ens.log_w = ens
            .states
            .rows()
            .into_iter()
            .map(|x| problem.reward.value_at(x.as_slice().expect("standard layout"), 0.0))
            .collect();
    }
    Ok(ens)
}

/// Log-weight increments of `scheme` for one step.
pub fn log_increment(
    scheme: WeightScheme,
    before: &Ensemble,
    inc: &StepIncrement,
    after: &Ensemble,
    problem: &GuidedProblem,
) -> Result<Vec<f64>> {
    log_increment_with_fault(scheme, before, inc, after, problem, FaultInjection::None)
}

pub(crate) fn log_increment_with_fault(
    scheme: WeightScheme,
    before: &Ensemble,
    inc: &StepIncrement,
    after: &Ensemble,
    problem: &GuidedProblem,
    fault: FaultInjection,
) -> Result<Vec<f64>> {
    match scheme {
        WeightScheme::Urge => {
            weights::urge_log_increment_signed(before, inc, after, problem, fault.ito_sign())
        }
        WeightScheme::FkSteering => weights::fk_steering_log_increment(before, after, problem),
        WeightScheme::Afdps => weights::afdps_log_increment(before, problem, inc.dt),
        WeightScheme::PureGuidance => Ok(vec![0.0; before.len()]),
    }
}

/// Full run: initialise, then `steps` rounds of propagate, reweight and resample.
///
/// The terminal ensemble keeps the weights accumulated since the last
/// resample, so downstream statistics must be weighted.
pub fn run_sampler(
    problem: &GuidedProblem,
    settings: &SamplerSettings,
) -> Result<(Ensemble, RunDiagnostics)> {
    settings.validate()?;
    let start = Instant::now();
    let noise = CounterNoise {
        seed: settings.seed,
    };
    let dt = problem.horizon() / settings.steps as f64;
    let n = settings.particles;
    let mut diag = RunDiagnostics::default();
    let mut ens = initial_ensemble(problem, settings)?;
    let mut degenerate_run = 0usize;

    for k in 0..settings.steps {
        // Pin the grid to k·Δt rather than accumulating rounding.
        ens.time = problem.horizon() * k as f64 / settings.steps as f64;
        let (mut after, inc) = em_step(&ens, problem, dt, &noise)?;
        if k + 1 == settings.steps {
            after.time = problem.horizon();
        }
        let delta = log_increment_with_fault(
            settings.scheme,
            &ens,
            &inc,
            &after,
            problem,
            settings.fault,
        )?;
        for (lw, dl) in after.log_w.iter_mut().zip(&delta) {
            *lw += dl;
        }
        if let Some(i) = after.log_w.iter().position(|l| !l.is_finite()) {
            return Err(Error::WeightCollapse(format!(
                "log-weight of particle {i} became {} at step {k}",
                after.log_w[i]
            )));
        }
        let (lo, hi) = after
            .log_w
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &l| (a.min(l), b.max(l)));
        if hi - lo > SPREAD_WARNING {
            diag.spread_warnings += 1;
        }
        for lw in after.log_w.iter_mut() {
            *lw -= hi;
        }
        let ess = weights::ess(&after.log_w)?;
        degenerate_run = if ess < 1.0 + 1e-9 && n > 1 {
            degenerate_run + 1
        } else {
            0
        };
        if degenerate_run >= COLLAPSE_PATIENCE {
            return Err(Error::WeightCollapse(format!(
                "ESS stayed at 1 for {COLLAPSE_PATIENCE} consecutive steps (step {k})"
            )));
        }
        let resampled = settings.scheme.is_weighted() && settings.policy.should_resample(ess, n);
        if resampled {
            let mut rng = rng::stream(settings.seed, Domain::Resample, k as u64, 0);
            after = resample::multinomial_resample(&after, &mut rng)?;
            diag.resample_events += 1;
        }
        diag.steps.push(StepRecord {
            step: k + 1,
            t: after.time,
            ess,
            min_logw: lo,
            max_logw: hi,
            resampled,
        });
        ens = after;
    }
    diag.wall_time = start.elapsed();
    Ok((ens, diag))
}

/// Unweighted cloud from a weighted terminal ensemble (one final multinomial
/// resample with its own stream); unweighted ensembles are returned as is.
pub fn unweighted_states(ens: &Ensemble, seed: u64) -> Result<Array2<f64>> {
    if ens.log_w.iter().all(|l| *l == ens.log_w[0]) {
        return Ok(ens.states.clone());
    }
    let mut rng = rng::stream(seed, Domain::FinalResample, 0, 0);
    Ok(resample::multinomial_resample(ens, &mut rng)?.states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::GmmTarget;
    use crate::model::DiffusionSpec;
    use crate::reward::{GuidanceChoice, Interp, QuadraticReward, ScheduledReward};
    use crate::rng::{ConstantNoise, ZeroNoise};
    use crate::schedule::NoiseSchedule;

    fn problem_1d(guidance: GuidanceChoice) -> GuidedProblem {
        let target = GmmTarget::new(vec![vec![-2.0], vec![2.0]], 0.5, vec![0.5, 0.5]).unwrap();
        let spec = DiffusionSpec::new(NoiseSchedule::constant(1.0, 1.0).unwrap(), target).unwrap();
        let base = QuadraticReward::isotropic(vec![1.0], 1.0).unwrap();
        let reward = ScheduledReward::new(base, Interp::Constant, 1.0).unwrap();
        GuidedProblem::new(spec, reward, guidance).unwrap()
    }

    #[test]
    fn zero_noise_step_is_explicit_euler() {
        let p = problem_1d(GuidanceChoice::Reward);
        let ens = Ensemble::new(Array2::from_shape_vec((2, 1), vec![0.5, -1.0]).unwrap(), 0.2, 0);
        let (after, inc) = em_step(&ens, &p, 0.01, &ZeroNoise).unwrap();
        for i in 0..2 {
            let x = ens.particle(i);
            let v = p.spec.base_drift(x, 0.2).unwrap()[0];
            let g = p.reward.eval(x, 0.2).unwrap().grad[0];
            let expect = x[0] + (v + p.spec.diffusion_sq(0.2) * g) * 0.01;
            assert!((after.particle(i)[0] - expect).abs() < 1e-14);
            assert_eq!(inc.guidance_grad[(i, 0)], g);
        }
        assert_eq!(after.step_index, 1);
        assert!((after.time - 0.21).abs() < 1e-15);
    }

    #[test]
    fn recorded_noise_is_the_noise_used() {
        let p = problem_1d(GuidanceChoice::None);
        let ens = Ensemble::new(Array2::zeros((3, 1)), 0.0, 0);
        let (after, inc) = em_step(&ens, &p, 0.04, &ConstantNoise(0.5)).unwrap();
        assert!(inc.xi.iter().all(|z| *z == 0.5));
        // v(0, t) = 0 by symmetry, so the move is V√Δt·ξ.
        let expect = p.spec.diffusion(0.0) * 0.2 * 0.5;
        assert!((after.particle(0)[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn step_past_horizon_is_rejected() {
        let p = problem_1d(GuidanceChoice::None);
        let ens = Ensemble::new(Array2::zeros((1, 1)), 0.99, 0);
        assert!(em_step(&ens, &p, 0.1, &ZeroNoise).is_err());
        assert!(em_step(&ens, &p, 0.0, &ZeroNoise).is_err());
    }

    #[test]
    fn pure_guidance_never_resamples() {
        let p = problem_1d(GuidanceChoice::Reward);
        let mut s = SamplerSettings::new(WeightScheme::PureGuidance, 64, 20, 3);
        s.policy = ResamplePolicy::EveryStep;
        let (ens, diag) = run_sampler(&p, &s).unwrap();
        assert_eq!(diag.resample_events, 0);
        assert!(ens.log_w.iter().all(|l| *l == 0.0));
        assert_eq!(diag.steps.len(), 20);
        assert_eq!(ens.time, 1.0);
    }

    #[test]
    fn every_step_policy_resets_weights() {
        let p = problem_1d(GuidanceChoice::Reward);
        let mut s = SamplerSettings::new(WeightScheme::Urge, 64, 10, 3);
        s.policy = ResamplePolicy::EveryStep;
        let (ens, diag) = run_sampler(&p, &s).unwrap();
        assert_eq!(diag.resample_events, 10);
        assert_eq!(ens.resample_count, 10);
        assert!(ens.log_w.iter().all(|l| *l == 0.0));
    }

    #[test]
    fn diagnostics_csv_header() {
        let p = problem_1d(GuidanceChoice::Reward);
        let s = SamplerSettings::new(WeightScheme::FkSteering, 16, 3, 1);
        let (_, diag) = run_sampler(&p, &s).unwrap();
        let mut buf = Vec::new();
        diag.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,t,ess,min_logw,max_logw,resampled\n"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn zero_settings_rejected() {
        let p = problem_1d(GuidanceChoice::Reward);
        assert!(run_sampler(&p, &SamplerSettings::new(WeightScheme::Urge, 0, 5, 0)).is_err());
        assert!(run_sampler(&p, &SamplerSettings::new(WeightScheme::Urge, 5, 0, 0)).is_err());
    }
}
