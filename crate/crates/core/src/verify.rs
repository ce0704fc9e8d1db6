//! Numerical checks of the two central claims: the weighted terminal law is
//! the tilted target, and the path weight has the same marginal intensity as
//! the particle potential.

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::gmm::GmmTarget;
use crate::model::DiffusionSpec;
use crate::problem::GuidedProblem;
use crate::resample;
use crate::reward::{GuidanceChoice, Interp, QuadraticReward, ScheduledReward};
use crate::rng::{self, Domain, PresetNoise};
use crate::sampler::{self, em_step, FaultInjection, SamplerSettings};
use crate::schedule::NoiseSchedule;
use crate::tilt::TiltedGmm;
use crate::weights::{self, AfdpsForm, WeightScheme};

#[derive(Debug, Clone, PartialEq)]
pub enum TestFunction {
    Constant,
    Coordinate(usize),
    Square(usize),
    /// 1 on the half-space `{x : aᵀx ≤ b}`.
    Indicator { normal: Vec<f64>, offset: f64 },
}

impl TestFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Constant => 1.0,
            TestFunction::Coordinate(j) => x[*j],
            TestFunction::Square(j) => x[*j] * x[*j],
            TestFunction::Indicator { normal, offset } => {
                let ax: f64 = normal.iter().zip(x).map(|(a, v)| a * v).sum();
                f64::from(u8::from(ax <= *offset))
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            TestFunction::Constant => "constant".into(),
            TestFunction::Coordinate(j) => format!("x{j}"),
            TestFunction::Square(j) => format!("x{j}^2"),
            TestFunction::Indicator { .. } => "halfspace".into(),
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        let ok = match self {
            TestFunction::Constant => true,
            TestFunction::Coordinate(j) | TestFunction::Square(j) => *j < d,
            TestFunction::Indicator { normal, .. } => normal.len() == d,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "test function {} does not fit dimension {d}",
                self.label()
            )))
        }
    }

    /// Exact expectation under a Gaussian mixture with shared covariance.
    pub fn expectation(&self, law: &TiltedGmm) -> Result<f64> {
        self.check_dim(law.dim())?;
        let (mean, cov) = law.moments();
        Ok(match self {
            TestFunction::Constant => 1.0,
            TestFunction::Coordinate(j) => mean[*j],
            TestFunction::Square(j) => cov[(*j, *j)] + mean[*j] * mean[*j],
            TestFunction::Indicator { normal, offset } => {
                let a = nalgebra::DVector::from_column_slice(normal);
                let sd = (a.transpose() * law.cov() * &a)[(0, 0)].sqrt();
                let std = Normal::standard();
                law.means()
                    .iter()
                    .zip(law.weights())
                    .map(|(m, w)| w * std.cdf((offset - a.dot(m)) / sd))
                    .sum()
            }
        })
    }
}

/// `Σ ŵ_i φ(x_i)`.
pub fn weighted_functional(ens: &Ensemble, phi: &TestFunction) -> Result<f64> {
    phi.check_dim(ens.dim())?;
    let w = ens.normalized_weights()?;
    Ok(ens
        .states
        .rows()
        .into_iter()
        .zip(&w)
        .map(|(x, wi)| wi * phi.eval(x.as_slice().expect("standard layout")))
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZReport {
    pub mean: f64,
    pub oracle: f64,
    pub stderr: f64,
    /// `None` when every replicate reproduced the oracle exactly.
    pub z: Option<f64>,
}

impl ZReport {
    pub fn passes(&self, z_max: f64) -> bool {
        match self.z {
            Some(z) => z.abs() < z_max,
            None => (self.mean - self.oracle).abs() < 1e-12,
        }
    }
}

/// Run `n_reps` independent samplers (seeds `settings.seed + rep`) and
/// z-score the replicate mean of `M_T(φ)` against the analytic target.
pub fn unbiasedness_test(
    problem: &GuidedProblem,
    settings: &SamplerSettings,
    phi: &TestFunction,
    n_reps: usize,
) -> Result<ZReport> {
    if n_reps < 2 {
        return Err(Error::InvalidParameter("need at least two replicates".into()));
    }
    phi.check_dim(problem.dim())?;
    let oracle = phi.expectation(&problem.oracle()?)?;
    let mut values = Vec::with_capacity(n_reps);
    for rep in 0..n_reps {
        let mut s = settings.clone();
        s.seed = settings.seed.wrapping_add(rep as u64);
        let (ens, _) = sampler::run_sampler(problem, &s)?;
        values.push(weighted_functional(&ens, phi)?);
    }
    let n = n_reps as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let stderr = (var / n).sqrt();
    let exact = values.iter().all(|v| (v - oracle).abs() < 1e-12);
    let z = (!exact).then(|| (mean - oracle) / stderr);
    Ok(ZReport {
        mean,
        oracle,
        stderr,
        z,
    })
}

/// Inputs of the marginal-equivalence experiment.
#[derive(Debug, Clone)]
pub struct EquivalenceSetup {
    pub problem: GuidedProblem,
    /// Start time of the short paths.
    pub s: f64,
    pub h_values: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
    pub fault: FaultInjection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    /// Gaps in decreasing order.
    pub h_values: Vec<f64>,
    pub lhs: Vec<f64>,
    pub stderr: Vec<f64>,
    pub rhs: f64,
    pub residuals: Vec<f64>,
    /// Each halving of `h` does not increase the residual beyond 3 pooled
    /// standard errors.
    pub converging: bool,
    /// Largest gap between the path weight and the endpoint reward
    /// difference; only reported for unguided runs.
    pub endpoint_gap: Option<f64>,
    /// Fewer paths than needed to resolve the smallest residual at 10 % of
    /// the right-hand side.
    pub underpowered: bool,
}

impl EquivalenceReport {
    /// Residual at the smallest gap divided by `|rhs|`.
    pub fn relative_remainder(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(f64::NAN) / self.rhs.abs()
    }
}

/// Trapezoid rule on `n` nodes.
fn trapezoid(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64 + Sync) -> f64 {
    let step = (hi - lo) / (n - 1) as f64;
    let inner: f64 = (1..n - 1)
        .into_par_iter()
        .map(|k| f(lo + k as f64 * step))
        .collect::<Vec<_>>()
        .iter()
        .sum();
    step * (inner + 0.5 * (f(lo) + f(hi)))
}

/// Quadrature window covering every component of a 1D mixture to ±`k`σ.
fn window_1d(law: &TiltedGmm, k: f64) -> (f64, f64) {
    let sd = law.cov()[(0, 0)].sqrt();
    let lo = law.means().iter().map(|m| m[0]).fold(f64::INFINITY, f64::min);
    let hi = law.means().iter().map(|m| m[0]).fold(f64::NEG_INFINITY, f64::max);
    (lo - k * sd, hi + k * sd)
}

/// `E_q[w_AFDPS(x, s) φ(x)]` under the tilted marginal at `s`, by quadrature.
pub fn potential_expectation_1d(problem: &GuidedProblem, s: f64, phi: &TestFunction) -> Result<f64> {
    if problem.dim() != 1 {
        return Err(Error::Dimension {
            expected: 1,
            found: problem.dim(),
        });
    }
    let q = problem.tilted_marginal(s)?;
    let form = if problem.guidance == GuidanceChoice::Reward {
        AfdpsForm::Reduced
    } else {
        AfdpsForm::General
    };
    let (lo, hi) = window_1d(&q, 12.0);
    // Validate once so the integrand can stay infallible.
    weights::afdps_rate(problem, &[lo], s, form)?;
    Ok(trapezoid(lo, hi, 40_001, |x| {
        let w = weights::afdps_rate(problem, &[x], s, form).unwrap_or(f64::NAN);
        q.log_density(&[x]).exp() * w * phi.eval(&[x])
    }))
}

/// Short-time identity between the path weight and the potential, in its
/// unconditional form: for X_s drawn from the tilted marginal at `s`,
/// `(E[w_{s,s+h} φ(X_{s+h})] − E[φ(X_{s+h})]) / h → E[w_AFDPS(X_s, s) φ(X_s)]`.
/// Every gap reuses the same starting points and standard-normal draws.
pub fn marginal_equivalence_test(
    setup: &EquivalenceSetup,
    phi: &TestFunction,
) -> Result<EquivalenceReport> {
    let p = &setup.problem;
    phi.check_dim(p.dim())?;
    if setup.h_values.is_empty() || setup.h_values.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
        return Err(Error::InvalidParameter("gaps must be positive".into()));
    }
    if setup.n_paths < 2 {
        return Err(Error::InvalidParameter("need at least two paths".into()));
    }
    let mut hs = setup.h_values.clone();
    hs.sort_by(|a, b| b.total_cmp(a));
    let rhs = potential_expectation_1d(p, setup.s, phi)?;

    let q = p.tilted_marginal(setup.s)?;
    let mut start_rng = rng::stream(setup.seed, Domain::Verify, 0, 0);
    let x0 = q.sample(setup.n_paths, &mut start_rng);
    let mut xi = Array2::zeros(x0.dim());
    xi.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(p.dim())
        .enumerate()
        .for_each(|(i, row)| {
            let mut r = rng::stream(setup.seed, Domain::Verify, 1, i as u64);
            rng::fill_standard_normal(&mut r, row);
        });
    let noise = PresetNoise { xi };

    let n = setup.n_paths as f64;
    let mut lhs = Vec::with_capacity(hs.len());
    let mut stderr = Vec::with_capacity(hs.len());
    let mut endpoint_gap: Option<f64> = None;
    for &h in &hs {
        let before = Ensemble::new(x0.clone(), setup.s, setup.seed);
        let (after, inc) = em_step(&before, p, h, &noise)?;
        let dl = weights::urge_log_increment_signed(&before, &inc, &after, p, setup.fault.ito_sign())?;
        if p.guidance == GuidanceChoice::None {
            let direct = weights::fk_steering_log_increment(&before, &after, p)?;
            let gap = dl
                .iter()
                .zip(&direct)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            endpoint_gap = Some(endpoint_gap.map_or(gap, |g| g.max(gap)));
        }
        let vals: Vec<f64> = after
            .states
            .rows()
            .into_iter()
            .zip(&dl)
            .map(|(x, l)| l.exp_m1() * phi.eval(x.as_slice().expect("standard layout")) / h)
            .collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        lhs.push(mean);
        stderr.push((var / n).sqrt());
    }
    let residuals: Vec<f64> = lhs.iter().map(|l| (l - rhs).abs()).collect();
    let converging = (1..hs.len()).all(|k| {
        let band = 3.0 * (stderr[k - 1].powi(2) + stderr[k].powi(2)).sqrt();
        residuals[k] <= residuals[k - 1] + band
    });
    let underpowered = stderr.last().is_some_and(|se| 3.0 * se > 0.1 * rhs.abs());
    Ok(EquivalenceReport {
        h_values: hs,
        lhs,
        stderr,
        rhs,
        residuals,
        converging,
        endpoint_gap,
        underpowered,
    })
}

/// One line of the verification CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationRow {
    pub test_name: String,
    pub h: Option<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub stderr: f64,
    #[serde(serialize_with = "as_flag")]
    pub pass: bool,
}

fn as_flag<S: serde::Serializer>(b: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u8(u8::from(*b))
}

pub fn write_verification_csv<W: std::io::Write>(rows: &[VerificationRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["test_name", "h", "lhs", "rhs", "stderr", "pass"])?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Budgets of the desk-scale suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteBudget {
    pub particles: usize,
    pub steps: usize,
    pub reps: usize,
    pub paths: usize,
    pub resample_trials: usize,
}

impl Default for SuiteBudget {
    fn default() -> Self {
        Self {
            particles: 4000,
            steps: 500,
            reps: 50,
            paths: 1_000_000,
            resample_trials: 100_000,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    /// Run only tests whose name contains this string.
    pub filter: Option<String>,
    pub budget: SuiteBudget,
    #[doc(hidden)]
    pub fault: FaultInjection,
}

/// The 1D two-component problem used by the unbiasedness checks: a gentle
/// constant-β schedule keeps the Euler–Maruyama bias well below the Monte
/// Carlo error, and the linear reward schedule makes `r(·, 0) = 0`.
pub fn unbiasedness_problem(interp: Interp) -> Result<GuidedProblem> {
    let target = GmmTarget::new(vec![vec![-2.0], vec![2.0]], 0.5, vec![0.3, 0.7])?;
    let spec = DiffusionSpec::new(NoiseSchedule::constant(1.0, 1.0)?, target)?;
    let reward = ScheduledReward::new(QuadraticReward::isotropic(vec![1.0], 1.0)?, interp, 1.0)?;
    GuidedProblem::new(spec, reward, GuidanceChoice::Reward)
}

/// 1D problem for the short-time identity.
pub fn equivalence_problem(guidance: GuidanceChoice) -> Result<GuidedProblem> {
    let target = GmmTarget::new(vec![vec![-1.5], vec![2.0]], 0.6, vec![0.4, 0.6])?;
    let spec = DiffusionSpec::new(NoiseSchedule::default(), target)?;
    let reward = ScheduledReward::new(
        QuadraticReward::isotropic(vec![0.5], 0.8)?,
        Interp::Linear,
        1.0,
    )?;
    GuidedProblem::new(spec, reward, guidance)
}

type Check = (&'static str, fn(&SuiteOptions) -> Result<Vec<VerificationRow>>);

const CHECKS: [Check; 7] = [
    ("unbiasedness", check_unbiasedness),
    ("equivalence_guided", check_equivalence_guided),
    ("equivalence_unguided", check_equivalence_unguided),
    ("unguided_urge_equals_fk", check_reduction),
    ("afdps_forms_agree", check_afdps_forms),
    ("resampler_offspring", check_resampler),
    ("oracle_grid", check_oracle_grid),
];

/// Names of the check groups, in run order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Run every check whose rows match the filter. A failing check contributes
/// rows with `pass = false`; an erroring check contributes one such row and
/// the suite carries on.
pub fn run_suite(opts: &SuiteOptions) -> Vec<VerificationRow> {
    let wanted = |name: &str| {
        opts.filter
            .as_deref()
            .is_none_or(|f| name.contains(f) || f.contains(name))
    };
    let mut rows = Vec::new();
    for (name, check) in CHECKS {
        if !wanted(name) {
            continue;
        }
        match check(opts) {
            Ok(r) => rows.extend(r.into_iter().filter(|row| wanted(&row.test_name) || wanted(name))),
            Err(e) => rows.push(VerificationRow {
                test_name: format!("{name}_error: {e}"),
                h: None,
                lhs: f64::NAN,
                rhs: f64::NAN,
                stderr: f64::NAN,
                pass: false,
            }),
        }
    }
    rows
}

fn scalar_row(name: String, lhs: f64, rhs: f64, stderr: f64, pass: bool) -> VerificationRow {
    VerificationRow {
        test_name: name,
        h: None,
        lhs,
        rhs,
        stderr,
        pass,
    }
}

fn check_unbiasedness(opts: &SuiteOptions) -> Result<Vec<VerificationRow>> {
    let b = opts.budget;
    let mut settings = SamplerSettings::new(WeightScheme::Urge, b.particles, b.steps, 1000);
    settings.fault = opts.fault;
    let cases = [
        ("tilted", Interp::Linear, TestFunction::Coordinate(0)),
        ("tilted", Interp::Linear, TestFunction::Square(0)),
        ("untilted", Interp::Zero, TestFunction::Coordinate(0)),
    ];
    let mut rows = Vec::new();
    for (tag, interp, phi) in cases {
        let problem = unbiasedness_problem(interp)?;
        let rep = unbiasedness_test(&problem, &settings, &phi, b.reps)?;
        rows.push(scalar_row(
            format!("unbiasedness_{tag}_{}", phi.label()),
            rep.mean,
            rep.oracle,
            rep.stderr,
            rep.passes(4.0),
        ));
    }
    Ok(rows)
}

fn equivalence_rows(
    name: &str,
    report: &EquivalenceReport,
    extra_pass: bool,
) -> Vec<VerificationRow> {
    let pass = report.converging && extra_pass;
    report
        .h_values
        .iter()
        .enumerate()
        .map(|(k, &h)| VerificationRow {
            test_name: name.to_string(),
            h: Some(h),
            lhs: report.lhs[k],
            rhs: report.rhs,
            stderr: report.stderr[k],
            pass,
        })
        .collect()
}

const GAPS: [f64; 3] = [1e-2, 5e-3, 2.5e-3];

fn check_equivalence_guided(opts: &SuiteOptions) -> Result<Vec<VerificationRow>> {
    let setup = EquivalenceSetup {
        problem: equivalence_problem(GuidanceChoice::Reward)?,
        s: 0.5,
        h_values: GAPS.to_vec(),
        n_paths: opts.budget.paths,
        seed: 2024,
        fault: opts.fault,
    };
    let mut rows = Vec::new();
    for phi in [TestFunction::Constant, TestFunction::Coordinate(0)] {
        let rep = marginal_equivalence_test(&setup, &phi)?;
        let remainder_ok = rep.relative_remainder() < 0.1;
        rows.extend(equivalence_rows(
            &format!("equivalence_guided_{}", phi.label()),
            &rep,
            remainder_ok,
        ));
    }
    Ok(rows)
}

fn check_equivalence_unguided(opts: &SuiteOptions) -> Result<Vec<VerificationRow>> {
    let setup = EquivalenceSetup {
        problem: equivalence_problem(GuidanceChoice::None)?,
        s: 0.5,
        h_values: GAPS.to_vec(),
        n_paths: opts.budget.paths,
        seed: 2025,
        fault: opts.fault,
    };
    let rep = marginal_equivalence_test(&setup, &TestFunction::Constant)?;
    let mut rows = equivalence_rows("equivalence_unguided_constant", &rep, true);
    let gap = rep.endpoint_gap.unwrap_or(f64::NAN);
    rows.push(scalar_row(
        "equivalence_unguided_endpoint".into(),
        gap,
        0.0,
        0.0,
        gap <= 1e-10,
    ));
    Ok(rows)
}

fn check_reduction(opts: &SuiteOptions) -> Result<Vec<VerificationRow>> {
    let p = equivalence_problem(GuidanceChoice::None)?;
    let steps = 50;
    let settings = SamplerSettings::new(WeightScheme::Urge, 500, steps, 7);
    let mut ens = sampler::initial_ensemble(&p, &settings)?;
    let noise = rng::CounterNoise { seed: 7 };
    let dt = p.horizon() / steps as f64;
    let mut worst = 0.0f64;
    for k in 0..steps {
        ens.time = p.horizon() * k as f64 / steps as f64;
        let (after, inc) = em_step(&ens, &p, dt, &noise)?;
        let u = weights::urge_log_increment_signed(&ens, &inc, &after, &p, opts.fault.ito_sign())?;
        let f = weights::fk_steering_log_increment(&ens, &after, &p)?;
        for (a, b) in u.iter().zip(&f) {
            worst = worst.max((a - b).abs());
        }
        ens = after;
    }
    Ok(vec![scalar_row("unguided_urge_equals_fk".into(), worst, 0.0, 0.0, worst == 0.0)])
}

fn check_afdps_forms(_opts: &SuiteOptions) -> Result<Vec<VerificationRow>> {
    let p = equivalence_problem(GuidanceChoice::Reward)?;
    let mut rng = rng::stream(11, Domain::Verify, 2, 0);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let x = [rng::uniform01(&mut rng) * 12.0 - 6.0];
        let t = rng::uniform01(&mut rng);
        let a = weights::afdps_rate(&p, &x, t, AfdpsForm::Reduced)?;
        let b = weights::afdps_rate(&p, &x, t, AfdpsForm::General)?;
        worst = worst.max((a - b).abs() / a.abs().max(1.0));
    }
    Ok(vec![scalar_row("afdps_forms_agree".into(), worst, 0.0, 0.0, worst <= 1e-10)])
}

fn check_resampler(opts: &SuiteOptions) -> Result<Vec<VerificationRow>> {
    let w = [0.2, 0.3, 0.5];
    let trials = opts.budget.resample_trials;
    let mut rng = rng::stream(5, Domain::Verify, 3, 0);
    let uniforms: Vec<f64> = (0..trials).map(|_| rng::uniform01(&mut rng)).collect();
    let anc = resample::ancestors_from_uniforms(&w, &uniforms)?;
    let mut rows = Vec::new();
    for (k, wk) in w.iter().enumerate() {
        let freq = anc.iter().filter(|&&a| a == k).count() as f64 / trials as f64;
        let se = (wk * (1.0 - wk) / trials as f64).sqrt();
        rows.push(scalar_row(
            format!("resampler_offspring_{k}"),
            freq,
            *wk,
            se,
            (freq - wk).abs() <= 3.0 * se,
        ));
    }
    Ok(rows)
}

fn check_oracle_grid(_opts: &SuiteOptions) -> Result<Vec<VerificationRow>> {
    let p = unbiasedness_problem(Interp::Constant)?;
    let oracle = p.oracle()?;
    let (mean, cov) = oracle.moments();
    let rep = grid_moments_1d(&p.spec.target, &p.reward.base)?;
    let rel_m = (rep.0 - mean[0]).abs() / mean[0].abs().max(1e-12);
    let rel_v = (rep.1 - cov[(0, 0)]).abs() / cov[(0, 0)];
    Ok(vec![
        scalar_row("oracle_grid_mean".into(), rep.0, mean[0], 0.0, rel_m < 1e-4),
        scalar_row("oracle_grid_variance".into(), rep.1, cov[(0, 0)], 0.0, rel_v < 1e-4),
    ])
}

/// Mean and variance of `p_data e^{r}` in 1D by trapezoid quadrature on
/// 10⁵ nodes spanning ±10σ around the component means.
pub fn grid_moments_1d(target: &GmmTarget, reward: &QuadraticReward) -> Result<(f64, f64)> {
    if target.dim() != 1 || reward.dim() != 1 {
        return Err(Error::Dimension {
            expected: 1,
            found: target.dim(),
        });
    }
    let sd = target.variance().sqrt();
    let lo = target.means().iter().map(|m| m[0]).fold(f64::INFINITY, f64::min) - 10.0 * sd;
    let hi = target.means().iter().map(|m| m[0]).fold(f64::NEG_INFINITY, f64::max) + 10.0 * sd;
    let at = target.diffused(1.0, 0.0);
    let dens = |x: f64| (target.log_density(&[x], at) + reward.value(&[x])).exp();
    let n = 100_000;
    let z = trapezoid(lo, hi, n, dens);
    let m = trapezoid(lo, hi, n, |x| x * dens(x)) / z;
    let v = trapezoid(lo, hi, n, |x| (x - m) * (x - m) * dens(x)) / z;
    Ok((m, v))
}
