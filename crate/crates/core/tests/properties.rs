use pathsmc::gmm::GmmTarget;
use pathsmc::model::DiffusionSpec;
use pathsmc::resample::ancestors_from_uniforms;
use pathsmc::reward::{Interp, QuadraticReward, ScheduledReward};
use pathsmc::rng::{self, Domain};
use pathsmc::schedule::NoiseSchedule;
use pathsmc::{tilt_posterior, weights};
use proptest::prelude::*;

fn mixture_2d() -> impl Strategy<Value = GmmTarget> {
    (
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..4),
        0.2f64..4.0,
    )
        .prop_flat_map(|(means, var)| {
            let k = means.len();
            (Just(means), Just(var), prop::collection::vec(0.1f64..1.0, k))
        })
        .prop_map(|(means, var, w)| {
            let s: f64 = w.iter().sum();
            GmmTarget::new(means, var, w.iter().map(|v| v / s).collect()).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn score_matches_finite_difference(
        target in mixture_2d(),
        x in prop::collection::vec(-6.0f64..6.0, 2),
        t in 0.0f64..1.0,
    ) {
        let spec = DiffusionSpec::new(NoiseSchedule::default(), target).unwrap();
        let s = spec.marginal_score(&x, t).unwrap();
        let eps = 1e-5;
        for j in 0..2 {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[j] += eps;
            lo[j] -= eps;
            let fd = (spec.log_marginal(&hi, t).unwrap() - spec.log_marginal(&lo, t).unwrap()) / (2.0 * eps);
            prop_assert!((fd - s[j]).abs() < 1e-5 * (1.0 + s[j].abs()), "fd {} vs {}", fd, s[j]);
        }
    }

    #[test]
    fn reward_derivatives_match_finite_difference(
        mu in prop::collection::vec(-3.0f64..3.0, 3),
        diag in prop::collection::vec(0.1f64..3.0, 3),
        x in prop::collection::vec(-4.0f64..4.0, 3),
        t in 0.01f64..0.99,
    ) {
        let base = QuadraticReward::diagonal(mu, &diag).unwrap();
        let r = ScheduledReward::new(base, Interp::Linear, 1.0).unwrap();
        let e = r.eval(&x, t).unwrap();
        let eps = 1e-5;
        let mut lap = 0.0;
        for j in 0..3 {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[j] += eps;
            lo[j] -= eps;
            let (fh, fl) = (r.value(&hi, t).unwrap(), r.value(&lo, t).unwrap());
            prop_assert!(((fh - fl) / (2.0 * eps) - e.grad[j]).abs() < 1e-6);
            lap += (fh - 2.0 * e.value + fl) / (eps * eps);
        }
        prop_assert!((lap - e.lap).abs() < 1e-3 * (1.0 + e.lap.abs()));
        let dt = (r.value(&x, t + eps).unwrap() - r.value(&x, t - eps).unwrap()) / (2.0 * eps);
        prop_assert!((dt - e.dt).abs() < 1e-6);
    }

    #[test]
    fn ess_lies_between_one_and_n(lw in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let e = weights::ess(&lw).unwrap();
        prop_assert!(e >= 1.0 && e <= lw.len() as f64);
    }

    #[test]
    fn tilted_weights_form_a_distribution(
        target in mixture_2d(),
        mu_r in prop::collection::vec(-4.0f64..4.0, 2),
        prec in 0.01f64..5.0,
    ) {
        let post = tilt_posterior(&target, &QuadraticReward::isotropic(mu_r, prec).unwrap()).unwrap();
        let s: f64 = post.weights().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(post.weights().iter().all(|w| *w >= 0.0));
        // Tilting by a concave reward can only shrink the covariance.
        prop_assert!(post.cov()[(0, 0)] <= target.variance());
    }

    #[test]
    fn ancestors_are_valid_and_avoid_zero_weights(
        raw in prop::collection::vec(0.0f64..1.0, 2..12),
        seed in any::<u64>(),
    ) {
        prop_assume!(raw.iter().any(|w| *w > 0.0));
        let s: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let mut g = rng::stream(seed, Domain::Verify, 0, 0);
        let u: Vec<f64> = (0..64).map(|_| rng::uniform01(&mut g)).collect();
        let a = ancestors_from_uniforms(&w, &u).unwrap();
        prop_assert!(a.iter().all(|&k| k < w.len() && w[k] > 0.0));
    }
}

#[test]
fn resampling_preserves_weighted_functionals() {
    // E[Σ φ(ancestor_i)] / N = Σ ŵ_i φ(i) over many independent resamples.
    let w = [0.05, 0.4, 0.1, 0.3, 0.15];
    let phi = [1.0, -2.0, 0.5, 3.0, 0.0];
    let expect: f64 = w.iter().zip(&phi).map(|(a, b)| a * b).sum();
    let trials = 100_000;
    let n = w.len();
    let mut g = rng::stream(17, Domain::Verify, 0, 0);
    let mut vals = Vec::with_capacity(trials);
    for _ in 0..trials {
        let u: Vec<f64> = (0..n).map(|_| rng::uniform01(&mut g)).collect();
        let a = ancestors_from_uniforms(&w, &u).unwrap();
        vals.push(a.iter().map(|&k| phi[k]).sum::<f64>() / n as f64);
    }
    let mean = vals.iter().sum::<f64>() / trials as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    let z = (mean - expect) / (var / trials as f64).sqrt();
    assert!(z.abs() < 4.0, "z = {z}");
}
