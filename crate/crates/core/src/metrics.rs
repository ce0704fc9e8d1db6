//! Sample-based distances to the analytic target.

use ndarray::{Array2, ArrayView2, Axis};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{weighted_moments, Ensemble};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tilt::TiltedGmm;

/// Points used to estimate the median pairwise distance.
pub const MEDIAN_SUBSAMPLE: usize = 2000;

/// RBF bandwidth `h` in `k(a, b) = exp(−‖a − b‖² / 2h²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the pooled samples.
    #[default]
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    pub bandwidth: Bandwidth,
    pub n_proj: usize,
    pub n_ref: usize,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
            n_proj: 128,
            n_ref: 8192,
        }
    }
}

impl MetricSettings {
    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(h) = self.bandwidth {
            check_bandwidth(h)?;
        }
        if self.n_proj == 0 {
            return Err(Error::InvalidParameter("n_proj must be at least 1".into()));
        }
        if self.n_ref < 2 {
            return Err(Error::InvalidParameter("n_ref must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mmd: f64,
    pub swd: f64,
    pub mean_l2: f64,
    pub cov_frob: f64,
    pub n_samples: usize,
    pub seed: u64,
}

fn check_bandwidth(h: f64) -> Result<()> {
    if h.is_finite() && h > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("bandwidth must be positive, got {h}")))
    }
}

fn check_pair(x: &ArrayView2<f64>, y: &ArrayView2<f64>, min_rows: usize) -> Result<()> {
    if x.ncols() != y.ncols() {
        return Err(Error::Dimension {
            expected: x.ncols(),
            found: y.ncols(),
        });
    }
    if x.nrows() < min_rows || y.nrows() < min_rows {
        return Err(Error::InvalidParameter(format!(
            "need at least {min_rows} samples per set, got {} and {}",
            x.nrows(),
            y.nrows()
        )));
    }
    let finite = |a: &ArrayView2<f64>| a.iter().all(|v| v.is_finite());
    if !finite(x) || !finite(y) {
        return Err(Error::NonFiniteInput("metric samples"));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Evenly strided row indices, `k` out of `n`.
fn strided(n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    (0..k).map(|j| j * n / k).collect()
}

/// Median pairwise Euclidean distance over at most [`MEDIAN_SUBSAMPLE`]
/// pooled points.
pub fn median_bandwidth(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    check_pair(&x, &y, 1)?;
    let half = MEDIAN_SUBSAMPLE / 2;
    let rows: Vec<Vec<f64>> = strided(x.nrows(), half)
        .into_iter()
        .map(|i| x.row(i).to_vec())
        .chain(strided(y.nrows(), half).into_iter().map(|i| y.row(i).to_vec()))
        .collect();
    let mut d2: Vec<f64> = (0..rows.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let rows = &rows;
            (i + 1..rows.len()).map(move |j| sq_dist(&rows[i], &rows[j]))
        })
        .collect();
    if d2.is_empty() {
        return Err(Error::InvalidParameter("median bandwidth needs two points".into()));
    }
    let mid = d2.len() / 2;
    let (_, m, _) = d2.select_nth_unstable_by(mid, f64::total_cmp);
    let h = m.sqrt();
    if h > 0.0 {
        Ok(h)
    } else {
        Err(Error::InvalidParameter(
            "median pairwise distance is zero; pass a fixed bandwidth".into(),
        ))
    }
}

/// Mean of `k(a_i, b_j)` over all pairs; each row sums in a fixed order and
/// rows are reduced in index order, so the value does not depend on threads.
fn mean_kernel(a: ArrayView2<f64>, b: ArrayView2<f64>, inv_2h2: f64) -> f64 {
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let d = a.ncols();
    let bs = b.as_slice().expect("standard layout");
    let rows: Vec<f64> = a
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|ra| {
            let ra = ra.as_slice().expect("standard layout");
            bs.chunks_exact(d.max(1))
                .map(|rb| (-sq_dist(ra, rb) * inv_2h2).exp())
                .sum::<f64>()
        })
        .collect();
    rows.iter().sum::<f64>() / (a.nrows() * b.nrows()) as f64
}

/// Biased (V-statistic) RBF maximum mean discrepancy.
pub fn mmd_rbf(x: ArrayView2<f64>, y: ArrayView2<f64>, bandwidth: Bandwidth) -> Result<f64> {
    check_pair(&x, &y, 2)?;
    let h = match bandwidth {
        Bandwidth::Fixed(h) => {
            check_bandwidth(h)?;
            h
        }
        Bandwidth::Median => median_bandwidth(x, y)?,
    };
    let c = 1.0 / (2.0 * h * h);
    let kxx = mean_kernel(x, x, c);
    let kyy = mean_kernel(y, y, c);
    let kxy = mean_kernel(x, y, c);
    Ok((kxx + kyy - 2.0 * kxy).max(0.0).sqrt())
}

/// `n_proj` uniform directions on the unit sphere, one per row.
pub fn random_directions<R: RngCore + ?Sized>(d: usize, n_proj: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::zeros((n_proj, d));
    for mut row in out.rows_mut() {
        let row = row.as_slice_mut().expect("standard layout");
        loop {
            rng::fill_standard_normal(rng, row);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                row.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
    }
    out
}

/// Sliced 2-Wasserstein distance with freshly drawn directions.
pub fn sliced_wasserstein<R: RngCore + ?Sized>(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    n_proj: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_proj == 0 {
        return Err(Error::InvalidParameter("n_proj must be at least 1".into()));
    }
    let dirs = random_directions(x.ncols(), n_proj, rng);
    sliced_wasserstein_with(x, y, dirs.view())
}

/// Sliced 2-Wasserstein distance along the given unit directions. The larger
/// set is thinned to the size of the smaller one by even striding.
pub fn sliced_wasserstein_with(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    dirs: ArrayView2<f64>,
) -> Result<f64> {
    check_pair(&x, &y, 1)?;
    if dirs.ncols() != x.ncols() {
        return Err(Error::Dimension {
            expected: x.ncols(),
            found: dirs.ncols(),
        });
    }
    if dirs.nrows() == 0 {
        return Err(Error::InvalidParameter("need at least one projection".into()));
    }
    let n = x.nrows().min(y.nrows());
    let xs = x.select(Axis(0), &strided(x.nrows(), n));
    let ys = y.select(Axis(0), &strided(y.nrows(), n));
    let per_dir: Vec<f64> = dirs
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|theta| {
            let mut px = xs.dot(&theta).to_vec();
            let mut py = ys.dot(&theta).to_vec();
            px.sort_unstable_by(f64::total_cmp);
            py.sort_unstable_by(f64::total_cmp);
            px.iter().zip(&py).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64
        })
        .collect();
    Ok((per_dir.iter().sum::<f64>() / per_dir.len() as f64).sqrt())
}

/// `(‖mean − μ̃‖₂, ‖cov − Σ̃_mix‖_F)` for weighted samples against the oracle's
/// mixture moments.
pub fn moment_errors(states: &Array2<f64>, weights: &[f64], oracle: &TiltedGmm) -> Result<(f64, f64)> {
    if states.ncols() != oracle.dim() {
        return Err(Error::Dimension {
            expected: oracle.dim(),
            found: states.ncols(),
        });
    }
    if weights.len() != states.nrows() {
        return Err(Error::Dimension {
            expected: states.nrows(),
            found: weights.len(),
        });
    }
    let (mean, cov) = weighted_moments(states, weights);
    let (om, oc) = oracle.moments();
    let mean_l2 = mean
        .iter()
        .zip(om.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let d = oracle.dim();
    let mut frob = 0.0;
    for i in 0..d {
        for j in 0..d {
            let e = cov[i][j] - oc[(i, j)];
            frob += e * e;
        }
    }
    Ok((mean_l2, frob.sqrt()))
}

/// All four metrics for a terminal ensemble. Moment errors use the weights;
/// MMD and SWD use one final multinomial resample. The reference cloud and
/// projections are drawn from `seed` so every method sees the same ones.
pub fn evaluate(
    ens: &Ensemble,
    oracle: &TiltedGmm,
    settings: &MetricSettings,
    seed: u64,
) -> Result<MetricsReport> {
    settings.validate()?;
    let w = ens.normalized_weights()?;
    let (mean_l2, cov_frob) = moment_errors(&ens.states, &w, oracle)?;
    let cloud = crate::sampler::unweighted_states(ens, seed)?;
    let mut ref_rng = rng::stream(seed, Domain::Reference, 0, 0);
    let reference = oracle.sample(settings.n_ref, &mut ref_rng);
    let mmd = mmd_rbf(cloud.view(), reference.view(), settings.bandwidth)?;
    let mut proj_rng = rng::stream(seed, Domain::Projection, 0, 0);
    let swd = sliced_wasserstein(cloud.view(), reference.view(), settings.n_proj, &mut proj_rng)?;
    Ok(MetricsReport {
        mmd,
        swd,
        mean_l2,
        cov_frob,
        n_samples: ens.len(),
        seed,
    })
}
