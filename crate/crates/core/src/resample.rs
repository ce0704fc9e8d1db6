//! Multinomial resampling by inverse CDF.

use ndarray::Array2;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::rng;

/// When to resample after a weight update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ResamplePolicy {
    EveryStep,
    /// Resample whenever ESS < threshold · N.
    EssThreshold { threshold: f64 },
    Never,
}

impl Default for ResamplePolicy {
    fn default() -> Self {
        ResamplePolicy::EssThreshold { threshold: 0.8 }
    }
}

impl ResamplePolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ResamplePolicy::EssThreshold { threshold } if !(threshold > 0.0 && threshold <= 1.0) => {
                Err(Error::InvalidParameter(format!(
                    "ESS threshold must lie in (0, 1], got {threshold}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn should_resample(&self, ess: f64, n: usize) -> bool {
        match *self {
            ResamplePolicy::EveryStep => true,
            ResamplePolicy::EssThreshold { threshold } => ess < threshold * n as f64,
            ResamplePolicy::Never => false,
        }
    }

    /// Value written to the `c` column of result files.
    pub fn label(&self) -> String {
        match *self {
            ResamplePolicy::EveryStep => "every".into(),
            ResamplePolicy::EssThreshold { threshold } => format!("{threshold}"),
            ResamplePolicy::Never => "never".into(),
        }
    }
}

/// Ancestor of each uniform `v`: the smallest k with Σ_{i≤k} ŵ_i > v.
pub fn ancestors_from_uniforms(weights: &[f64], uniforms: &[f64]) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::WeightCollapse("no particles to resample".into()));
    }
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        if !(w.is_finite() && *w >= 0.0) {
            return Err(Error::WeightCollapse(format!("invalid normalized weight {w}")));
        }
        acc += w;
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::WeightCollapse("weights sum to zero".into()));
    }
    let last = weights.len() - 1;
    Ok(uniforms
        .iter()
        .map(|&v| {
            let target = v * acc;
            // Strict comparison so a zero-weight particle is never picked at v = 0.
            cdf.partition_point(|&c| c <= target).min(last)
        })
        .collect())
}

/// Draw N ancestors i.i.d. from Categorical(ŵ), copy their states and reset
/// the log-weights to zero.
pub fn multinomial_resample<R: RngCore + ?Sized>(ens: &Ensemble, rng: &mut R) -> Result<Ensemble> {
    let uniforms: Vec<f64> = (0..ens.len()).map(|_| rng::uniform01(rng)).collect();
    resample_with_uniforms(ens, &uniforms)
}

pub fn resample_with_uniforms(ens: &Ensemble, uniforms: &[f64]) -> Result<Ensemble> {
    if uniforms.len() != ens.len() {
        return Err(Error::Dimension {
            expected: ens.len(),
            found: uniforms.len(),
        });
    }
    let w = ens.normalized_weights()?;
    let ancestors = ancestors_from_uniforms(&w, uniforms)?;
    let states = gather_rows(&ens.states, &ancestors);
    Ok(Ensemble {
        states,
        log_w: vec![0.0; ens.len()],
        time: ens.time,
        step_index: ens.step_index,
        resample_count: ens.resample_count + 1,
        lineage: ens.lineage,
    })
}

pub(crate) fn gather_rows(states: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let d = states.ncols();
    let src = states.as_slice().expect("standard layout");
    let mut data = Vec::with_capacity(rows.len() * d);
    for &a in rows {
        data.extend_from_slice(&src[a * d..(a + 1) * d]);
    }
    Array2::from_shape_vec((rows.len(), d), data).expect("shape matches")
}
