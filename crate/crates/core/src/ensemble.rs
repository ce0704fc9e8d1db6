use ndarray::Array2;

use crate::weights;

/// Seed of the run plus the number of propagation steps drawn from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngLineage {
    pub seed: u64,
    pub counter: u64,
}

/// N weighted particles at one generative time.
#[derive(Debug, Clone)]
pub struct Ensemble {
    /// N×d particle states.
    pub states: Array2<f64>,
    /// Log-weights accumulated since the last resample.
    pub log_w: Vec<f64>,
    /// Generative time of `states`.
    pub time: f64,
    pub step_index: usize,
    pub resample_count: usize,
    pub lineage: RngLineage,
}

impl Ensemble {
    pub fn new(states: Array2<f64>, time: f64, seed: u64) -> Self {
        let n = states.nrows();
        Self {
            states,
            log_w: vec![0.0; n],
            time,
            step_index: 0,
            resample_count: 0,
            lineage: RngLineage { seed, counter: 0 },
        }
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.states.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    /// Self-normalised weights ŵ.
    pub fn normalized_weights(&self) -> crate::Result<Vec<f64>> {
        weights::normalize(&self.log_w)
    }

    pub fn ess(&self) -> crate::Result<f64> {
        weights::ess(&self.log_w)
    }

    /// Weighted mean and covariance (normalised by total weight, no bias correction).
    pub fn weighted_moments(&self) -> crate::Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let w = self.normalized_weights()?;
        Ok(weighted_moments(&self.states, &w))
    }
}

pub fn weighted_moments(states: &Array2<f64>, w: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = states.ncols();
    let mut mean = vec![0.0; d];
    for (row, wi) in states.rows().into_iter().zip(w) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += wi * x;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    let mut c = vec![0.0; d];
    for (row, wi) in states.rows().into_iter().zip(w) {
        for ((cj, x), m) in c.iter_mut().zip(row).zip(&mean) {
            *cj = x - m;
        }
        for a in 0..d {
            let ca = wi * c[a];
            for b in a..d {
                cov[a][b] += ca * c[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[a][b] = cov[b][a];
        }
    }
    (mean, cov)
}

/// Record of one Euler–Maruyama step over `[t, t + dt]`.
#[derive(Debug, Clone)]
pub struct StepIncrement {
    pub t: f64,
    pub dt: f64,
    /// V(t).
    pub diffusion: f64,
    /// The exact N×d standard-normal draws consumed by the propagation.
    pub xi: Array2<f64>,
    /// ∇G at the interval start, as used in the guided drift.
    pub guidance_grad: Array2<f64>,
}
