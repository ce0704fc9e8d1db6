//! Counter-based random streams.
//!
//! Every random draw in a run is addressed by `(seed, domain, index, sub)`.
//! The first three words are mixed into a ChaCha key and `sub` selects the
//! ChaCha stream, so a particle's noise at a given step never depends on how
//! the ensemble was split across threads.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Purpose tags separating independent uses of one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Noise = 2,
    Resample = 3,
    FinalResample = 4,
    Reference = 5,
    Projection = 6,
    TargetMeans = 7,
    Verify = 8,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for one `(seed, domain, index, sub)` address.
pub fn stream(seed: u64, domain: Domain, index: u64, sub: u64) -> ChaCha8Rng {
    let mut state = seed;
    let mut key = [0u8; 32];
    let words = [
        splitmix64(&mut state) ^ domain as u64,
        splitmix64(&mut state).wrapping_add(index.wrapping_mul(0xD6E8_FEB8_6659_FD93)),
        splitmix64(&mut state) ^ (domain as u64).rotate_left(32),
        splitmix64(&mut state) ^ index.rotate_left(17),
    ];
    let mut mix = words[0] ^ words[1];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        let v = w ^ splitmix64(&mut mix);
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(sub);
    rng
}

/// Uniform draw on `[0, 1)` using the top 53 bits; stable across `rand` versions.
pub fn uniform01<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn fill_standard_normal<R: RngCore + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}

/// Source of the standard-normal increments consumed by one propagation step.
pub trait NoiseSource: Sync {
    fn fill(&self, step: usize, particle: usize, out: &mut [f64]);
}

/// Production noise: one ChaCha stream per `(step, particle)`.
#[derive(Debug, Clone, Copy)]
pub struct CounterNoise {
    pub seed: u64,
}

impl NoiseSource for CounterNoise {
    fn fill(&self, step: usize, particle: usize, out: &mut [f64]) {
        let mut rng = stream(self.seed, Domain::Noise, step as u64, particle as u64);
        fill_standard_normal(&mut rng, out);
    }
}

/// Deterministic zero increments: Euler–Maruyama collapses to explicit Euler.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn fill(&self, _step: usize, _particle: usize, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Every coordinate of every particle receives the same constant.
#[derive(Debug, Clone, Copy)]
pub struct ConstantNoise(pub f64);

impl NoiseSource for ConstantNoise {
    fn fill(&self, _step: usize, _particle: usize, out: &mut [f64]) {
        out.fill(self.0);
    }
}

/// Replays a fixed N×d block of draws at every step (common random numbers).
#[derive(Debug, Clone)]
pub struct PresetNoise {
    pub xi: ndarray::Array2<f64>,
}

impl NoiseSource for PresetNoise {
    fn fill(&self, _step: usize, particle: usize, out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(self.xi.row(particle)) {
            *o = *v;
        }
    }
}
