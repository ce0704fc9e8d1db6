//! Reward-tilted sampling from diffusion models with path-space importance
//! weights and sequential Monte Carlo resampling.

pub mod config;
pub mod ensemble;
pub mod error;
pub mod gmm;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod problem;
pub mod resample;
pub mod reward;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tilt;
pub mod verify;
pub mod weights;

pub use ensemble::{Ensemble, StepIncrement};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use gmm::{GmmRecipe, GmmTarget};
pub use model::DiffusionSpec;
pub use problem::GuidedProblem;
pub use resample::ResamplePolicy;
pub use reward::{GuidanceChoice, Interp, QuadraticReward, ScheduledReward};
pub use sampler::{run_sampler, RunDiagnostics, SamplerSettings};
pub use schedule::NoiseSchedule;
pub use tilt::{tilt_posterior, TiltedGmm};
pub use weights::WeightScheme;
