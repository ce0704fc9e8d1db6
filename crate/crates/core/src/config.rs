//! TOML run configuration with strict keys and command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{GmmRecipe, GmmTarget};
use crate::metrics::MetricSettings;
use crate::model::DiffusionSpec;
use crate::problem::GuidedProblem;
use crate::resample::ResamplePolicy;
use crate::reward::{GuidanceChoice, Interp, QuadraticReward, ScheduledReward};
use crate::sampler::{InitMode, SamplerSettings};
use crate::schedule::NoiseSchedule;
use crate::weights::WeightScheme;

/// A number broadcast to every coordinate, or one value per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl ScalarOrVec {
    pub fn expand(&self, d: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            ScalarOrVec::Scalar(v) => Ok(vec![*v; d]),
            ScalarOrVec::Vector(v) if v.len() == d => Ok(v.clone()),
            ScalarOrVec::Vector(v) => Err(Error::Config {
                path: what.into(),
                message: format!("expected {d} entries, found {}", v.len()),
            }),
        }
    }
}

/// Data mixture: either the seeded random recipe or explicit means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub seed: u64,
    #[serde(rename = "K")]
    pub components: usize,
    pub d: usize,
    pub s2: f64,
    pub range: f64,
    /// When present, overrides `K`, `d`, `seed` and `range`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<Vec<f64>>>,
    /// Component weights; uniform when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl Default for TargetConfig {
    fn default() -> Self {
        let r = GmmRecipe::default();
        Self {
            seed: r.seed,
            components: r.components,
            d: r.dim,
            s2: r.variance,
            range: r.range,
            means: None,
            weights: None,
        }
    }
}

impl TargetConfig {
    pub fn build(&self) -> Result<GmmTarget> {
        match &self.means {
            Some(means) => {
                let k = means.len();
                let weights = self.weights.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
                GmmTarget::new(means.clone(), self.s2, weights)
            }
            None => {
                let recipe = GmmRecipe {
                    seed: self.seed,
                    components: self.components,
                    dim: self.d,
                    variance: self.s2,
                    range: self.range,
                };
                let target = recipe.build()?;
                match &self.weights {
                    Some(w) => GmmTarget::new(target.means().to_vec(), self.s2, w.clone()),
                    None => Ok(target),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub mu_r: ScalarOrVec,
    pub prec_diag: ScalarOrVec,
    pub interp: Interp,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            mu_r: ScalarOrVec::Scalar(0.0),
            prec_diag: ScalarOrVec::Scalar(0.002),
            interp: Interp::Constant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: WeightScheme,
    pub guidance: GuidanceChoice,
    pub particles: usize,
    pub steps: usize,
    pub seed: u64,
    pub init: InitMode,
    /// Weight the initial particles by `e^{r(x, 0)}`.
    pub initial_tilt: bool,
    pub resample: ResamplePolicy,
    pub schedule: NoiseSchedule,
    pub target: TargetConfig,
    pub reward: RewardConfig,
    pub metrics: MetricSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: WeightScheme::Urge,
            guidance: GuidanceChoice::Reward,
            particles: 8192,
            steps: 500,
            seed: 0,
            init: InitMode::Exact,
            initial_tilt: true,
            resample: ResamplePolicy::default(),
            schedule: NoiseSchedule::default(),
            target: TargetConfig::default(),
            reward: RewardConfig::default(),
            metrics: MetricSettings::default(),
        }
    }
}

impl RunConfig {
    /// Parse TOML text; errors name the offending key path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(parse_table(text)?)
    }

    /// Read a config file and apply `key=value` overrides in order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut table = parse_table(&text)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig =
            serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
                let path = e.path().to_string();
                Error::Config {
                    path: if path == "." { "<root>".into() } else { path },
                    message: e.into_inner().to_string(),
                }
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config {
            path: "<root>".into(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| Error::Config {
            path: path.into(),
            message,
        };
        if self.particles == 0 {
            return Err(bad("particles", "must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(bad("steps", "must be at least 1".into()));
        }
        self.resample
            .validate()
            .map_err(|e| bad("resample", e.to_string()))?;
        self.schedule
            .validate()
            .map_err(|e| bad("schedule", e.to_string()))?;
        self.metrics
            .validate()
            .map_err(|e| bad("metrics", e.to_string()))?;
        self.guidance
            .validate()
            .map_err(|e| bad("guidance", e.to_string()))?;
        Ok(())
    }

    /// Resample threshold as written in the `c` column.
    pub fn c_label(&self) -> String {
        self.resample.label()
    }

    pub fn problem(&self) -> Result<GuidedProblem> {
        let target = self.target.build()?;
        let d = target.dim();
        let mu = self.reward.mu_r.expand(d, "reward.mu_r")?;
        let prec = self.reward.prec_diag.expand(d, "reward.prec_diag")?;
        let base = QuadraticReward::diagonal(mu, &prec)?;
        let reward = ScheduledReward::new(base, self.reward.interp, self.schedule.horizon)?;
        let spec = DiffusionSpec::new(self.schedule, target)?;
        GuidedProblem::new(spec, reward, self.guidance)
    }

    pub fn sampler_settings(&self) -> SamplerSettings {
        SamplerSettings {
            scheme: self.method,
            particles: self.particles,
            steps: self.steps,
            policy: self.resample,
            init: self.init,
            initial_tilt: self.initial_tilt,
            seed: self.seed,
            fault: Default::default(),
        }
    }
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| Error::Config {
        path: "<file>".into(),
        message: e.to_string(),
    })
}

/// Parse the right-hand side of `key=value` as a TOML value, falling back to
/// a bare string so `method=urge` works without quotes.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set a dotted key such as `reward.prec_diag=0.05`, creating tables as needed.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config {
        path: assignment.into(),
        message: "override must look like key=value".into(),
    })?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config {
            path: key.into(),
            message: "empty key segment".into(),
        });
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config {
            path: key.into(),
            message: format!("`{p}` is not a table"),
        })?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}
