//! Experiment orchestration behind the command-line subcommands.

use std::fs::OpenOptions;
use std::io::{Seek, SeekFrom, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::metrics;
use crate::rng::{self, Domain};
use crate::sampler::{self, FaultInjection, RunDiagnostics};
use crate::verify::{self, SuiteOptions, VerificationRow};
use crate::weights::WeightScheme;

/// Offset between the run seed and the seed of the metric reference cloud.
pub const METRIC_SEED_OFFSET: u64 = 0x5EED;

pub const RESULT_COLUMNS: [&str; 11] = [
    "method",
    "seed",
    "N",
    "steps",
    "c",
    "mmd",
    "swd",
    "mean_l2",
    "cov_frob",
    "runtime_ms",
    "resamples",
];

/// One line of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub seed: u64,
    #[serde(rename = "N")]
    pub n: usize,
    pub steps: usize,
    pub c: String,
    pub mmd: f64,
    pub swd: f64,
    pub mean_l2: f64,
    pub cov_frob: f64,
    pub runtime_ms: f64,
    pub resamples: usize,
}

impl ResultRow {
    /// Equality on every column except the wall-clock runtime.
    pub fn same_outcome(&self, other: &ResultRow) -> bool {
        let mut a = self.clone();
        a.runtime_ms = other.runtime_ms;
        a == *other
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub row: ResultRow,
    pub diagnostics: RunDiagnostics,
    pub ensemble: Ensemble,
}

/// Sample, then score against the analytic posterior. Runtime covers the
/// sampler only.
pub fn execute(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let problem = cfg.problem()?;
    let settings = cfg.sampler_settings();
    let start = Instant::now();
    let (ens, diag) = sampler::run_sampler(&problem, &settings)?;
    let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
    let oracle = problem.oracle()?;
    let report = metrics::evaluate(
        &ens,
        &oracle,
        &cfg.metrics,
        cfg.seed.wrapping_add(METRIC_SEED_OFFSET),
    )?;
    let row = ResultRow {
        method: cfg.method.name().into(),
        seed: cfg.seed,
        n: cfg.particles,
        steps: cfg.steps,
        c: cfg.c_label(),
        mmd: report.mmd,
        swd: report.swd,
        mean_l2: report.mean_l2,
        cov_frob: report.cov_frob,
        runtime_ms,
        resamples: diag.resample_events,
    };
    Ok(RunOutcome {
        row,
        diagnostics: diag,
        ensemble: ens,
    })
}

/// Append rows to a results file under an exclusive lock, writing the header
/// only when the file is empty.
pub fn append_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    file.lock()?;
    let empty = file.seek(SeekFrom::End(0))? == 0;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&file);
    if empty {
        w.write_record(RESULT_COLUMNS)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    drop(w);
    file.unlock()?;
    Ok(())
}

pub fn write_rows<W: Write>(out: W, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(RESULT_COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// `run`: one configuration, one results row and optional diagnostics file.
pub fn cmd_run(
    cfg: &RunConfig,
    results: &Path,
    diagnostics: Option<&Path>,
) -> Result<ResultRow> {
    let out = execute(cfg)?;
    append_rows(results, std::slice::from_ref(&out.row))?;
    if let Some(p) = diagnostics {
        out.diagnostics.write_csv(std::fs::File::create(p)?)?;
    }
    Ok(out.row)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    Particles(Vec<usize>),
    Steps(Vec<usize>),
    Methods(Vec<WeightScheme>),
}

impl SweepAxis {
    /// Build from an axis name and comma-separated values.
    pub fn parse(axis: &str, values: &str) -> Result<Self> {
        let items: Vec<&str> = values
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        if items.is_empty() {
            return Err(Error::InvalidParameter("sweep needs at least one value".into()));
        }
        let counts = || -> Result<Vec<usize>> {
            items
                .iter()
                .map(|s| match s.parse::<usize>() {
                    Ok(v) if v > 0 => Ok(v),
                    _ => Err(Error::InvalidParameter(format!(
                        "sweep value `{s}` must be a positive integer"
                    ))),
                })
                .collect()
        };
        match axis {
            "particles" => Ok(SweepAxis::Particles(counts()?)),
            "steps" => Ok(SweepAxis::Steps(counts()?)),
            "methods" => Ok(SweepAxis::Methods(
                items.iter().map(|s| s.parse()).collect::<Result<_>>()?,
            )),
            other => Err(Error::InvalidParameter(format!(
                "unknown sweep axis `{other}` (expected particles, steps or methods)"
            ))),
        }
    }
}

/// `sweep`: one row per axis value × method × seed. When the axis is not
/// `methods`, `methods` lists the methods to cross with it (empty means the
/// config's own method).
pub fn cmd_sweep(
    base: &RunConfig,
    axis: &SweepAxis,
    methods: &[WeightScheme],
    seeds: &[u64],
) -> Result<Vec<ResultRow>> {
    let methods: Vec<WeightScheme> = match axis {
        SweepAxis::Methods(m) => m.clone(),
        _ if methods.is_empty() => vec![base.method],
        _ => methods.to_vec(),
    };
    let seeds: Vec<u64> = if seeds.is_empty() {
        vec![base.seed]
    } else {
        seeds.to_vec()
    };
    let points: Vec<RunConfig> = match axis {
        SweepAxis::Particles(v) => v
            .iter()
            .map(|&n| RunConfig {
                particles: n,
                ..base.clone()
            })
            .collect(),
        SweepAxis::Steps(v) => v
            .iter()
            .map(|&k| RunConfig {
                steps: k,
                ..base.clone()
            })
            .collect(),
        SweepAxis::Methods(_) => vec![base.clone()],
    };
    let mut rows = Vec::new();
    for point in &points {
        for &method in &methods {
            for &seed in &seeds {
                let cfg = RunConfig {
                    method,
                    seed,
                    ..point.clone()
                };
                rows.push(execute(&cfg)?.row);
            }
        }
    }
    Ok(rows)
}

/// `verify`: run the check suite, write the verification CSV and report
/// whether every row passed.
pub fn cmd_verify(
    filter: Option<String>,
    out: &Path,
    fault: FaultInjection,
) -> Result<(Vec<VerificationRow>, bool)> {
    let opts = SuiteOptions {
        filter,
        fault,
        ..Default::default()
    };
    let rows = verify::run_suite(&opts);
    verify::write_verification_csv(&rows, std::fs::File::create(out)?)?;
    let ok = !rows.is_empty() && rows.iter().all(|r| r.pass);
    Ok((rows, ok))
}

/// `oracle-sample`: `n` draws from the analytic posterior, one per row.
pub fn cmd_oracle_sample<W: Write>(cfg: &RunConfig, n: usize, out: W) -> Result<()> {
    let oracle = cfg.problem()?.oracle()?;
    let mut rng = rng::stream(cfg.seed, Domain::Reference, 1, 0);
    let xs = oracle.sample(n, &mut rng);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record((0..oracle.dim()).map(|j| format!("x{j}")))?;
    for row in xs.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
