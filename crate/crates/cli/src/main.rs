use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pathsmc::harness::{self, SweepAxis};
use pathsmc::sampler::FaultInjection;
use pathsmc::{RunConfig, WeightScheme};

/// Environment variable overriding the worker thread count.
const THREADS_VAR: &str = "PATHSMC_THREADS";

#[derive(Parser)]
#[command(name = "pathsmc", version, about = "Reward-tilted diffusion sampling benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and append a results row.
    Run {
        config: PathBuf,
        /// Override a config key, e.g. `--set reward.prec_diag=0.05`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "results.csv")]
        results: PathBuf,
        /// Per-step ESS and weight diagnostics.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Run a configuration across values of one axis.
    Sweep {
        config: PathBuf,
        /// One of `particles`, `steps`, `methods`.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long)]
        values: String,
        /// Methods crossed with a particles/steps axis.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<WeightScheme>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "results.csv")]
        results: PathBuf,
    },
    /// Run the numerical verification suite; exit code 0 iff every check passes.
    Verify {
        /// Only run checks whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value = "verification.csv")]
        out: PathBuf,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Write draws from the analytic posterior of a configuration.
    OracleSample {
        config: PathBuf,
        #[arg(short = 'n', long)]
        n: usize,
        #[arg(short = 'o', long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn report(err: &pathsmc::Error) {
    let mut obj = serde_json::json!({
        "error": err.kind(),
        "message": err.to_string(),
    });
    if let pathsmc::Error::Config { path, message } = err {
        obj["path"] = path.clone().into();
        obj["message"] = message.clone().into();
    }
    eprintln!("{obj}");
}

fn configure_threads() -> Result<(), pathsmc::Error> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        pathsmc::Error::InvalidParameter(format!("{THREADS_VAR} must be a positive integer, got `{raw}`"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| pathsmc::Error::InvalidParameter(e.to_string()))
}

fn run(cli: Cli) -> Result<bool, pathsmc::Error> {
    configure_threads()?;
    match cli.command {
        Command::Run {
            config,
            overrides,
            results,
            diagnostics,
        } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let row = harness::cmd_run(&cfg, &results, diagnostics.as_deref())?;
            println!(
                "{} seed={} N={} steps={} mmd={:.5} swd={:.5} mean_l2={:.5} cov_frob={:.5} runtime_ms={:.1} resamples={}",
                row.method, row.seed, row.n, row.steps, row.mmd, row.swd, row.mean_l2, row.cov_frob,
                row.runtime_ms, row.resamples
            );
            Ok(true)
        }
        Command::Sweep {
            config,
            axis,
            values,
            methods,
            seeds,
            overrides,
            results,
        } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let axis = SweepAxis::parse(&axis, &values)?;
            let rows = harness::cmd_sweep(&cfg, &axis, &methods, &seeds)?;
            harness::append_rows(&results, &rows)?;
            harness::write_rows(std::io::stdout().lock(), &rows)?;
            Ok(true)
        }
        Command::Verify {
            filter,
            out,
            inject_fault,
        } => {
            let fault = if inject_fault {
                FaultInjection::FlipUrgeIto
            } else {
                FaultInjection::None
            };
            let (rows, ok) = harness::cmd_verify(filter, &out, fault)?;
            for r in &rows {
                let h = r.h.map_or_else(|| "-".to_string(), |h| format!("{h:e}"));
                println!(
                    "{} {} h={} lhs={:.6} rhs={:.6} stderr={:.2e}",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.test_name,
                    h,
                    r.lhs,
                    r.rhs,
                    r.stderr
                );
            }
            if rows.is_empty() {
                eprintln!("no checks matched the filter");
            }
            Ok(ok)
        }
        Command::OracleSample {
            config,
            n,
            out,
            overrides,
        } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let file = std::fs::File::create(&out)?;
            harness::cmd_oracle_sample(&cfg, n, std::io::BufWriter::new(file))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            report(&e);
            ExitCode::from(2)
        }
    }
}
