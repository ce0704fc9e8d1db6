use std::path::PathBuf;

use pathsmc::harness::{self, cmd_oracle_sample, cmd_run, cmd_sweep, read_rows, SweepAxis};
use pathsmc::{RunConfig, WeightScheme};

fn config(name: &str, overrides: &[&str]) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::load(&path, &overrides).unwrap()
}

fn parse_samples(bytes: &[u8]) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn run_appends_finite_metrics_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("results.csv");
    let diag = dir.path().join("diag.csv");
    let cfg = config("minimal_1d.toml", &[]);
    let row = cmd_run(&cfg, &results, Some(&diag)).unwrap();
    for v in [row.mmd, row.swd, row.mean_l2, row.cov_frob] {
        assert!(v.is_finite() && v >= 0.0);
    }
    assert_eq!((row.n, row.steps, row.method.as_str()), (2000, 200, "urge"));
    cmd_run(&cfg, &results, None).unwrap();
    let rows = read_rows(&results).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].same_outcome(&rows[1]));
    let text = std::fs::read_to_string(&diag).unwrap();
    assert_eq!(text.lines().count(), 201);
    assert!(text.starts_with("step,t,ess,min_logw,max_logw,resampled"));
}

#[test]
fn step_and_method_sweeps() {
    let cfg = config("minimal_1d.toml", &["particles=500"]);
    let rows = cmd_sweep(&cfg, &SweepAxis::Steps(vec![125, 500]), &[], &[0, 1]).unwrap();
    let steps: Vec<usize> = rows.iter().map(|r| r.steps).collect();
    assert_eq!(steps, [125, 125, 500, 500]);
    let axis = SweepAxis::Methods(WeightScheme::ALL.to_vec());
    let rows = cmd_sweep(&cfg, &axis, &[], &[]).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(names, ["urge", "fk_steering", "afdps", "pure_guidance"]);
    assert_eq!(rows[3].resamples, 0);
}

#[test]
fn more_particles_tighten_the_mmd() {
    let cfg = config("minimal_1d.toml", &[]);
    let rows = cmd_sweep(&cfg, &SweepAxis::Particles(vec![250, 4000]), &[], &[0, 1, 2]).unwrap();
    let avg = |n: usize| {
        let v: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.mmd).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(avg(4000) < avg(250), "{} vs {}", avg(4000), avg(250));
}

#[test]
fn oracle_sample_header_only_for_zero_draws() {
    let mut buf = Vec::new();
    cmd_oracle_sample(&config("minimal_1d.toml", &[]), 0, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().trim(), "x0");
}

#[test]
fn oracle_sample_matches_single_component_posterior() {
    // N(1, 0.5) tilted by N(3, 1/2): Σ̃ = 1/(2 + 2) = 0.25, μ̃ = 0.25·(2 + 6) = 2.
    let cfg = config(
        "minimal_1d.toml",
        &["target.means=[[1.0]]", "target.weights=[1.0]", "reward.mu_r=3.0", "reward.prec_diag=2.0"],
    );
    let mut buf = Vec::new();
    cmd_oracle_sample(&cfg, 1_000_000, &mut buf).unwrap();
    let (_, rows) = parse_samples(&buf);
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r[0]).sum::<f64>() / n;
    let var = rows.iter().map(|r| (r[0] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var - 0.25).abs() < 0.01 * 0.25, "variance {var}");
    assert!((mean - 2.0).abs() < 5e-3, "mean {mean}");
}

#[test]
fn oracle_sample_benchmark_shape() {
    let mut buf = Vec::new();
    cmd_oracle_sample(&config("benchmark.toml", &[]), 8192, &mut buf).unwrap();
    let (header, rows) = parse_samples(&buf);
    assert_eq!(header.len(), 30);
    assert_eq!(header[29], "x29");
    assert_eq!(rows.len(), 8192);
    assert!(rows.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn config_file_round_trip() {
    let cfg = config("benchmark.toml", &["method=\"afdps\"", "metrics.bandwidth={ fixed = 2.5 }"]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("saved.toml");
    std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    let back = RunConfig::load(&path, &[]).unwrap();
    assert_eq!(back.to_toml_string().unwrap(), cfg.to_toml_string().unwrap());
    assert_eq!(back.method, WeightScheme::Afdps);
    assert_eq!(harness::RESULT_COLUMNS.len(), 11);
}
