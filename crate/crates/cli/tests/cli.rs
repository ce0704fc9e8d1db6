use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn pathsmc(dir: &Path, args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pathsmc"));
    cmd.current_dir(dir).args(args).env_remove("PATHSMC_THREADS");
    if let Some(t) = threads {
        cmd.env("PATHSMC_THREADS", t);
    }
    cmd.output().expect("spawn pathsmc")
}

fn minimal() -> String {
    configs().join("minimal_1d.toml").display().to_string()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stderr `{text}` is not JSON: {e}"))
}

#[test]
fn run_writes_header_and_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = pathsmc(dir.path(), &["run", &minimal(), "--set", "particles=500"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "method,seed,N,steps,c,mmd,swd,mean_l2,cov_frob,runtime_ms,resamples"
    );
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("urge,1,500,200,"));
}

#[test]
fn unknown_key_is_a_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pathsmc(dir.path(), &["run", &minimal(), "--set", "reward.prec=1.0"], None);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "config");
    assert_eq!(err["path"], "reward.prec");
    assert!(!dir.path().join("results.csv").exists());
}

#[test]
fn bad_thread_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = pathsmc(dir.path(), &["run", &minimal()], Some("0"));
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "invalid_parameter");
}

#[test]
fn thread_count_leaves_results_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    for t in ["1", "3"] {
        let name = format!("r{t}.csv");
        let out = pathsmc(
            dir.path(),
            &["run", &minimal(), "--set", "particles=700", "--results", &name],
            Some(t),
        );
        assert!(out.status.success());
        let text = std::fs::read_to_string(dir.path().join(&name)).unwrap();
        let line = text.lines().nth(1).unwrap().to_string();
        // Every column but runtime_ms must match.
        let mut cols: Vec<String> = line.split(',').map(String::from).collect();
        cols.remove(9);
        rows.push(cols);
    }
    assert_eq!(rows[0], rows[1]);
}

#[test]
fn verify_filter_passes_and_fault_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let ok = pathsmc(dir.path(), &["verify", "--filter", "afdps_forms"], None);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let csv = std::fs::read_to_string(dir.path().join("verification.csv")).unwrap();
    assert!(csv.starts_with("test_name,h,lhs,rhs,stderr,pass"));

    let bad = pathsmc(
        dir.path(),
        &["verify", "--filter", "equivalence_guided", "--inject-fault"],
        None,
    );
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn method_sweep_and_oracle_sample() {
    let dir = tempfile::tempdir().unwrap();
    let out = pathsmc(
        dir.path(),
        &["sweep", &minimal(), "--axis", "methods", "--values", "urge,pure_guidance", "--set", "particles=300"],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);

    let out = pathsmc(dir.path(), &["oracle-sample", &minimal(), "-n", "50", "-o", "s.csv"], None);
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("x0"));
    assert_eq!(text.lines().count(), 51);
}

#[test]
fn bad_sweep_axis_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pathsmc(dir.path(), &["sweep", &minimal(), "--axis", "seeds", "--values", "1"], None);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "invalid_parameter");
}
