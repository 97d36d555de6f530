//! Exit codes, output formats and determinism of the `drlab` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn write_config(name: &str, body: &str) -> PathBuf {
    let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("cli_{name}.json"));
    std::fs::write(&path, body).unwrap();
    path
}

fn drlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drlab")).args(args).output().unwrap()
}

fn run_with(config: &Path, args: &[&str]) -> Output {
    let mut all = vec!["--config", config.to_str().unwrap()];
    all.extend_from_slice(args);
    drlab(&all)
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

const EXAMPLE: &str = r#"{"model": {"nu": {"2": 1.0}, "y0": {"2": 1.0}, "p": 0.2},
 "run": {"p_lo": 0.1, "p_hi": 0.3, "tol": 1e-3, "n_max": 30}}"#;

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(drlab(&["--help"]).status.code(), Some(0));
    assert_eq!(drlab(&["--version"]).status.code(), Some(0));
    assert!(stdout(&drlab(&["--help"])).contains("pc-bisect"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(drlab(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(drlab(&["iterate"]).status.code(), Some(2), "missing --config");
    let cfg = write_config("threads", EXAMPLE);
    assert_eq!(run_with(&cfg, &["--threads", "0", "iterate"]).status.code(), Some(2));
    let missing = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli_absent.json");
    assert_eq!(run_with(&missing, &["iterate"]).status.code(), Some(2));
}

#[test]
fn malformed_config_names_the_line() {
    let cfg = write_config("bad", "{\"model\": {\n \"nu\": {\"2\": 1.0},\n \"y0\": {\"2\": 1.0}, \"p\": 0.2,\n \"oops\": 1}}");
    let o = run_with(&cfg, &["iterate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
    let cfg = write_config("bad_p", r#"{"model": {"nu": {"2": 1.0}, "y0": {"2": 1.0}, "p": 1.5}}"#);
    assert_eq!(run_with(&cfg, &["iterate"]).status.code(), Some(2));
    let cfg = write_config("bad_y0", r#"{"model": {"nu": {"2": 1.0}, "y0": {"0": 1.0}, "p": 0.5}}"#);
    assert_eq!(run_with(&cfg, &["iterate"]).status.code(), Some(2));
}

#[test]
fn iterate_at_zero_p_gives_zero_means() {
    let cfg = write_config("p0", r#"{"model": {"nu": {"2": 1.0}, "y0": {"2": 1.0}, "p": 0.0}, "run": {"n_max": 5}}"#);
    let o = run_with(&cfg, &["iterate"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "n,mean_low,mean_high,zero_mass,support_size,dropped,F_low,F_high");
    let rows: Vec<Vec<f64>> =
        lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 6);
    for r in rows {
        assert_eq!(r[1], 0.0);
        assert_eq!(r[2], 0.0);
        assert_eq!(r[3], 1.0);
    }
}

#[test]
fn pc_bisect_json_brackets_one_fifth() {
    let cfg = write_config("example", EXAMPLE);
    let o = run_with(&cfg, &["--format", "json", "pc-bisect"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["subcommand"], "pc-bisect");
    let b = &v["result"]["bracket"];
    let (lo, hi) = (b["lo"].as_f64().unwrap(), b["hi"].as_f64().unwrap());
    assert!(lo <= 0.2 && 0.2 <= hi && hi - lo <= 1e-3, "[{lo}, {hi}]");
    assert_eq!(b["lo_certificate"]["verdict"], "subcritical");
    assert_eq!(b["hi_certificate"]["verdict"], "supercritical");
    assert_eq!(v["result"]["theorem_a"], 0.2);
}

#[test]
fn unestablished_bracket_exits_three() {
    // both ends supercritical
    let cfg = write_config(
        "no_bracket",
        r#"{"model": {"nu": {"2": 1.0}, "y0": {"2": 1.0}, "p": 0.3}, "run": {"p_lo": 0.25, "p_hi": 0.3}}"#,
    );
    let o = run_with(&cfg, &["pc-bisect"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn out_flag_writes_the_file() {
    let cfg = write_config("out", r#"{"model": {"nu": {"2": 1.0}, "y0": {"2": 1.0}, "p": 1.0}, "run": {"n_max": 4}}"#);
    let dest = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli_out.csv");
    let o = run_with(&cfg, &["--out", dest.to_str().unwrap(), "iterate"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
    let text = std::fs::read_to_string(&dest).unwrap();
    // X_n = 2^n + 1 at p = 1
    assert!(text.lines().nth(5).unwrap().starts_with("4,17.0,17.0,"), "{text}");
    let bad = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("no_such_dir").join("x.csv");
    assert_eq!(run_with(&cfg, &["--out", bad.to_str().unwrap(), "iterate"]).status.code(), Some(1));
}

#[test]
fn fit_chi_reports_target_one_half() {
    let cfg = write_config(
        "chi",
        r#"{"model": {"nu": {"2": 1.0}, "family": {"kind": "critical", "alpha": 0.0},
            "p_grid": [0.0078125, 0.015625, 0.03125, 0.0625]}}"#,
    );
    let o = run_with(&cfg, &["--format", "json", "fit-chi"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["result"]["target"], 0.5);
    assert!(matches!(o.status.code(), Some(0) | Some(3)));
}

#[test]
fn tree_check_output_ignores_thread_count() {
    let cfg = write_config(
        "tree",
        r#"{"model": {"nu": {"1": 0.5, "2": 0.5}, "y0": {"1": 0.5, "2": 0.5}, "p": 0.5},
            "run": {"trials": 5000, "n": 4, "b_grid": [0, 1]}}"#,
    );
    let one = run_with(&cfg, &["--seed", "11", "--threads", "1", "tree-check"]);
    let four = run_with(&cfg, &["--seed", "11", "--threads", "4", "tree-check"]);
    assert_eq!(one.status.code(), Some(0), "{}", stdout(&one));
    assert_eq!(one.stdout, four.stdout);
    let other = run_with(&cfg, &["--seed", "12", "--threads", "1", "tree-check"]);
    assert_ne!(one.stdout, other.stdout);
}
