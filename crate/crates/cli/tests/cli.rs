use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn elsem(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elsem"))
        .current_dir(dir)
        .env_remove("ELSEM_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn num(v: &Value) -> f64 {
    v.as_f64().unwrap_or_else(|| panic!("not a number: {v}"))
}

fn mask_volatile(v: &mut Value) {
    v["manifest"]["timestamp"] = Value::from(0);
    v["manifest"]["wall_time"] = Value::from(0);
}

#[test]
fn golden_fit_on_chain_fixture() {
    let out = elsem(
        &fixtures(),
        &[
            "fit",
            "--graph",
            "chain.graph",
            "--data",
            "chain.csv",
            "--method",
            "hybrid",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut v = stdout_json(&out);
    mask_volatile(&mut v);
    let text = serde_json::to_string_pretty(&v).unwrap() + "\n";
    let golden = fixtures().join("chain_fit.golden.json");
    if std::env::var_os("ELSEM_BLESS").is_some() {
        std::fs::write(&golden, &text).unwrap();
    }
    let expected = std::fs::read_to_string(&golden).expect("golden file is checked in");
    assert_eq!(text, expected);
}

#[test]
fn fit_json_round_trips_seventeen_digits() {
    let out = elsem(
        &fixtures(),
        &["fit", "--graph", "chain.graph", "--data", "chain.csv", "--method", "el"],
    );
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let entry = text.lines().find(|l| l.trim_start().starts_with("\"log_el\"")).unwrap();
    let digits: String = entry
        .split(':')
        .nth(1)
        .unwrap()
        .trim()
        .trim_end_matches(',')
        .to_string();
    let mantissa = digits
        .split('e')
        .next()
        .unwrap()
        .trim_start_matches('-')
        .replace('.', "");
    assert_eq!(mantissa.len(), 17, "{entry}");
}

#[test]
fn malformed_graph_reports_line_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.graph"), "nodes: X Y Z\nX -> Y\nY => Z\n").unwrap();
    std::fs::copy(fixtures().join("chain.csv"), dir.path().join("chain.csv")).unwrap();
    let out = elsem(
        dir.path(),
        &["fit", "--graph", "bad.graph", "--data", "chain.csv", "--method", "el"],
    );
    assert_eq!(out.status.code(), Some(1));
    let v = stdout_json(&out);
    assert_eq!(v["error"]["kind"], "graph");
    assert!(v["error"]["message"].as_str().unwrap().contains("line 3"), "{v}");
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let dir = fixtures();
    let bad_method = elsem(
        &dir,
        &["fit", "--graph", "chain.graph", "--data", "chain.csv", "--method", "ml"],
    );
    assert_eq!(bad_method.status.code(), Some(1));
    let missing = elsem(
        &dir,
        &["fit", "--graph", "chain.graph", "--data", "nope.csv", "--method", "el"],
    );
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(stdout_json(&missing)["error"]["kind"], "io");
    assert_eq!(elsem(&dir, &["--help"]).status.code(), Some(0));
    assert_eq!(elsem(&dir, &["--version"]).status.code(), Some(0));
}

#[test]
fn saturated_centered_fit_reaches_the_maximum() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sat.graph"), "nodes: X Y Z\nX -> Y\nX -> Z\nY -> Z\n").unwrap();
    std::fs::copy(fixtures().join("chain.csv"), dir.path().join("chain.csv")).unwrap();
    let out = elsem(
        dir.path(),
        &[
            "fit",
            "--graph",
            "sat.graph",
            "--data",
            "chain.csv",
            "--method",
            "el",
            "--center",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    let n = 60.0_f64;
    assert!((num(&v["log_el"]) + n * n.ln()).abs() < 1e-9, "{}", v["log_el"]);
}

#[test]
fn nested_test_with_identical_graphs_is_rejected() {
    let out = elsem(
        &fixtures(),
        &[
            "test",
            "--graph",
            "chain.graph",
            "--full-graph",
            "chain.graph",
            "--data",
            "chain.csv",
            "--method",
            "el",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stdout_json(&out)["error"]["kind"], "invalid_test");
}

#[test]
fn nested_one_edge_test_reports_chi2_one() {
    let out = elsem(
        &fixtures(),
        &[
            "test",
            "--graph",
            "chain.graph",
            "--full-graph",
            "chain_full.graph",
            "--data",
            "chain.csv",
            "--method",
            "el",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["dof"], 1);
    let (stat, p) = (num(&v["statistic"]), num(&v["p_value"]));
    assert!(stat >= 0.0 && (0.0..=1.0).contains(&p));
}

#[test]
fn precomputed_statistic_p_value() {
    let out = elsem(
        &fixtures(),
        &["test", "--statistic", "4.379", "--dof", "1", "--method", "el"],
    );
    assert_eq!(out.status.code(), Some(0));
    let p = num(&stdout_json(&out)["p_value"]);
    assert!((p - 0.0364).abs() < 5e-4, "{p}");
}

#[test]
fn point_test_at_the_estimate_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let fit_path = dir.path().join("fit.json");
    let fit = elsem(
        &fixtures(),
        &[
            "fit",
            "--graph",
            "chain.graph",
            "--data",
            "chain.csv",
            "--method",
            "hybrid",
            "--out",
            fit_path.to_str().unwrap(),
        ],
    );
    assert_eq!(fit.status.code(), Some(0));
    for method in ["el", "ael", "eel"] {
        let out = elsem(
            &fixtures(),
            &[
                "test",
                "--graph",
                "chain.graph",
                "--data",
                "chain.csv",
                "--method",
                method,
                "--theta0",
                fit_path.to_str().unwrap(),
            ],
        );
        assert_eq!(out.status.code(), Some(0), "{method}");
        let v = stdout_json(&out);
        assert!(num(&v["statistic"]) < 1e-6, "{method}: {v}");
        assert!(num(&v["p_value"]) > 0.999, "{method}");
    }
}

#[test]
fn theta0_with_wrong_support_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let theta0 = r#"{
        "B": {"rows": ["X", "Y", "Z"], "cols": ["X", "Y", "Z"],
              "values": [[0, 0, 0.3], [0.5, 0, 0], [0, 0.5, 0]]},
        "Omega": {"rows": ["X", "Y", "Z"], "cols": ["X", "Y", "Z"],
                  "values": [[1, 0, 0], [0, 1, 0], [0, 0, 1]]}
    }"#;
    let path = dir.path().join("theta0.json");
    std::fs::write(&path, theta0).unwrap();
    let out = elsem(
        &fixtures(),
        &[
            "test",
            "--graph",
            "chain.graph",
            "--data",
            "chain.csv",
            "--method",
            "el",
            "--theta0",
            path.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

const SMALL_CONFIG: &str = "m = 4\nn_directed = 3\nn_bidirected = 2\nn = 60\nreplications = 4\nseed = 11\n\
methods = hybrid, naive_el, cr_el, wald_mle\ntiming = false\n";

fn simulate(dir: &Path, command: &str, threads: &str, extra: &[&str]) -> Output {
    let mut args = vec![command, "--config", "exp.cfg", "--out-dir", "out", "--threads", threads];
    args.extend_from_slice(extra);
    elsem(dir, &args)
}

#[test]
fn simulate_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.cfg"), SMALL_CONFIG).unwrap();
    let one = simulate(dir.path(), "simulate", "1", &[]);
    assert_eq!(one.status.code(), Some(0), "{}", String::from_utf8_lossy(&one.stderr));
    let csv1 = std::fs::read(dir.path().join("out/records.csv")).unwrap();
    let eight = simulate(dir.path(), "simulate", "8", &[]);
    assert_eq!(eight.status.code(), Some(0));
    let csv8 = std::fs::read(dir.path().join("out/records.csv")).unwrap();
    assert_eq!(csv1, csv8);
    let text = String::from_utf8(csv1).unwrap();
    assert!(text.starts_with("rep,method,status,seconds,rel_err_sigma,covered\n"));
    assert_eq!(text.lines().count(), 1 + 4 * 4);
}

#[test]
fn rel_err_recomputes_from_estimate_dump() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.cfg"), SMALL_CONFIG).unwrap();
    let out = simulate(dir.path(), "simulate", "2", &["--dump-estimates"]);
    assert_eq!(out.status.code(), Some(0));
    let estimates = std::fs::read_to_string(dir.path().join("out/estimates.csv")).unwrap();
    let mut sums: BTreeMap<(String, String), (f64, f64)> = BTreeMap::new();
    for line in estimates.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (est, truth): (f64, f64) = (f[4].parse().unwrap(), f[5].parse().unwrap());
        let e = sums.entry((f[0].to_string(), f[1].to_string())).or_default();
        e.0 += (est - truth).powi(2);
        e.1 += truth * truth;
    }
    let records = std::fs::read_to_string(dir.path().join("out/records.csv")).unwrap();
    let mut checked = 0;
    for line in records.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[4] == "NA" {
            continue;
        }
        let reported: f64 = f[4].parse().unwrap();
        let (num, den) = sums[&(f[0].to_string(), f[1].to_string())];
        assert!((reported - num / den).abs() <= 1e-12 * (1.0 + reported), "{line}");
        checked += 1;
    }
    assert!(checked >= 4);
}

#[test]
fn summary_embeds_manifest_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.cfg"), SMALL_CONFIG).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_elsem"))
        .current_dir(dir.path())
        .env("ELSEM_SEED", "99")
        .args(["coverage", "--config", "exp.cfg", "--out-dir", "out", "--threads", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["manifest"]["seed"], 99);
    assert_eq!(summary["manifest"]["command"], "coverage");
    assert_eq!(summary["manifest"]["options"]["seed"], "99");
    let cov = summary["coverage"].as_array().unwrap();
    let labels: Vec<&str> = cov.iter().map(|c| c["method"].as_str().unwrap()).collect();
    assert_eq!(labels, ["cr_el", "wald_mle"]);
}

#[test]
fn coverage_requires_region_methods() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("exp.cfg"),
        "m = 3\nn_directed = 2\nn_bidirected = 1\nmethods = hybrid\n",
    )
    .unwrap();
    let out = simulate(dir.path(), "coverage", "1", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stdout_json(&out)["error"]["kind"], "config");
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.cfg"), "m = three\ncolour = blue\nn = 100\n").unwrap();
    let out = simulate(dir.path(), "simulate", "1", &[]);
    assert_eq!(out.status.code(), Some(1));
    let message = stdout_json(&out)["error"]["message"].as_str().unwrap().to_string();
    assert!(message.contains("three") && message.contains("colour"), "{message}");
}
