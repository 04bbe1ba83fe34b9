mod common;

use std::path::Path;

use common::{casemix, stderr, write_fixture};
use serde_json::Value;

fn run_ok(args: &[&str]) {
    let o = casemix(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_emits_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_fixture(dir.path(), "");
    let out = dir.path().join("out");
    run_ok(&["pipeline", "--config", s(&cfg), "--out", s(&out)]);

    for name in ["effects.json", "recon_cov.json", "pseudo.json", "pseudo_1.csv", "pseudo_2.csv", "sigma.json", "posterior.json", "draws.csv", "forest.csv"] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    for name in ["effects.json", "recon_cov.json", "pseudo.json", "sigma.json", "posterior.json"] {
        let v = json(&out.join(name));
        assert_eq!(v["schema_version"], 1, "{name}");
        assert_eq!(v["invocation"]["seed"], 7, "{name}");
        assert!(v["invocation"]["args"].as_array().unwrap().iter().any(|a| a == "pipeline"));
    }

    // Three IPD sources, each standardized to all five populations.
    let effects = json(&out.join("effects.json"));
    let est = effects["payload"]["estimates"].as_array().unwrap();
    assert_eq!(est.len(), 15);
    assert_eq!(est.iter().filter(|e| e["j"] == e["k"]).count(), 3);
    assert_eq!(effects["payload"]["scale"], "log-rr");
    for e in est {
        let (mu1, mu0) = (e["mu1"].as_f64().unwrap(), e["mu0"].as_f64().unwrap());
        assert!((e["estimate"].as_f64().unwrap() - (mu1.ln() - mu0.ln())).abs() < 1e-12);
    }

    // Table mask: two aggregated diagonals plus three full columns.
    let sigma = json(&out.join("sigma.json"));
    let entries = sigma["payload"]["table"]["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 17);
    for e in entries {
        let (j, k) = (e["j"].as_u64().unwrap(), e["k"].as_u64().unwrap());
        assert!(k >= 3 || j == k);
    }

    let forest = std::fs::read_to_string(out.join("forest.csv")).unwrap();
    let lines: Vec<&str> = forest.lines().collect();
    assert_eq!(lines[0], "row,j,k,study_j,study_k,estimate,lower,upper");
    assert_eq!(lines.len(), 1 + 17 + 5 + 1);
    assert!(lines.last().unwrap().starts_with("overall"));

    let pseudo = json(&out.join("pseudo.json"));
    for r in pseudo["payload"]["reports"].as_array().unwrap() {
        assert!(r["mean_error"].as_f64().unwrap() < 1e-10);
        assert!(r["cov_error"].as_f64().unwrap() < 1e-8);
    }
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_fixture(dir.path(), "");
    let out = dir.path().join("out");
    let args = ["pipeline", "--config", s(&cfg), "--out", s(&out), "--seed", "42"];
    run_ok(&args);
    let names = ["effects.json", "sigma.json", "posterior.json", "draws.csv", "forest.csv", "pseudo_1.csv"];
    let first: Vec<Vec<u8>> = names.iter().map(|n| std::fs::read(out.join(n)).unwrap()).collect();
    run_ok(&args);
    for (n, bytes) in names.iter().zip(first) {
        assert_eq!(std::fs::read(out.join(n)).unwrap(), bytes, "{n} changed");
    }
}

#[test]
fn steps_chain_and_variance_routes_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_fixture(dir.path(), "scale = \"rd\"");
    let out = dir.path().join("out");
    for step in ["standardize", "recon-cov", "pseudo-ipd", "variance"] {
        run_ok(&[step, "--config", s(&cfg), "--out", s(&out)]);
    }
    let by_moments = json(&out.join("sigma.json"));

    let rows_cfg = write_fixture(dir.path(), "scale = \"rd\"\nvariance = \"pseudo_rows\"");
    run_ok(&["variance", "--config", s(&rows_cfg), "--out", s(&out)]);
    let by_rows = json(&out.join("sigma.json"));
    assert_eq!(by_rows["payload"]["method"], "pseudo_rows");

    let flat = |v: &Value| -> Vec<f64> {
        v["payload"]["table"]["sigma"]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|r| r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect::<Vec<_>>())
            .collect()
    };
    let (a, b) = (flat(&by_moments), flat(&by_rows));
    assert_eq!(a.len(), 17 * 17);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-8 * (1.0 + x.abs()), "{x} vs {y}");
    }
}

#[test]
fn meta_without_sigma_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_fixture(dir.path(), "");
    let out = dir.path().join("empty");
    let o = casemix(&["meta", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("sigma.json") && err.contains("casemix variance"), "{err}");
}

#[test]
fn infeasible_target_fails_unless_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_fixture(dir.path(), "");
    // Push study 1's mean age beyond every participant's age.
    let path = dir.path().join("agg_1.json");
    let mut agg = json(&path);
    for arm in agg["arms"].as_array_mut().unwrap() {
        let m = arm["mean_l"][1].as_f64().unwrap();
        let r2 = arm["raw2_l"][1].as_f64().unwrap();
        arm["mean_l"][1] = Value::from(m + 100.0);
        arm["raw2_l"][1] = Value::from(r2 - m * m + (m + 100.0).powi(2));
    }
    std::fs::write(&path, serde_json::to_string(&agg).unwrap()).unwrap();
    let out = dir.path().join("out");

    let o = casemix(&["standardize", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    run_ok(&["standardize", "--config", s(&cfg), "--out", s(&out), "--skip-infeasible"]);
    let skipped = json(&out.join("effects.json"))["payload"]["skipped"].clone();
    let skipped = skipped.as_array().unwrap();
    assert_eq!(skipped.len(), 3);
    assert!(skipped.iter().all(|p| p["j"] == 1));
}

#[test]
fn invalid_inputs_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = casemix(&["standardize", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--config"));

    let cfg = write_fixture(dir.path(), "");
    let o = casemix(&["standardize", "--config", s(&cfg), "--out", s(dir.path()), "--truncation", "1.5"]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "ipd = [\"nope.csv\"]\n").unwrap();
    let o = casemix(&["standardize", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.csv"));
}

#[test]
fn simulate_writes_table_rows() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "simulate", "--setting", "1", "--n", "400", "--reps", "6", "--oracle-draws", "200000",
        "--seed", "3", "--out", s(dir.path()),
    ]);
    let csv = std::fs::read_to_string(dir.path().join("sim_report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("Setting,Parameter,n,Truth,Bias,var,var_hat_median,MSE,Coverage"));
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,\"theta(1,2)\",400") || lines[1].starts_with("1,theta(1,2),400"));
    let report = json(&dir.path().join("sim_report.json"));
    assert_eq!(report["payload"]["config"]["replicates"], 6);
}
