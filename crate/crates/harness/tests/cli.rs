use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bilevel_core::neumann::build_schedule;
use bilevel_core::trace::{read_rows, write_rows, CSV_HEADER};
use serde_json::Value;
use tempfile::TempDir;

fn bilevel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bilevel"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn run_config(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    bilevel(&args)
}

fn summary(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

const COMPARE: &str = r#"{
  "problem": {"family": "quadratic", "p": 4, "q": 6, "kappa": 5, "noise_sigma": 0.5, "seed": 2},
  "runs": [
    {"label": "aid", "algorithm": "aid", "K": 30, "D": 8, "N": 3, "record_wall_time": false},
    {"label": "itd", "algorithm": "itd", "K": 30, "D": 8, "record_wall_time": false},
    {"label": "sto", "algorithm": "stocbio", "K": 30, "D": 8, "Q": 5, "S": 4, "Df": 4, "Dg": 4, "B": 4,
     "beta": 0.02, "seed": 9, "record_wall_time": false}
  ]
}"#;

#[test]
fn zero_iterations_give_single_row_traces() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "k0.json",
        r#"{"problem": {"family": "quadratic", "p": 3, "q": 3, "kappa": 2},
            "runs": [{"label": "aid", "algorithm": "aid", "K": 0, "D": 3, "N": 2},
                     {"label": "itd", "algorithm": "itd", "K": 0, "D": 3}]}"#,
    );
    let out = dir.path().join("out");
    let res = run_config(&cfg, &out, &[]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for label in ["aid", "itd"] {
        let text = fs::read_to_string(out.join(format!("{label}.csv"))).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 2);
    }
    let s = summary(&out);
    assert_eq!(s["runs"][0]["iterations"], 0);
    assert_eq!(s["runs"][0]["final_x"], serde_json::json!([0.0, 0.0, 0.0]));
    assert!(out.join("problem.json").exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "cmp.json", COMPARE);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run_config(&cfg, &a, &[]).status.success());
    assert!(run_config(&cfg, &b, &["--parallel", "3"]).status.success());
    for label in ["aid", "itd", "sto"] {
        let name = format!("{label}.csv");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name}");
    }
}

#[test]
fn seed_override_changes_stochastic_runs_only() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "cmp.json", COMPARE);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run_config(&cfg, &a, &["--seed", "9"]).status.success());
    assert!(run_config(&cfg, &b, &["--seed", "10"]).status.success());
    let read = |d: &Path, l: &str| fs::read(d.join(format!("{l}.csv"))).unwrap();
    assert_eq!(read(&a, "aid"), read(&b, "aid"));
    assert_ne!(read(&a, "sto"), read(&b, "sto"));
}

#[test]
fn summary_shows_aid_cheaper_than_itd() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "cmp.json", COMPARE);
    let out = dir.path().join("out");
    assert!(run_config(&cfg, &out, &[]).status.success());
    let s = summary(&out);
    let runs = s["runs"].as_array().unwrap();
    let get = |label: &str, key: &str| {
        runs.iter().find(|r| r["label"] == label).unwrap()["counters"][key].as_u64().unwrap()
    };
    assert!(get("aid", "jv_g") < get("itd", "jv_g"));
    assert!(get("aid", "hv_g") < get("itd", "hv_g"));
    assert_eq!(get("itd", "jv_g"), 30 * 8);
    for r in runs {
        assert!(r["theory_bounds"]["L_Phi"].as_f64().unwrap() > 0.0);
        assert_eq!(r["status"], "completed");
    }
    let sto = runs.iter().find(|r| r["label"] == "sto").unwrap();
    let eta = 0.5 / s["constants"]["L"].as_f64().unwrap();
    let expected = build_schedule(5, 4, eta, s["constants"]["mu"].as_f64().unwrap()).unwrap().total();
    assert_eq!(sto["neumann_schedule"]["total"].as_u64().unwrap() as usize, expected);
}

#[test]
fn emitted_csv_round_trips() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "cmp.json", COMPARE);
    let out = dir.path().join("out");
    assert!(run_config(&cfg, &out, &[]).status.success());
    for label in ["aid", "itd", "sto"] {
        let bytes = fs::read(out.join(format!("{label}.csv"))).unwrap();
        let rows = read_rows(bytes.as_slice()).unwrap();
        assert_eq!(rows.len(), 31);
        let mut again = Vec::new();
        write_rows(&rows, &mut again).unwrap();
        assert_eq!(again, bytes);
    }
}

#[test]
fn config_errors_exit_2_naming_the_key() {
    let dir = TempDir::new().unwrap();
    let cases = [
        (r#"{"problem": {"family": "quadratic", "p": 3, "q": 3}, "runs": [{"label": "a", "algorithm": "aid", "K": 1, "D": 1}]}"#, "runs[0].N"),
        (r#"{"problem": {"family": "quadratic", "p": 3, "q": 3}, "runs": [{"label": "a", "algorithm": "itd", "K": 1, "D": 1, "betta": 1}]}"#, "betta"),
        (r#"{"problem": {"family": "quadratic", "p": 3, "q": 3, "kappa": 0.1}, "runs": [{"label": "a", "algorithm": "itd", "K": 1, "D": 1}]}"#, "kappa"),
        (r#"{"problem": {"family": "quadratic", "p": 3, "q": 3}, "runs": [{"label": "a", "algorithm": "stocbio", "K": 1, "D": 1, "Q": 2, "S": 1, "Df": 1, "Dg": 1}]}"#, "B"),
    ];
    for (i, (body, key)) in cases.iter().enumerate() {
        let cfg = write_config(dir.path(), &format!("bad{i}.json"), body);
        let res = run_config(&cfg, &dir.path().join("out"), &[]);
        assert_eq!(res.status.code(), Some(2), "case {i}");
        let err = String::from_utf8_lossy(&res.stderr);
        assert!(err.contains(key), "case {i}: {err}");
    }
    let res = bilevel(&["run", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn divergence_exits_3_and_keeps_partial_traces() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "div.json",
        r#"{"problem": {"family": "quadratic", "p": 3, "q": 4, "kappa": 10, "seed": 7},
            "runs": [{"label": "ok", "algorithm": "aid", "K": 5, "D": 3, "N": 2},
                     {"label": "bad", "algorithm": "itd", "K": 50, "D": 300, "alpha": 0.25, "y0": [1, 1, 1, 1]}]}"#,
    );
    let out = dir.path().join("out");
    let res = run_config(&cfg, &out, &[]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("bad"));
    let s = summary(&out);
    assert_eq!(s["runs"][0]["status"], "completed");
    assert_eq!(s["runs"][1]["status"], "diverged");
    assert!(out.join("ok.csv").exists());
    let partial = read_rows(fs::File::open(out.join("bad.csv")).unwrap()).unwrap();
    assert!(partial.len() < 51);
}

#[test]
fn gradcheck_passes_and_fails_with_named_checks() {
    let dir = TempDir::new().unwrap();
    let good = write_config(
        dir.path(),
        "good.json",
        r#"{"problem": {"family": "quadratic", "p": 5, "q": 5, "kappa": 10, "seed": 3},
            "gradcheck": {"checks": [{"method": "aid", "D": 50, "N": 50, "max_rel_err": 1e-6},
                                     {"method": "itd", "D": 0, "max_rel_err": 10}]}}"#,
    );
    let res = bilevel(&["gradcheck", "--config", good.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stdout));
    let table = String::from_utf8_lossy(&res.stdout);
    assert!(table.contains("AID-BiO") && table.contains("vs fd"));

    let bad = write_config(
        dir.path(),
        "bad.json",
        r#"{"problem": {"family": "quadratic", "p": 5, "q": 5, "kappa": 10, "seed": 3},
            "gradcheck": {"checks": [{"method": "aid", "D": 50, "N": 50, "max_rel_err": 1e-6},
                                     {"method": "itd", "D": 1, "y0": [0, 0, 0, 0, 0], "max_rel_err": 1e-9}]}}"#,
    );
    let res = bilevel(&["gradcheck", "--config", bad.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("ITD-BiO D=1"), "{err}");
    assert!(!err.contains("AID-BiO"), "{err}");
}

#[test]
fn report_embeds_runs_bounds_and_criteria() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "report.json",
        r#"{"problem": {"family": "quadratic", "p": 3, "q": 4, "kappa": 3, "seed": 1},
            "runs": [{"label": "sto", "algorithm": "stocbio", "K": 5, "D": 2, "Q": 6, "S": 2, "Df": 2, "Dg": 2, "B": 3}],
            "report": {"criteria": [1, 10]},
            "gradcheck": {"checks": [{"method": "aid", "D": 0, "N": 4, "max_rel_err": 1e-8}]}}"#,
    );
    let out = dir.path().join("out");
    let res = bilevel(&["report", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(res.status.success(), "{stdout}");
    assert!(stdout.contains("criterion  1") && stdout.contains("criterion 10"));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["criteria"].as_array().unwrap().len(), 2);
    let run = &report["runs"]["runs"][0];
    assert!(run["theory_bounds"]["nu"].is_number());
    let sizes: Vec<u64> = run["neumann_schedule"]["sizes"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(sizes.iter().sum::<u64>(), run["neumann_schedule"]["total"].as_u64().unwrap());
    assert_eq!(report["gradcheck"]["rows"][0]["passed"], true);
}
