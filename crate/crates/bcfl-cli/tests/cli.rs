//! End-to-end tests for the `bcfl` binary: exit codes, printed output,
//! emitted files, and the content-addressed run-directory contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

/// Run the binary with `--out-dir` pointed at a scratch directory.
fn bcfl(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bcfl"))
        .arg("--out-dir")
        .arg(out_dir)
        .args(args)
        .output()
        .expect("the binary should start")
}

/// Run the binary with a config file in addition to the output root.
fn bcfl_with_config(out_dir: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bcfl"))
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(out_dir)
        .args(args)
        .output()
        .expect("the binary should start")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("the process should exit normally")
}

/// Extract the directory printed on the `run-dir:` line.
fn run_dir(out: &Output) -> PathBuf {
    let text = stdout(out);
    let line = text
        .lines()
        .find(|l| l.starts_with("run-dir: "))
        .unwrap_or_else(|| panic!("no run-dir line in output:\n{text}"));
    PathBuf::from(line.trim_start_matches("run-dir: "))
}

/// The default configuration as a JSON value, for tests that mutate it.
fn default_config() -> Value {
    json!({
        "horizon": 15.0,
        "psi": 5.0,
        "budget_total": 1500.0,
        "mining": { "per_client": 5.0 },
        "xi": 0.1,
        "target_perf": 10.0,
        "perf_fn": { "kind": "identity" },
        "scenario": "complete",
        "seed": 0,
        "grid_points": 500,
        "clients": { "count": 50, "mu": 10.0, "rho": 0.01, "q_cap": 100.0 }
    })
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

#[test]
fn solve_prints_the_full_roster_and_operator_utility() {
    let tmp = TempDir::new().unwrap();
    let out = bcfl(tmp.path(), &["solve"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let rows = text.lines().filter(|l| l.ends_with("time,train,mine")).count();
    assert_eq!(rows, 50, "expected one row per client:\n{text}");
    assert!(text.contains("operator utility: 275.000000000000"), "{text}");
    // Every client nets the same surplus at the symmetric equilibrium.
    assert!(text.contains("4.993944571046"), "{text}");
    assert!(text.contains("39.528470752"), "training price column:\n{text}");
}

#[test]
fn solve_incomplete_information_pins_clients_to_zero_surplus() {
    let tmp = TempDir::new().unwrap();
    let out = bcfl(tmp.path(), &["solve", "--scenario", "incomplete"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    // The screening price leaves every client exactly at its outside option,
    // so the individual-rationality flag joins the binding list.
    let rows = text.lines().filter(|l| l.ends_with("time,train,ir")).count();
    assert_eq!(rows, 50, "expected all clients pinned to zero surplus:\n{text}");
    assert!(text.contains("0.000000000000"), "{text}");
    assert!(text.contains("0.000421466"), "mining price column:\n{text}");
    assert!(text.contains("0.006055429"), "mining reward column:\n{text}");
}

#[test]
fn solve_writes_equilibrium_json_when_asked() {
    let tmp = TempDir::new().unwrap();
    let json_path = tmp.path().join("equilibrium.json");
    let out = bcfl(tmp.path(), &["solve", "--output", json_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let parsed: Value = serde_json::from_str(&fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(parsed["clients"].as_array().unwrap().len(), 50);
    assert_eq!(parsed["scenario"], "complete");
    assert!((parsed["mo_utility"].as_f64().unwrap() - 275.0).abs() < 1e-9);
}

#[test]
fn config_missing_required_key_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = default_config();
    cfg.as_object_mut().unwrap().remove("horizon");
    let path = write_config(tmp.path(), &cfg);
    let out = bcfl_with_config(tmp.path(), &path, &["solve"]);
    assert_eq!(code(&out), 3, "stdout: {}", stdout(&out));
    assert!(stderr(&out).contains("horizon"), "the error should name the missing key: {}", stderr(&out));
}

#[test]
fn config_with_unknown_key_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = default_config();
    cfg.as_object_mut().unwrap().insert("bogus".into(), json!(1));
    let path = write_config(tmp.path(), &cfg);
    let out = bcfl_with_config(tmp.path(), &path, &["solve"]);
    assert_eq!(code(&out), 3, "stdout: {}", stdout(&out));
    assert!(stderr(&out).contains("bogus"), "the error should name the unknown key: {}", stderr(&out));
}

#[test]
fn infeasible_train_budget_exits_with_infeasibility_code() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = default_config();
    // 50 clients * 5 mining leaves a training pool of 1, i.e. 0.02 per
    // client -- below the feasibility floor rho*mu^3/T^2 ~ 0.044.
    cfg["budget_total"] = json!(251.0);
    let path = write_config(tmp.path(), &cfg);
    let out = bcfl_with_config(tmp.path(), &path, &["solve"]);
    assert_eq!(code(&out), 1, "stdout: {}", stdout(&out));
    let err = stderr(&out);
    assert!(err.contains("training reward bound"), "{err}");
    assert!(err.contains("client 0"), "{err}");
}

#[test]
fn sweep_writes_csv_meta_and_effective_config() {
    let tmp = TempDir::new().unwrap();
    let out = bcfl(tmp.path(), &["sweep", "--kind", "train_price", "--points", "11"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let dir = run_dir(&out);
    assert!(dir.join("effective_config.json").is_file());
    assert!(dir.join("train_price.meta").is_file());

    let csv = fs::read_to_string(dir.join("train_price.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(
        header,
        "scenario,swept_p_t,p_t,p_m,q_t,q_m,client_utility,mo_utility,time_binds,ir_binds,feasible,trial,seed"
    );
    assert_eq!(csv.lines().count(), 12, "header plus one row per grid point");

    let meta = fs::read_to_string(dir.join("train_price.meta")).unwrap();
    let field = |key: &str| -> usize {
        meta.lines()
            .find_map(|l| l.strip_prefix(&format!("{key}=")))
            .unwrap_or_else(|| panic!("{key} missing from meta:\n{meta}"))
            .parse()
            .unwrap()
    };
    assert_eq!(field("rows_total"), 11);
    assert_eq!(field("rows_total"), field("rows_feasible") + field("rows_infeasible"));
}

#[test]
fn sweep_rerun_from_effective_config_is_bitwise_identical() {
    let tmp = TempDir::new().unwrap();
    let first = bcfl(tmp.path(), &["sweep", "--kind", "demand", "--points", "5"]);
    assert_eq!(code(&first), 0, "stderr: {}", stderr(&first));
    let dir = run_dir(&first);
    let csv = fs::read(dir.join("demand.csv")).unwrap();
    let meta = fs::read(dir.join("demand.meta")).unwrap();
    let config = fs::read(dir.join("effective_config.json")).unwrap();

    // Feeding the recorded configuration back in must land in the same
    // content-addressed directory and reproduce the artifacts exactly.
    let again = bcfl_with_config(
        tmp.path(),
        &dir.join("effective_config.json"),
        &["sweep", "--kind", "demand", "--points", "5"],
    );
    assert_eq!(code(&again), 0, "stderr: {}", stderr(&again));
    assert_eq!(run_dir(&again), dir, "the run id should not change");
    assert_eq!(fs::read(dir.join("demand.csv")).unwrap(), csv);
    assert_eq!(fs::read(dir.join("demand.meta")).unwrap(), meta);
    assert_eq!(fs::read(dir.join("effective_config.json")).unwrap(), config);
}

#[test]
fn unknown_sweep_kind_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = bcfl(tmp.path(), &["sweep", "--kind", "bogus"]);
    assert_eq!(code(&out), 3);
    let err = stderr(&out);
    assert!(err.contains("unknown sweep kind"), "{err}");
    assert!(err.contains("train_price"), "the error should list valid kinds: {err}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = bcfl(tmp.path(), &["solve", "--bogus"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn help_prints_usage_and_exits_cleanly() {
    let tmp = TempDir::new().unwrap();
    let out = bcfl(tmp.path(), &["--help"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for sub in ["solve", "verify", "sweep", "tournament", "shapley", "audit-ic", "reproduce"] {
        assert!(text.contains(sub), "help should mention {sub}:\n{text}");
    }
}

#[test]
fn env_var_sets_the_output_root() {
    let tmp = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_bcfl"))
        .env("BCFL_OUT_DIR", tmp.path())
        .args(["sweep", "--kind", "blocksize", "--points", "5"])
        .output()
        .expect("the binary should start");
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let dir = run_dir(&out);
    assert!(dir.starts_with(tmp.path()), "run dir {dir:?} should live under the env root");
    assert!(dir.join("blocksize.csv").is_file());
}

#[test]
fn tournament_plays_every_strategy_pair() {
    let tmp = TempDir::new().unwrap();
    let out = bcfl(tmp.path(), &["tournament", "--trials", "3", "--scenario", "complete", "--seed", "7"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    for pair in ["(optimal, optimal)", "(optimal, random)", "(random, optimal)", "(random, random)"] {
        assert!(text.contains(pair), "missing stats line for {pair}:\n{text}");
    }
    let csv = fs::read_to_string(run_dir(&out).join("strategy_tournament.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13, "header plus 4 pairs x 3 trials");
}

#[test]
fn shapley_exact_handles_a_small_roster() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = default_config();
    cfg["budget_total"] = json!(200.0);
    cfg["mining"] = json!({ "per_client": 1.0 });
    cfg["clients"] = json!((0..8)
        .map(|_| json!({ "mu": 10.0, "rho": 0.01, "q_cap": 100.0 }))
        .collect::<Vec<_>>());
    let path = write_config(tmp.path(), &cfg);
    let out = bcfl_with_config(tmp.path(), &path, &["shapley", "--exact"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("efficiency:"), "{}", stdout(&out));

    let csv = fs::read_to_string(run_dir(&out).join("shapley.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "id,mu,performance,shapley,share,train_bound,std_error"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 8);
    for row in rows {
        assert!(row.ends_with(','), "exact mode leaves std_error empty: {row}");
    }
}

#[test]
fn shapley_exact_refuses_oversized_rosters() {
    let tmp = TempDir::new().unwrap();
    let out = bcfl(tmp.path(), &["shapley", "--exact"]);
    assert_eq!(code(&out), 3, "stdout: {}", stdout(&out));
    assert!(stderr(&out).contains("exact enumeration limit"), "{}", stderr(&out));
}

#[test]
fn verify_reports_honest_gaps_and_passing_certificates() {
    let tmp = TempDir::new().unwrap();
    let out = bcfl(tmp.path(), &["verify", "--points", "40", "--scenario", "complete"]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));

    let report: Value =
        serde_json::from_str(&fs::read_to_string(run_dir(&out).join("verify_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["pass"], false);
    let checks = report["checks"].as_array().unwrap();
    let find = |name: &str| -> &Value {
        checks
            .iter()
            .find(|c| c["name"] == name)
            .unwrap_or_else(|| panic!("missing check {name}"))
    };
    // The brute-force searches beat the closed forms (documented gaps)
    // while the first-order certificates hold at machine precision.
    assert_eq!(find("stage2_grid_gap/complete/client_0")["pass"], false);
    assert_eq!(find("stage1_grid_gap/complete/client_0")["pass"], false);
    assert_eq!(find("kkt_stage2/complete/client_0")["pass"], true);
    assert_eq!(find("kkt_stage1/complete/client_0")["pass"], true);
}

#[test]
fn verify_flags_hand_entered_prices() {
    let tmp = TempDir::new().unwrap();
    let out = bcfl(
        tmp.path(),
        &["verify", "--points", "40", "--scenario", "complete", "--prices-override", "50,0.5"],
    );
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(run_dir(&out).join("verify_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["prices_override"], json!([50.0, 0.5]));
    let checks = report["checks"].as_array().unwrap();
    let kkt1 = checks
        .iter()
        .find(|c| c["name"] == "kkt_stage1/complete/client_0")
        .expect("stage-1 certificate check");
    // Hand-entered prices fail the bound-repayment conditions, the
    // negative control for the certificate machinery.
    assert_eq!(kkt1["pass"], false);
    assert!(kkt1["value"].as_f64().unwrap() > 1e-2);
}

#[test]
fn verify_nested_search_reports_empty_feasible_set() {
    let tmp = TempDir::new().unwrap();
    let out = bcfl(
        tmp.path(),
        &["verify", "--points", "20", "--scenario", "complete", "--nested-grid", "20"],
    );
    assert_eq!(code(&out), 1, "stdout: {}", stdout(&out));
    assert!(stderr(&out).contains("empty feasible set"), "{}", stderr(&out));
}

#[test]
fn audit_ic_finds_no_profitable_misreport() {
    let tmp = TempDir::new().unwrap();
    let out = bcfl(tmp.path(), &["audit-ic", "--grid", "9:11:1", "--samples", "2000"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("best gain"), "{text}");
    assert!(run_dir(&out).join("ic_audit.csv").is_file());
}

#[test]
fn out_dir_under_a_file_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let blocker = tmp.path().join("blocked");
    fs::write(&blocker, "not a directory").unwrap();
    let out = bcfl(&blocker, &["sweep", "--kind", "blocksize", "--points", "5"]);
    assert_eq!(code(&out), 1, "stdout: {}", stdout(&out));
    assert!(stderr(&out).contains("blocked"), "the error should name the path: {}", stderr(&out));
}

#[test]
fn reproduce_writes_all_tables_and_a_summary() {
    let tmp = TempDir::new().unwrap();
    let out = bcfl(tmp.path(), &["reproduce", "--seed", "0"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let dir = run_dir(&out);
    for name in [
        "strategy_tournament.csv",
        "demand_blocksize.csv",
        "demand.csv",
        "price_grid.csv",
        "train_price.csv",
        "blocksize.csv",
    ] {
        assert!(dir.join(name).is_file(), "missing {name}");
    }
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 0);
    assert_eq!(summary["files"].as_array().unwrap().len(), 6);
    assert!(summary["dominance"].is_object() || summary["dominance"].is_array());
}
