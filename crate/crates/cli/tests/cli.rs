use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fractalqos"));
    c.env("FRACTALQOS_LOG_LEVEL", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

const TRACE_SPEC: &str = r#"{"trace": {"length": 4096, "target_hurst": 0.8, "mean_rate": 100, "std_rate": 30, "seed": 1}}"#;

#[test]
fn generate_writes_one_row_per_slot_and_refuses_to_overwrite() {
    let dir = TempDir::new().unwrap();
    let spec = write(dir.path(), "spec.json", TRACE_SPEC);
    let out = dir.path().join("trace.csv");
    let o = run(&["generate", "--config", s(&spec), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next(), Some("slot,count,label"));
    assert_eq!(text.lines().count(), 4096 + 1);

    let o = run(&["generate", "--config", s(&spec), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--force"));
    let o = run(&["generate", "--config", s(&spec), "--out", s(&out), "--force", "--seed", "2"]);
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read_to_string(&out).unwrap(), text);
}

#[test]
fn schema_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let bad = write(dir.path(), "bad.json", "{\"trace\": {");
    assert_eq!(code(&run(&["generate", "--config", s(&bad)])), 2);
    let extra = write(
        dir.path(),
        "extra.json",
        r#"{"trace": {"length": 4096, "target_hurst": 0.8, "mean_rate": 1, "std_rate": 1, "seed": 1}, "colour": 3}"#,
    );
    let o = run(&["generate", "--config", s(&extra)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
    let bad_h = write(
        dir.path(),
        "h.json",
        r#"{"trace": {"length": 4096, "target_hurst": 1.2, "mean_rate": 1, "std_rate": 1, "seed": 1}}"#,
    );
    assert_eq!(code(&run(&["generate", "--config", s(&bad_h)])), 2);
}

#[test]
fn analyze_reports_hurst_and_security() {
    let dir = TempDir::new().unwrap();
    let spec = write(
        dir.path(),
        "spec.json",
        r#"{"trace": {"length": 65536, "target_hurst": 0.8, "mean_rate": 100, "std_rate": 30, "seed": 1},
            "attack": {"windows": [[8192, 8704], [40000, 40512]], "intensity_multiplier": 10}}"#,
    );
    let trace = dir.path().join("t.csv");
    assert_eq!(code(&run(&["generate", "--config", s(&spec), "--out", s(&trace)])), 0);
    let o = run(&["analyze", s(&trace)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["attack_slots"], 1024);
    let sec = &v["security"];
    let (tp, fn_) = (sec["p_tp"].as_f64().unwrap(), sec["p_fn"].as_f64().unwrap());
    assert!((tp + fn_ - 1.0).abs() < 1e-12);

    let clean = write(
        dir.path(),
        "clean.json",
        r#"{"trace": {"length": 65536, "target_hurst": 0.8, "mean_rate": 100, "std_rate": 30, "seed": 1}}"#,
    );
    let trace = dir.path().join("c.csv");
    assert_eq!(code(&run(&["generate", "--config", s(&clean), "--out", s(&trace)])), 0);
    let v: serde_json::Value = serde_json::from_slice(&run(&["analyze", s(&trace)]).stdout).unwrap();
    let h = v["analysis"]["hurst"].as_f64().unwrap();
    assert!((0.75..=0.85).contains(&h), "{h}");
}

#[test]
fn analyze_names_a_degenerate_trace() {
    let dir = TempDir::new().unwrap();
    let mut body = String::from("slot,count,label\n");
    for t in 0..4096 {
        body.push_str(&format!("{t},7,0\n"));
    }
    let trace = write(dir.path(), "flat.csv", &body);
    let o = run(&["analyze", s(&trace)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("degenerate trace"), "{}", stderr(&o));
}

const CALIB: &str = r#"{
  "classes": [{"id": 0, "max_loss": 0.01, "max_delay_ms": 50}],
  "grid": {"axes": {"hurst": [0.6, 0.9], "sigma_var": [0.0, 0.3], "rho": [0.5, 1.0]}, "trace_len": 4096, "seeds": 3}
}"#;

#[test]
fn calibrate_small_grid_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "calib.json", CALIB);
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    assert_eq!(code(&run(&["calibrate", "--config", s(&cfg), "--out", s(&a)])), 0);
    assert_eq!(code(&run(&["calibrate", "--config", s(&cfg), "--out", s(&b)])), 0);
    let (ta, tb) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    let v: serde_json::Value = serde_json::from_slice(&ta).unwrap();
    let cells = v["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 8);
    // ρ is the fastest axis; every ρ = 1 cell is saturated
    assert!(cells.iter().skip(1).step_by(2).all(|c| c.is_null()));
    assert!(cells.iter().step_by(2).all(|c| c.is_number()));
}

/// A three-node line with its own calibration, small enough to run in seconds.
fn line_scenario(dir: &Path) -> PathBuf {
    write(
        dir,
        "line.json",
        r#"{"nodes": [{"id": "A", "role": "host"}, {"id": "F", "role": "firewall"}, {"id": "C", "role": "host"}],
            "links": [{"from": "A", "to": "F", "capacity": 20, "cost": 1, "channels": [10, 10]},
                      {"from": "F", "to": "C", "capacity": 20, "cost": 1, "channels": [10, 10]}]}"#,
    );
    let calib = write(
        dir,
        "calib-config.json",
        r#"{"classes": [{"id": 0, "max_loss": 0.05, "max_delay_ms": 100}, {"id": 1, "max_loss": 0.05, "max_delay_ms": 200}],
            "grid": {"axes": {"hurst": [0.5, 0.7, 0.9], "sigma_var": [0.0, 0.3], "rho": [0.3, 0.6, 0.9]}, "trace_len": 4096, "seeds": 3}}"#,
    );
    let table = dir.join("calib.json");
    assert_eq!(code(&run(&["calibrate", "--config", s(&calib), "--out", s(&table)])), 0);
    write(
        dir,
        "scenario.json",
        r#"{"topology": "line.json", "calibration": "calib.json",
            "classes": [{"id": 0, "max_loss": 0.05, "max_delay_ms": 100}, {"id": 1, "max_loss": 0.05, "max_delay_ms": 200}],
            "flows": [
              {"id": "a", "source": "A", "dest": "C", "class": 0, "traffic": {"length": 4096, "target_hurst": 0.7, "mean_rate": 1, "std_rate": 0.2, "seed": 1}},
              {"id": "b", "source": "A", "dest": "C", "class": 1, "traffic": {"length": 4096, "target_hurst": 0.8, "mean_rate": 1, "std_rate": 0.2, "seed": 2},
               "attack": {"windows": [[1024, 1280]], "intensity_multiplier": 10}}
            ],
            "load_ratio": 0.5, "duration": 4096, "seed": 3}"#,
    )
}

const COLUMNS: &str = "mode,load,seed,channel_utilization,lost_data_pct,jitter_ms,p_sec_tp,p_sec_fp,alerts,resizes,reroutes,rejections,audit";

#[test]
fn simulate_emits_four_rows_and_side_files() {
    let dir = TempDir::new().unwrap();
    let scenario = line_scenario(dir.path());
    let out = dir.path().join("report.csv");
    let o = run(&["simulate", "--config", s(&scenario), "--out", s(&out), "--emit-plot"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], COLUMNS);
    let modes: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(modes, ["none", "mbccc", "rm", "both"]);
    assert!(lines[1..].iter().all(|l| l.ends_with(",pass")));
    for m in modes {
        assert!(dir.path().join(format!("report.{m}.events.jsonl")).exists());
        let rep: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(format!("report.{m}.json"))).unwrap()).unwrap();
        assert_eq!(rep["mode"], m);
    }
    let plot = fs::read_to_string(dir.path().join("report.plot.csv")).unwrap();
    assert_eq!(plot.lines().next(), Some("mode,load,runs,channel_utilization,lost_data_pct,jitter_ms,p_sec_tp"));
    assert_eq!(plot.lines().count(), 5);

    let again = run(&["simulate", "--config", s(&scenario), "--out", s(&out), "--emit-plot"]);
    assert_eq!(code(&again), 2);
    let stdout = run(&["simulate", "--config", s(&scenario), "--mode", "none", "--mode", "rm"]);
    assert_eq!(code(&stdout), 0);
    assert_eq!(String::from_utf8_lossy(&stdout.stdout).lines().count(), 3);
}

#[test]
fn simulate_without_table_fails_for_capacity_modes() {
    let dir = TempDir::new().unwrap();
    let scenario = line_scenario(dir.path());
    fs::remove_file(dir.path().join("calib.json")).unwrap();
    let o = run(&["simulate", "--config", s(&scenario), "--mode", "both"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("calibrate"), "{}", stderr(&o));
    assert_eq!(code(&run(&["simulate", "--config", s(&scenario), "--mode", "rm"])), 0);
}

#[test]
fn sweep_runs_the_grid() {
    let dir = TempDir::new().unwrap();
    line_scenario(dir.path());
    let sweep = write(
        dir.path(),
        "sweep.json",
        r#"{"scenario": "scenario.json", "loads": [0.3, 0.6], "seeds": 2, "modes": ["none", "both"]}"#,
    );
    let out = dir.path().join("sweep.csv");
    let o = run(&["sweep", "--config", s(&sweep), "--out", s(&out), "--emit-plot"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1 + 2 * 2 * 2);
    let plot = fs::read_to_string(dir.path().join("sweep.plot.csv")).unwrap();
    assert_eq!(plot.lines().count(), 1 + 4);
    assert!(plot.lines().skip(1).all(|l| l.split(',').nth(2) == Some("2")));

    let bad = write(dir.path(), "bad.json", r#"{"scenario": "scenario.json", "loads": [0.95], "seeds": 1}"#);
    assert_eq!(code(&run(&["sweep", "--config", s(&bad)])), 2);
}

#[test]
fn shipped_configs_parse() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.csv");
    let o = run(&[
        "simulate",
        "--config",
        s(&repo_file("scenarios/table1.json")),
        "--mode",
        "none",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 2);
}
