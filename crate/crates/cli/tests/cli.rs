use std::path::Path;
use std::process::{Command, Output};

fn streamfed(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_streamfed"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("STREAMFED_THREADS", t),
        None => cmd.env_remove("STREAMFED_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path.display().to_string()
}

fn small_experiment(out: &Path) -> String {
    format!(
        r#"{{
            "scenario": {{"historical_fresh": {{"m": 3, "m_hist": 2, "n_hist_over_n": 0.25, "fresh_rates": [2]}}}},
            "dataset": {{"synthetic": {{"dim": 4}}}},
            "strategies": ["uniform", "historical"],
            "train": {{"rounds": 6, "local_steps": 2, "batch_size": 2, "eta": 0.1}},
            "eval": {{"validation_size": 60, "test_size": 60}},
            "output_dir": {:?},
            "seeds": [1, 2]
        }}"#,
        out.display().to_string()
    )
}

#[test]
fn run_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &small_experiment(&out));
    let run = streamfed(&["run", &cfg], Some("2"));
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(out.join("summary.json").exists());
    assert!(out.join("historical/seed_2/metrics.csv").exists());
    let verify = streamfed(&["verify", out.to_str().unwrap()], None);
    assert_eq!(verify.status.code(), Some(0), "{}", String::from_utf8_lossy(&verify.stdout));

    std::fs::write(out.join("uniform/seed_1/metrics.csv"), "round,train_loss,test_loss,test_acc,sigma_hat_sq_partial,q_t\n").unwrap();
    let verify = streamfed(&["verify", out.to_str().unwrap()], None);
    assert_eq!(verify.status.code(), Some(4));
}

#[test]
fn tune_writes_selection() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &small_experiment(&out).replace("\"seeds\"", "\"tune\": {\"grid\": [0.01, 0.1]}, \"seeds\""));
    let tune = streamfed(&["tune", &cfg], None);
    assert_eq!(tune.status.code(), Some(0), "{}", String::from_utf8_lossy(&tune.stderr));
    let text = std::fs::read_to_string(out.join("tune.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(value["selected"]["uniform"].is_f64());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &small_experiment(&out).replace("\"seeds\"", "\"surprise\": 1, \"seeds\""));
    let run = streamfed(&["run", &cfg], None);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("surprise"));

    let missing = streamfed(&["run", "/nonexistent/config.json"], None);
    assert_eq!(missing.status.code(), Some(2));

    let cfg = write_config(dir.path(), &small_experiment(&out));
    let threads = streamfed(&["run", &cfg], Some("zero"));
    assert_eq!(threads.status.code(), Some(2));

    let odd = streamfed(&["adversarial", "--T", "11"], None);
    assert_eq!(odd.status.code(), Some(2));
}

#[test]
fn bounds_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("curves");
    let cfg = write_config(dir.path(), &format!(r#"{{"points": 5, "output_dir": {:?}}}"#, out.display().to_string()));
    let run = streamfed(&["bounds", &cfg], Some("1"));
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let text = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 5 * 3);
}

#[test]
fn adversarial_reports_both_values() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let run = streamfed(&["adversarial", "--T", "100,1000", "--output", report.to_str().unwrap()], None);
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert_eq!(stdout.lines().count(), 3);
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let row = &value["rows"][1];
    let passed = row["passed"].as_bool().unwrap();
    assert_eq!(run.status.code(), Some(if passed { 0 } else { 4 }));
    if !passed {
        let stderr = String::from_utf8_lossy(&run.stderr);
        assert!(stderr.contains("eps_opt") && stderr.contains("sigma_hat_sq"), "{stderr}");
    }
}
