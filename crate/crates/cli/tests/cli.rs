use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn qosmon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qosmon"))
        .args(args)
        .env_remove("QOSMON_OUTPUT_DIR")
        .env_remove("QOSMON_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_invert_monitor_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.csv");
    let o = qosmon(&["simulate", "--probes", "3000", "--seed", "2", "-o", p(&records)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&records).unwrap();
    assert!(text.starts_with("probe_index,send_time_s,leaf_id,delay_s,lost\n"));
    assert_eq!(text.lines().count(), 1 + 3000 * 5);

    // Same seed, same bytes.
    let again = dir.path().join("again.csv");
    qosmon(&["simulate", "--probes", "3000", "--seed", "2", "-o", p(&again)]);
    assert_eq!(std::fs::read(&records).unwrap(), std::fs::read(&again).unwrap());

    let out = dir.path().join("inv");
    let o = qosmon(&["invert", p(&records), "--window", "60", "-o", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let alpha = std::fs::read_to_string(out.join("alpha.csv")).unwrap();
    assert_eq!(alpha.lines().count(), 1 + 5 * 9 * 10);
    let summary = out.join("summary.csv");
    let s = std::fs::read_to_string(&summary).unwrap();
    assert!(s.starts_with("window_index,link_id,p_le_1,loglik,iterations"));
    assert_eq!(s.lines().count(), 1 + 5 * 9);

    let o = qosmon(&["monitor", p(&summary)]);
    assert!(matches!(code(&o), 0 | 3));
    let alarms = String::from_utf8(o.stdout).unwrap();
    assert!(alarms.starts_with("window_index,link_id,statistic,z_value,limit,alarm\n"));
    assert_eq!(alarms.lines().count(), 1 + 3 * 9);
}

#[test]
fn monitor_exit_code_reflects_alarms() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, rows: &[(usize, f64)]| {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "window_index,link_id,p_le_1,loglik,iterations").unwrap();
        for (w, v) in rows {
            writeln!(f, "{w},4,{v},-1,3").unwrap();
        }
        path
    };
    let steady = write("steady.csv", &[(0, 0.90), (1, 0.92), (2, 0.91), (3, 0.905)]);
    let drop = write("drop.csv", &[(0, 0.90), (1, 0.92), (2, 0.91), (3, 0.5), (4, 0.3)]);
    assert_eq!(code(&qosmon(&["monitor", p(&steady)])), 0);
    let o = qosmon(&["monitor", p(&drop)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8(o.stdout).unwrap().lines().any(|l| l.starts_with("4,4,ewma,") && l.ends_with(",1")));
    assert_eq!(code(&qosmon(&["monitor", p(&drop), "--chart", "cusum"])), 3);
}

#[test]
fn experiment_writes_reports_and_honours_env_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    std::fs::write(
        &cfg,
        r#"{"simulation": {"mode": "generative"}, "duration": 1800, "seed": 3}"#,
    )
    .unwrap();
    let out = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_qosmon"))
        .args(["experiment", p(&cfg)])
        .env("QOSMON_OUTPUT_DIR", &out)
        .env("QOSMON_SEED", "8")
        .output()
        .unwrap();
    assert!(matches!(code(&o), 0 | 3), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["alpha.csv", "summary.csv", "alarms.csv", "windows.csv", "config_echo.json", "link_1.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let echo = std::fs::read_to_string(out.join("config_echo.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&echo).unwrap();
    assert_eq!(v["seed"], 8);

    // The echoed config reproduces the run byte for byte.
    let replay = dir.path().join("replay");
    let o = qosmon(&["experiment", p(&out.join("config_echo.json")), "--output-dir", p(&replay)]);
    assert!(matches!(code(&o), 0 | 3));
    for f in ["alpha.csv", "summary.csv", "alarms.csv", "windows.csv"] {
        assert_eq!(
            std::fs::read(out.join(f)).unwrap(),
            std::fs::read(replay.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"duration": 1000, "window_length": 600}"#).unwrap();
    assert_eq!(code(&qosmon(&["experiment", p(&bad)])), 1);
    std::fs::write(&bad, r#"{"no_such_field": true}"#).unwrap();
    assert_eq!(code(&qosmon(&["experiment", p(&bad)])), 1);
    assert_eq!(code(&qosmon(&["experiment", p(&dir.path().join("missing.json"))])), 1);
    assert_eq!(code(&qosmon(&["simulate", "--topology", p(&bad)])), 1);
    assert_eq!(code(&qosmon(&["quantiles", "--probs", "0.5,1.5"])), 1);
    assert_eq!(code(&qosmon(&["no-such-command"])), 1);
}

#[test]
fn quantiles_reads_stdin() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_qosmon"))
        .args(["quantiles", "--probs", "0.5,0.9", "--buffer", "10", "--gk-eps", "0.01"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let mut stdin = child.stdin.take().unwrap();
        for v in 1..=100 {
            writeln!(stdin, "{v}").unwrap();
        }
    }
    let o = child.wait_with_output().unwrap();
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], 0.5);
    // Exact median is 50; the streaming estimate and the summary stay close.
    assert!((rows[0][1] - 50.0).abs() <= 10.0, "{text}");
    assert!((rows[0][2] - 50.0).abs() <= 1.0, "{text}");
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    std::fs::write(&cfg, r#"{"simulation": {"mode": "generative"}, "duration": 1800}"#).unwrap();
    let file = dir.path().join("plain-file");
    std::fs::write(&file, "").unwrap();
    let o = qosmon(&["experiment", p(&cfg), "--output-dir", p(&file.join("sub"))]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}
