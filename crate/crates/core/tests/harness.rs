use qosmon::harness::{
    emit_reports, render_reports, run_experiment, ExperimentConfig, GenerativeSettings,
    QueueingSettings, Simulation,
};
use qosmon::netsim::TrafficProfile;

fn generative(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        simulation: Simulation::Generative(GenerativeSettings::default()),
        seed,
        ..ExperimentConfig::default()
    }
}

#[test]
fn hour_long_run_has_six_windows_and_36000_probes() {
    let out = run_experiment(&generative(3)).unwrap();
    assert_eq!(out.reports.len(), 6);
    let probes: usize = out.reports.iter().map(|r| r.probes).sum();
    assert_eq!(probes, 36_000);
    for r in &out.reports {
        assert_eq!(r.probes, 6000);
        assert_eq!(r.links.len(), 9);
        assert!(r.links.iter().all(|l| l.true_p_le.is_some()));
    }
    // Calibration windows never alarm.
    for r in &out.reports[..2] {
        assert!(r.links.iter().all(|l| l.chart.as_ref().is_none_or(|c| !c.alarm)));
    }

    let files = render_reports(&out).unwrap();
    let alpha = &files.iter().find(|(n, _)| n == "alpha.csv").unwrap().1;
    assert_eq!(alpha.lines().count(), 1 + 6 * 9 * 10);
    assert!(alpha.starts_with("window_index,link_id,bin_j,alpha_hat\n"));
    assert!(!alpha.contains('\r'));
    for k in 1..=9 {
        assert!(files.iter().any(|(n, _)| *n == format!("link_{k}.svg")));
    }
}

#[test]
fn reruns_and_echoed_configs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { duration: 1800.0, ..generative(17) };
    let first = run_experiment(&cfg).unwrap();
    let written = emit_reports(&first, dir.path()).unwrap();
    assert!(written.iter().all(|p| p.exists()));

    let again = render_reports(&run_experiment(&cfg).unwrap()).unwrap();
    let echo = std::fs::read_to_string(dir.path().join("config_echo.json")).unwrap();
    let echoed = ExperimentConfig::from_json(&echo).unwrap();
    assert_eq!(echoed.seed, 17);
    let from_echo = render_reports(&run_experiment(&echoed).unwrap()).unwrap();

    for (name, body) in render_reports(&first).unwrap() {
        if name == "config_echo.json" {
            continue;
        }
        let on_disk = std::fs::read_to_string(dir.path().join(&name)).unwrap();
        assert_eq!(on_disk, body, "{name}");
        assert_eq!(again.iter().find(|(n, _)| *n == name).unwrap().1, body, "{name}");
        assert_eq!(from_echo.iter().find(|(n, _)| *n == name).unwrap().1, body, "{name}");
    }
}

#[test]
fn static_truth_rarely_alarms() {
    // Monte Carlo under the null: at least 18 of 20 runs alarm-free.
    let quiet = (0..20u64).filter(|&s| !run_experiment(&generative(500 + s)).unwrap().any_alarm()).count();
    assert!(quiet >= 18, "only {quiet}/20 runs were alarm-free");
}

#[test]
fn queueing_run_reports_link_truth() {
    let settings = QueueingSettings {
        traffic: vec![TrafficProfile {
            flow_arrival_rate: 133.0,
            pareto_scale: 0.2,
            flow_rate_bps: 100_000.0,
            ..TrafficProfile::default()
        }],
        calibration: None,
        ..QueueingSettings::default()
    };
    let cfg = ExperimentConfig {
        simulation: Simulation::Queueing(settings),
        duration: 1200.0,
        window_length: 300.0,
        seed: 4,
        ..ExperimentConfig::default()
    };
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.reports.len(), 4);
    let mut err = 0.0;
    for r in &out.reports {
        assert_eq!(r.probes, 3000, "window {}", r.index);
        for l in &r.links {
            let t = l.true_p_le.unwrap();
            assert!((0.0..=1.0).contains(&t));
            err += (l.p_le - t).abs();
        }
    }
    assert!(err / 36.0 <= 0.15, "mean abs error {}", err / 36.0);
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        r#"{"duration": 1000, "window_length": 600}"#,
        r#"{"window_length": 0}"#,
        r#"{"simulation": {"mode": "generative"}, "events": [{"time": 10, "link": 4, "multiplier": 2}]}"#,
        r#"{"unknown_field": 1}"#,
    ] {
        let err = ExperimentConfig::from_json(bad).and_then(|c| c.validate());
        assert!(err.is_err_and(|e| e.is_config_error()), "{bad}");
    }
}
