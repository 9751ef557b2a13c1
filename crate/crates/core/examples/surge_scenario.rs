//! Runs the one-hour congestion scenario over several seeds and prints
//! tracking error, detections on links 4 and 7, and alarms elsewhere.
//!
//! `cargo run --release --example surge_scenario -- 5`

use qosmon::harness::{run_experiment, ExperimentConfig};

fn main() {
    let runs: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let base = ExperimentConfig::surge_scenario().resolved().expect("calibration");
    let (mut err, mut n, mut detected, mut other) = (0.0, 0.0, 0, 0);
    for seed in 1000..1000 + runs {
        let out = run_experiment(&ExperimentConfig { seed, ..base.clone() }).expect("run");
        let mut alarmed = [false; 10];
        for l in out.reports.iter().flat_map(|r| &r.links) {
            if let Some(t) = l.true_p_le {
                err += (l.p_le - t).abs();
                n += 1.0;
            }
            alarmed[l.link.0] |= l.chart.as_ref().is_some_and(|c| c.alarm);
        }
        let hit = alarmed[4] && alarmed[7];
        let others: Vec<usize> = (1..10).filter(|&k| k != 4 && k != 7 && alarmed[k]).collect();
        detected += hit as usize;
        other += others.len();
        println!("seed {seed}: links 4 and 7 detected {hit}, other alarms {others:?}");
    }
    println!(
        "mean abs error {:.4}; detected {detected}/{runs}; other-link alarms {other}/{}",
        err / n,
        7 * runs
    );
}
