//! Acceptance run: one PASS/FAIL line per criterion. Exits nonzero if any fails.

mod common;

use std::time::Instant;

use common::*;
use qosmon::harness::{run_experiment, ExperimentConfig};
use qosmon::monitor::{Baseline, Direction, EwmaState};
use qosmon::netsim::{
    run_generative, run_queueing, GenerativeConfig, LinkConfig, QueueingScenario,
    TrafficProfile,
};
use qosmon::streamq::{
    build_empirical_cdf, quantile, target_rank, DataBuffer, GkSummary, QuantileSet,
};
use qosmon::tomography::{
    discretize, em_invert, loglik, pattern_posteriors, BinningSpec, DelayPmf, EmInit, EmOptions,
    ObservationSet,
};
use qosmon::{par, Execution, LogicalTree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("message passing matches enumeration", oracle_equivalence),
        ("EM recovers known link pmfs", em_recovery),
        ("EM likelihood is monotone", em_monotone),
        ("congestion scenario is tracked and detected", congestion_scenario),
        ("EWMA follows its recurrence", ewma_fidelity),
        ("EWMA in-control alarm rate", in_control_rate),
        ("GK rank guarantee and validity", gk_guarantee),
        ("ECDF and IQE exactness", quantile_exactness),
        ("simulator conservation and determinism", simulator_invariants),
        ("window inversion time", inversion_time),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = run();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {:>2} {name}: {} ({:.1} s)", i + 1, o.detail, t.elapsed().as_secs_f64());
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst, mut trees, mut cases) = (0.0f64, 0, 0);
    for links in 1..=4 {
        for parents in all_parent_arrays(links) {
            trees += 1;
            let tree = tree_from_parents(&parents);
            for top in 1..=3 {
                let pmfs: Vec<DelayPmf> = (0..links).map(|_| random_pmf(&mut rng, top)).collect();
                let joint = enumerate_joint(&tree, &pmfs);
                let dist = pattern_distribution(&tree, &pmfs);
                let mut brute_ll = 0.0;
                let mut weighted = Vec::new();
                for (pat, _) in &dist {
                    let (bp, bpost) = brute_posteriors(&joint, links, top + 1, pat);
                    let (p, post) = pattern_posteriors(&tree, &pmfs, pat).unwrap();
                    worst = worst.max((p - bp).abs());
                    for (r, br) in post.iter().zip(&bpost) {
                        for (a, b) in r.iter().zip(br) {
                            worst = worst.max((a - b).abs());
                        }
                    }
                    let w = rng.random_range(1.0..5.0);
                    brute_ll += w * bp.ln();
                    weighted.push((pat.clone(), w));
                    cases += 1;
                }
                let ll = loglik(&tree, &pmfs, &ObservationSet::from_weighted(weighted)).unwrap();
                worst = worst.max((ll.value - brute_ll).abs());
            }
        }
    }
    outcome(
        worst <= 1e-10,
        format!("{trees} trees x b in 1..=3, {cases} patterns, max abs diff {worst:.2e} (tol 1e-10)"),
    )
}

fn em_recovery() -> Outcome {
    let tree = star3();
    let truth = star3_truth();
    let obs = ObservationSet::from_weighted(pattern_distribution(&tree, &truth));
    let opts = EmOptions { tol: 1e-15, max_iter: 200_000, ..EmOptions::default() };
    let r = em_invert(&tree, &obs, &BinningSpec::new(0.005, 1).unwrap(), &EmInit::Uniform, &opts)
        .unwrap();
    let star_err = r
        .pmfs
        .iter()
        .zip(&truth)
        .flat_map(|(a, b)| a.probs().iter().zip(b.probs()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);

    let tree = LogicalTree::default_tree();
    let spec = BinningSpec::new(0.005, 4).unwrap();
    let truth: Vec<DelayPmf> = (0..9)
        .map(|k| {
            let z = 0.55 + 0.04 * k as f64;
            let r = (1.0 - z) / 4.0;
            DelayPmf::new(vec![z, 1.6 * r, 1.2 * r, 0.8 * r, 0.4 * r]).unwrap()
        })
        .collect();
    let cfg = GenerativeConfig { n_probes: 100_000, binning: spec, probe_interval: 0.1, seed: 42 };
    let records = run_generative(&tree, &truth, &cfg).unwrap();
    let obs = ObservationSet::from_weighted(records.iter().map(|r| {
        let u = r.delays.iter().map(|d| discretize(d.unwrap(), &spec).unwrap() as u16).collect();
        (u, 1.0)
    }));
    let r = em_invert(&tree, &obs, &spec, &EmInit::Uniform, &EmOptions::default()).unwrap();
    let tv = r.pmfs.iter().zip(&truth).map(|(a, b)| a.total_variation(b)).fold(0.0, f64::max);
    outcome(
        star_err <= 1e-6 && tv <= 0.05,
        format!("star max entry error {star_err:.2e} (tol 1e-6); 9-link b=4 max TV {tv:.4} (tol 0.05)"),
    )
}

fn em_monotone() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_drop = 0.0f64;
    for _ in 0..100 {
        let links = rng.random_range(1..=9);
        let top = rng.random_range(1..=5);
        let tree = tree_from_parents(&random_parents(&mut rng, links));
        let truth: Vec<DelayPmf> = (0..links).map(|_| random_pmf(&mut rng, top)).collect();
        let paths = leaf_paths(&tree);
        let n = rng.random_range(50..2000);
        let obs = ObservationSet::from_weighted((0..n).map(|_| {
            let x: Vec<usize> = truth
                .iter()
                .map(|p| {
                    let u: f64 = rng.random();
                    p.cdf().iter().position(|&c| u < c).unwrap_or(top)
                })
                .collect();
            (leaf_units(&tree, &paths, &x, top), 1.0)
        }));
        let init = if rng.random_bool(0.2) {
            EmInit::Uniform
        } else {
            EmInit::Given((0..links).map(|_| random_pmf(&mut rng, top)).collect())
        };
        let opts = EmOptions { tol: 0.0, max_iter: 60, ..EmOptions::default() };
        let r = em_invert(&tree, &obs, &BinningSpec::new(0.005, top).unwrap(), &init, &opts).unwrap();
        for w in r.trace.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
    }
    outcome(
        worst_drop <= 1e-9,
        format!("100 random (tree, data, init) triples, largest decrease {worst_drop:.2e} (tol 1e-9)"),
    )
}

fn congestion_scenario() -> Outcome {
    let base = ExperimentConfig::surge_scenario().resolved().expect("calibration");
    let runs: Vec<_> = par::map_range(Execution::default(), 20, |i| {
        run_experiment(&ExperimentConfig { seed: 1000 + i as u64, ..base.clone() }).expect("run")
    });
    let (mut err, mut n) = (0.0, 0.0);
    let (mut both, mut hit4, mut hit7, mut false_alarms, mut false_89) = (0, 0, 0, 0, 0);
    for o in &runs {
        let mut alarmed = [false; 10];
        for r in o.reports.iter().filter(|r| r.index <= 5) {
            for l in &r.links {
                if let Some(t) = l.true_p_le {
                    err += (l.p_le - t).abs();
                    n += 1.0;
                }
                alarmed[l.link.0] |= l.chart.as_ref().is_some_and(|c| c.alarm);
            }
        }
        hit4 += alarmed[4] as usize;
        hit7 += alarmed[7] as usize;
        both += (alarmed[4] && alarmed[7]) as usize;
        for k in [1, 2, 3, 5, 6, 8, 9] {
            false_alarms += alarmed[k] as usize;
            if k >= 8 {
                false_89 += alarmed[k] as usize;
            }
        }
    }
    let mae = err / n;
    let fa = false_alarms as f64 / 140.0;
    let fa89 = false_89 as f64 / 40.0;
    let pass = mae <= 0.10 && both as f64 >= 16.0 && fa <= 0.10 && fa89 <= 0.10;
    outcome(
        pass,
        format!(
            "MAE {mae:.4} (tol 0.10); links 4 and 7 both alarmed in {both}/20 runs (4: {hit4}, 7: {hit7}; need 16); \
             other-link alarms {false_alarms}/140 = {:.1}% (max 10%); links 8-9 {false_89}/40 = {:.1}%",
            100.0 * fa,
            100.0 * fa89
        ),
    )
}

fn ewma_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let lambda = rng.random_range(0.01..=1.0);
        let z0 = rng.random_range(-10.0..10.0);
        let mut s = EwmaState::new(lambda, 3.0, Direction::TwoSided, z0).unwrap();
        let mut z = z0;
        for _ in 0..500 {
            let x: f64 = rng.random_range(-100.0..100.0);
            z = lambda * x + (1.0 - lambda) * z;
            s.step(x).unwrap();
            worst = worst.max((s.value() - z).abs() / z.abs().max(1.0));
        }
    }
    let mut ident = EwmaState::new(1.0, 3.0, Direction::TwoSided, 5.0).unwrap();
    let identity = (0..100).all(|i| {
        let x = (i as f64).sin() * 7.0;
        ident.step(x).unwrap();
        ident.value() == x
    });
    let mut fixed = EwmaState::new(0.2, 3.0, Direction::TwoSided, -4.0).unwrap();
    for _ in 0..400 {
        fixed.step(2.5).unwrap();
    }
    let converges = (fixed.value() - 2.5).abs() <= 1e-12;
    outcome(
        worst == 0.0 && identity && converges,
        format!("max deviation from recurrence {worst:.1e}; lambda=1 identity {identity}; constant input fixed point {converges}"),
    )
}

fn in_control_rate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let b = Baseline { mean: 0.0, sd: 1.0, degenerate: false };
    let mut s = EwmaState::calibrated(0.2, 3.0, Direction::TwoSided, b).unwrap();
    let steps = 100_000;
    let alarms = (0..steps).filter(|_| s.step(rng.sample(StandardNormal)).unwrap().alarm).count();
    let frac = alarms as f64 / steps as f64;
    outcome(
        (0.0005..=0.01).contains(&frac),
        format!("{alarms} alarms in {steps} steps, fraction {frac:.5} (band [0.0005, 0.01])"),
    )
}

fn gk_guarantee() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let n = 100_000;
    let mut details = Vec::new();
    let mut pass = true;
    for eps in [0.01, 0.05, 0.1] {
        let mut s = GkSummary::new(eps).unwrap();
        let mut data = Vec::with_capacity(n);
        let mut valid = true;
        for i in 0..n {
            let v: f64 = rng.random_range(0.0..1.0);
            s.insert(v).unwrap();
            data.push(v);
            if i % 1000 == 999 {
                s.compress();
            }
            valid &= s.is_valid();
        }
        data.sort_by(f64::total_cmp);
        let mut worst = 0.0f64;
        for j in 1..=1000 {
            let p = j as f64 / 1000.0;
            let v = s.query(p).unwrap();
            let (lo, hi) = rank_range(&data, v);
            let r = target_rank(p, n as u64) as f64;
            let off = if (lo as f64..=hi as f64).contains(&r) {
                0.0
            } else {
                (lo as f64 - r).abs().min((hi as f64 - r).abs())
            };
            worst = worst.max(off);
        }
        let ok = valid && worst <= eps * n as f64;
        pass &= ok;
        details.push(format!(
            "eps {eps}: worst rank error {worst} (max {}), {} tuples, valid {valid}",
            eps * n as f64,
            s.tuples().len()
        ));
    }
    outcome(pass, details.join("; "))
}

fn quantile_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let len = rng.random_range(1..=1000);
        // Coarse grid so ties occur.
        let v: Vec<f64> = (0..len).map(|_| rng.random_range(0..200) as f64 * 0.5).collect();
        let cdf = build_empirical_cdf(&DataBuffer::from_values(&v).unwrap()).unwrap();
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        for k in 1..=len {
            let p = k as f64 / len as f64;
            if quantile(&cdf, p).unwrap() != sorted[target_rank(p, len as u64) as usize - 1] {
                mismatches += 1;
            }
        }
        let p: f64 = rng.random_range(0.0001..=1.0);
        if quantile(&cdf, p).unwrap() != sorted[target_rank(p, len as u64) as usize - 1] {
            mismatches += 1;
        }
    }

    let probs = [0.5, 0.75, 0.9, 0.95, 0.99];
    let mut iqe_ok = true;
    for _ in 0..100 {
        let len = rng.random_range(1..=500);
        let v: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut q = QuantileSet::new(&probs).unwrap();
        q.iqe_update(&mut DataBuffer::from_values(&v).unwrap()).unwrap();
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        for (p, est) in probs.iter().zip(q.estimates()) {
            iqe_ok &= *est == sorted[target_rank(*p, len as u64) as usize - 1];
        }
    }

    let mut q = QuantileSet::new(&[0.5]).unwrap();
    q.iqe_update(&mut DataBuffer::from_values(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap()).unwrap();
    let mut knots = [q.min(), q.estimates()[0], q.max(), 6.0, 7.0, 8.0, 9.0, 10.0];
    knots.sort_by(f64::total_cmp);
    let spacing = knots.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    q.iqe_update(&mut DataBuffer::from_values(&[6.0, 7.0, 8.0, 9.0, 10.0]).unwrap()).unwrap();
    let merge_err = (q.estimates()[0] - 5.0).abs();

    outcome(
        mismatches == 0 && iqe_ok && merge_err <= spacing,
        format!(
            "ECDF mismatches {mismatches} over 1000 buffers; empty-prior IQE exact {iqe_ok}; \
             merge median off pooled by {merge_err} (bound {spacing})"
        ),
    )
}

fn simulator_invariants() -> Outcome {
    let tree = LogicalTree::default_tree();
    let idle = QueueingScenario {
        traffic: vec![TrafficProfile { flow_arrival_rate: 0.0, ..TrafficProfile::default() }],
        ..QueueingScenario::default()
    };
    let run = run_queueing(&tree, &idle).unwrap();
    let d1 = tree.leaves().iter().position(|&v| tree.name(v) == "d1").unwrap();
    let closed_form = 3.0 * (0.001 + 320.0 / 1e7);
    let fixed_delay_ok = run
        .records
        .iter()
        .all(|r| (r.delays[d1].unwrap() - closed_form).abs() < 1e-12);
    let count_ok = run.records.len() == 36_000;

    let lossy = QueueingScenario {
        links: vec![LinkConfig { buffer_packets: 5, ..LinkConfig::default() }],
        traffic: vec![TrafficProfile {
            flow_arrival_rate: 170.0,
            pareto_scale: 0.2,
            flow_rate_bps: 100_000.0,
            ..TrafficProfile::default()
        }],
        duration: 600.0,
        warmup: 60.0,
        seed: 9,
        ..QueueingScenario::default()
    };
    let a = run_queueing(&tree, &lossy).unwrap();
    let b = run_queueing(&tree, &lossy).unwrap();
    let mut conserved = a.records.len() == lossy.probe_count() as usize;
    let mut lost = 0;
    for (i, r) in a.records.iter().enumerate() {
        conserved &= r.index as usize == i && r.delays.len() == tree.leaves().len();
        for (j, &leaf) in tree.leaves().iter().enumerate() {
            let through: Option<f64> =
                tree.path_links(leaf).unwrap().iter().map(|k| a.link_delays[k.index()][i]).sum();
            conserved &= r.delays[j].is_some() == through.is_some();
            lost += r.delays[j].is_none() as usize;
        }
    }
    let queue_det = a == b;
    let g = GenerativeConfig { n_probes: 5000, binning: BinningSpec::default(), probe_interval: 0.1, seed: 3 };
    let truth = vec![DelayPmf::uniform(9); 9];
    let gen_det = run_generative(&tree, &truth, &g).unwrap() == run_generative(&tree, &truth, &g).unwrap();
    outcome(
        fixed_delay_ok && count_ok && conserved && lost > 0 && queue_det && gen_det,
        format!(
            "idle 3-hop delay {closed_form:.6} s exact {fixed_delay_ok}; 36000 records {count_ok}; \
             conservation {conserved} ({lost} lost copies); seed determinism queueing {queue_det}, generative {gen_det}"
        ),
    )
}

fn inversion_time() -> Outcome {
    // A congested window of the scenario, inverted cold with the default options.
    let tree = LogicalTree::default_tree();
    let base = ExperimentConfig::surge_scenario().resolved().expect("calibration");
    let qosmon::harness::Simulation::Queueing(q) = &base.simulation else { unreachable!() };
    let sc = QueueingScenario {
        links: q.links.clone(),
        traffic: q.traffic.clone(),
        events: base.events.clone(),
        seed: 1000,
        ..QueueingScenario::default()
    };
    let run = run_queueing(&tree, &sc).unwrap();
    let records = qosmon::harness::subtract_window_minimum(&run.records, 600.0);
    let windows = qosmon::harness::window_records(&records, 600.0, &base.binning).unwrap();
    let w = &windows[3];
    let obs = w.observation_set();
    let t = Instant::now();
    let r = em_invert(&tree, &obs, &base.binning, &EmInit::Uniform, &EmOptions::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();

    // A window with many more distinct patterns: 6000 generative probes.
    let g = GenerativeConfig { n_probes: 6000, binning: base.binning, probe_interval: 0.1, seed: 10 };
    let truth = vec![qosmon::harness::default_truth(base.binning.top_bin); 9];
    let gobs = ObservationSet::from_weighted(run_generative(&tree, &truth, &g).unwrap().iter().map(|r| {
        let u = r.delays.iter().map(|d| discretize(d.unwrap(), &base.binning).unwrap() as u16).collect();
        (u, 1.0)
    }));
    let t = Instant::now();
    let gr = em_invert(&tree, &gobs, &base.binning, &EmInit::Uniform, &EmOptions::default()).unwrap();
    let gsecs = t.elapsed().as_secs_f64();
    outcome(
        secs.max(gsecs) <= 40.0,
        format!(
            "b=9, 9 links, cold start: scenario window 4 ({} probes, {} patterns, {} iterations) {secs:.2} s; \
             generative window (6000 probes, {} patterns, {} iterations) {gsecs:.2} s; budget 40 s",
            w.probes(),
            obs.len(),
            r.iterations,
            gobs.len(),
            gr.iterations
        ),
    )
}
