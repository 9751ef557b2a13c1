//! Windowed monitoring experiments: simulate, split into windows,
//! discretize, invert, chart, report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::monitor::{
    calibrate_baseline, Baseline, CdfEwmaState, CusumState, Direction, EwmaState, MonitorError,
};
use crate::netsim::{
    self, calibrate_flow_rate, fmt_g12, CalibrationSpec, GenerativeConfig, LinkConfig,
    ProbeRecord, QueueingScenario, ScenarioEvent, SimError, TrafficProfile,
};
use crate::par::{map_range, Execution};
use crate::tomography::{
    discretize, em_invert_holding, BinnedObservation, BinningSpec, DelayPmf, EmInit, EmOptions,
    EmResult, ObservationSet, TomographyError,
};
use crate::topology::{Identifiability, LinkId, LogicalTree, TopologyError};

/// Overrides `output_dir`.
pub const ENV_OUTPUT_DIR: &str = "QOSMON_OUTPUT_DIR";
/// Overrides `seed`.
pub const ENV_SEED: &str = "QOSMON_SEED";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("window {window}: {source}")]
    Window { window: usize, source: TomographyError },
    #[error("window {window}: no received probes to invert")]
    EmptyWindow { window: usize },
    #[error("monitoring link {link}: {source}")]
    Monitor { link: LinkId, source: MonitorError },
    #[error("no window reports to emit")]
    EmptyReports,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// True for problems with the inputs rather than with the run itself.
    pub fn is_config_error(&self) -> bool {
        matches!(self, HarnessError::Config(_) | HarnessError::Topology(_) | HarnessError::Json(_))
            || matches!(
                self,
                HarnessError::Sim(
                    SimError::BadParameter(_) | SimError::BadDuration(_) | SimError::UnknownLink(_)
                )
            )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MonitorMethod {
    #[default]
    EwmaOnP,
    EwmaOnCdf,
    CusumOnP,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitoringConfig {
    pub method: MonitorMethod,
    pub lambda: f64,
    /// Control-limit multiplier `L`.
    pub limit: f64,
    /// Side of `P(delay <= unit)` that raises alarms.
    pub direction: Direction,
    /// Monitored statistic is `P(link delay <= unit bins)`.
    pub unit: usize,
    /// CUSUM slack and threshold, in baseline standard deviations.
    pub cusum_kappa: f64,
    pub cusum_h: f64,
    /// Probability level inverted by `ewma-on-cdf`.
    pub quantile: f64,
    /// Each baseline window is also inverted in this many equal slices; the
    /// spread of the slice estimates is the baseline standard deviation.
    pub sub_windows: usize,
    /// Lower bound on the baseline standard deviation.
    pub min_sigma: f64,
}

impl Default for MonitoringConfig {
    fn default() -> Self {
        Self {
            method: MonitorMethod::EwmaOnP,
            lambda: 0.2,
            limit: 3.0,
            direction: Direction::Lower,
            unit: 1,
            cusum_kappa: 0.5,
            cusum_h: 4.0,
            quantile: 0.8,
            sub_windows: 4,
            min_sigma: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    Uniform,
    /// Start each window from the previous window's estimate.
    #[default]
    PreviousWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub zero_floor: f64,
    pub init: InitStrategy,
    pub execution: Execution,
    /// A link keeps its starting estimate when at least this fraction of the
    /// window's probes is in the top bin at every leaf below the link's
    /// upstream node. Values above 1 turn this off.
    pub saturation_hold: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        let o = EmOptions::default();
        Self {
            tol: o.tol,
            max_iter: o.max_iter,
            zero_floor: o.zero_floor,
            init: InitStrategy::default(),
            execution: o.execution,
            saturation_hold: 0.99,
        }
    }
}

impl EmConfig {
    fn options(&self) -> EmOptions {
        EmOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            zero_floor: self.zero_floor,
            execution: self.execution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueueingSettings {
    pub links: Vec<LinkConfig>,
    pub traffic: Vec<TrafficProfile>,
    pub probe_rate: f64,
    pub probe_bytes: u32,
    pub warmup: f64,
    /// Subtract each leaf's smallest delay within the window before binning,
    /// and measure true link delays net of propagation and probe
    /// transmission time.
    pub remove_fixed_delay: bool,
    /// When set, every traffic profile's `flow_arrival_rate` is replaced by a
    /// calibrated value before the run.
    pub calibration: Option<CalibrationSpec>,
}

impl Default for QueueingSettings {
    fn default() -> Self {
        let s = QueueingScenario::default();
        Self {
            links: s.links,
            traffic: vec![TrafficProfile {
                flow_rate_bps: 100_000.0,
                pareto_scale: 0.2,
                ..TrafficProfile::default()
            }],
            probe_rate: s.probe_rate,
            probe_bytes: s.probe_bytes,
            warmup: s.warmup,
            remove_fixed_delay: true,
            calibration: Some(CalibrationSpec::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerativeSettings {
    /// Per-link truth; `None` uses [`default_truth`] on every link.
    pub truth: Option<Vec<DelayPmf>>,
    pub probe_rate: f64,
}

impl Default for GenerativeSettings {
    fn default() -> Self {
        Self { truth: None, probe_rate: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Simulation {
    Generative(GenerativeSettings),
    Queueing(QueueingSettings),
}

impl Default for Simulation {
    fn default() -> Self {
        Simulation::Queueing(QueueingSettings::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Topology JSON; `None` uses the built-in default tree.
    pub topology: Option<PathBuf>,
    pub binning: BinningSpec,
    pub simulation: Simulation,
    pub window_length: f64,
    pub duration: f64,
    pub events: Vec<ScenarioEvent>,
    pub monitoring: MonitoringConfig,
    pub baseline_windows: usize,
    pub em: EmConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            topology: None,
            binning: BinningSpec::default(),
            simulation: Simulation::default(),
            window_length: 600.0,
            duration: 3600.0,
            events: Vec::new(),
            monitoring: MonitoringConfig::default(),
            baseline_windows: 2,
            em: EmConfig::default(),
            seed: 1,
            output_dir: PathBuf::from("qosmon-out"),
        }
    }
}

impl ExperimentConfig {
    /// The one-hour scenario: load on links 4 and 7 doubles at 30 minutes
    /// and triples at 45 minutes.
    pub fn surge_scenario() -> Self {
        let ev = |time, link, multiplier| ScenarioEvent { time, link, multiplier };
        Self {
            events: vec![ev(1800.0, 4, 2.0), ev(1800.0, 7, 2.0), ev(2700.0, 4, 3.0), ev(2700.0, 7, 3.0)],
            ..Self::default()
        }
    }

    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Loads a config; a relative `topology` path is taken relative to the
    /// config file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(t) = &cfg.topology {
            if t.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.topology = Some(base.join(t));
            }
        }
        Ok(cfg)
    }

    /// Applies [`ENV_OUTPUT_DIR`] and [`ENV_SEED`] when set.
    pub fn apply_env_overrides(&mut self) -> Result<(), HarnessError> {
        if let Some(dir) = std::env::var_os(ENV_OUTPUT_DIR) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Ok(seed) = std::env::var(ENV_SEED) {
            self.seed = seed
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("{ENV_SEED}={seed:?} is not a u64")))?;
        }
        Ok(())
    }

    pub fn window_count(&self) -> usize {
        (self.duration / self.window_length).round() as usize
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.binning.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(self.window_length > 0.0) {
            return bad(format!("window_length must be positive, got {}", self.window_length));
        }
        let ratio = self.duration / self.window_length;
        if !(self.duration > 0.0) || ratio.round() < 1.0 || (ratio - ratio.round()).abs() > 1e-9 {
            return bad(format!(
                "duration {} is not a positive multiple of window_length {}",
                self.duration, self.window_length
            ));
        }
        let m = &self.monitoring;
        if !(m.lambda > 0.0 && m.lambda <= 1.0) || !(m.limit > 0.0) {
            return bad(format!("monitoring lambda/limit out of range: {m:?}"));
        }
        if m.unit > self.binning.top_bin {
            return bad(format!("monitoring unit {} exceeds top bin {}", m.unit, self.binning.top_bin));
        }
        if !(m.quantile > 0.0 && m.quantile <= 1.0) || !(m.min_sigma >= 0.0) {
            return bad(format!("monitoring quantile/min_sigma out of range: {m:?}"));
        }
        if !(m.cusum_kappa >= 0.0) || !(m.cusum_h > 0.0) {
            return bad(format!("cusum parameters out of range: {m:?}"));
        }
        if m.sub_windows < 1 || self.baseline_windows < 1 || self.baseline_windows * m.sub_windows < 2 {
            return bad("baseline needs at least two samples (baseline_windows x sub_windows)".into());
        }
        if !(self.em.tol >= 0.0) || self.em.max_iter < 1 || !(self.em.zero_floor >= 0.0) {
            return bad(format!("em settings out of range: {:?}", self.em));
        }
        match &self.simulation {
            Simulation::Generative(g) => {
                if !self.events.is_empty() {
                    return bad("scenario events need queueing mode".into());
                }
                if !(g.probe_rate > 0.0) {
                    return bad(format!("probe_rate must be positive, got {}", g.probe_rate));
                }
            }
            Simulation::Queueing(q) => {
                if let Some(c) = &q.calibration {
                    if !(c.target_delay > 0.0)
                        || !(c.quantile > 0.0 && c.quantile < 1.0)
                        || !(c.pilot_duration > 0.0)
                    {
                        return bad(format!("calibration settings out of range: {c:?}"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load_tree(&self) -> Result<LogicalTree, HarnessError> {
        let tree = match &self.topology {
            Some(p) => LogicalTree::from_file(p)?,
            None => LogicalTree::default_tree(),
        };
        tree.check_probing()?;
        Ok(tree)
    }

    /// Returns a copy with traffic calibration carried out, so the result
    /// reruns without repeating it.
    pub fn resolved(&self) -> Result<Self, HarnessError> {
        self.validate()?;
        let mut out = self.clone();
        if let Simulation::Queueing(q) = &mut out.simulation {
            if let Some(spec) = q.calibration.take() {
                let tree = self.load_tree()?;
                let n = tree.link_count();
                let per_link = q.links.len() > 1 || q.traffic.len() > 1;
                let count = if per_link { n } else { 1 };
                let mut cache: Vec<(LinkConfig, TrafficProfile, TrafficProfile)> = Vec::new();
                let mut traffic = Vec::with_capacity(count);
                for i in 0..count {
                    let l = pick(&q.links, i);
                    let t = pick(&q.traffic, i);
                    let hit = cache.iter().find(|(cl, ct, _)| cl == l && ct == t).map(|c| c.2);
                    let tuned = match hit {
                        Some(p) => p,
                        None => {
                            let p = calibrate_flow_rate(l, t, q.probe_rate, q.probe_bytes, &spec);
                            info!(
                                "calibrated flow arrival rate {:.4}/s (offered load {:.3})",
                                p.flow_arrival_rate,
                                p.offered_load(l.capacity_bps)
                            );
                            cache.push((*l, *t, p));
                            p
                        }
                    };
                    traffic.push(tuned);
                }
                q.traffic = traffic;
            }
        }
        Ok(out)
    }
}

fn pick<T>(v: &[T], i: usize) -> &T {
    if v.len() == 1 {
        &v[0]
    } else {
        &v[i]
    }
}

/// Per-link pmf used by generative mode when no truth is configured:
/// 0.7 at zero, the rest decaying geometrically by half per bin.
pub fn default_truth(top_bin: usize) -> DelayPmf {
    let tail: Vec<f64> = (1..=top_bin).map(|j| 0.5f64.powi(j as i32)).collect();
    let s: f64 = tail.iter().sum();
    let mut p = vec![0.7];
    p.extend(tail.iter().map(|t| 0.3 * t / s));
    DelayPmf::new(p).expect("valid by construction")
}

/// Received probes of one window, discretized.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowData {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    /// `(send time, leaf units)` for each fully received probe.
    pub observations: Vec<(f64, BinnedObservation)>,
    /// Probes with at least one lost leaf copy.
    pub lost: usize,
}

impl WindowData {
    pub fn probes(&self) -> usize {
        self.observations.len() + self.lost
    }

    pub fn observation_set(&self) -> ObservationSet {
        ObservationSet::from_observations(self.observations.iter().map(|(_, o)| o))
    }

    /// Observations whose send time falls in slice `i` of `parts` equal slices.
    pub fn slice(&self, i: usize, parts: usize) -> ObservationSet {
        let w = (self.end - self.start) / parts as f64;
        ObservationSet::from_observations(
            self.observations
                .iter()
                .filter(|(t, _)| (((t - self.start) / w).floor() as usize).min(parts - 1) == i)
                .map(|(_, o)| o),
        )
    }
}

/// Splits records into half-open windows `[i W, (i + 1) W)` by send time.
/// Probes lost at any leaf only count toward the window's loss tally.
pub fn window_records(
    records: &[ProbeRecord],
    window_length: f64,
    binning: &BinningSpec,
) -> Result<Vec<WindowData>, TomographyError> {
    let mut sorted: Vec<&ProbeRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.send_time.total_cmp(&b.send_time).then(a.index.cmp(&b.index)));
    let mut out: Vec<WindowData> = Vec::new();
    for r in sorted {
        let idx = (r.send_time / window_length).floor().max(0.0) as usize;
        while out.len() <= idx {
            let i = out.len();
            out.push(WindowData {
                index: i,
                start: i as f64 * window_length,
                end: (i + 1) as f64 * window_length,
                observations: Vec::new(),
                lost: 0,
            });
        }
        let w = &mut out[idx];
        if r.is_lost() {
            w.lost += 1;
            continue;
        }
        let units = r
            .delays
            .iter()
            .map(|d| discretize(d.unwrap_or(0.0), binning).map(|u| u as u16))
            .collect::<Result<Vec<_>, _>>()?;
        w.observations.push((r.send_time, BinnedObservation::new(units)));
    }
    Ok(out)
}

/// Shifts every leaf's delays by the smallest delay that leaf has delivered
/// up to and including the current window, removing fixed propagation and
/// transmission time. A running minimum keeps sustained congestion visible.
pub fn subtract_window_minimum(records: &[ProbeRecord], window_length: f64) -> Vec<ProbeRecord> {
    let window = |r: &ProbeRecord| (r.send_time / window_length).floor().max(0.0) as usize;
    let mut mins: Vec<Vec<f64>> = Vec::new();
    for r in records {
        let w = window(r);
        if mins.len() <= w {
            mins.resize(w + 1, vec![f64::INFINITY; r.delays.len()]);
        }
        for (m, d) in mins[w].iter_mut().zip(&r.delays) {
            if let Some(d) = d {
                *m = m.min(*d);
            }
        }
    }
    for w in 1..mins.len() {
        let (done, rest) = mins.split_at_mut(w);
        for (m, p) in rest[0].iter_mut().zip(&done[w - 1]) {
            *m = m.min(*p);
        }
    }
    records
        .iter()
        .map(|r| {
            let m = &mins[window(r)];
            ProbeRecord {
                delays: r.delays.iter().zip(m).map(|(d, m)| d.map(|d| (d - m).max(0.0))).collect(),
                ..r.clone()
            }
        })
        .collect()
}

/// Monitoring output of one link in one window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChartPoint {
    /// Chart value: EWMA level, CUSUM sum, or smoothed quantile bin.
    pub value: f64,
    /// The limit on the monitored side that `value` is compared against.
    pub limit: f64,
    pub alarm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkWindow {
    pub link: LinkId,
    pub alpha: DelayPmf,
    /// Estimated `P(delay <= unit)`.
    pub p_le: f64,
    /// The same probability from the simulator's own link delays.
    pub true_p_le: Option<f64>,
    /// Charts only advance on [`LinkStatus::Estimated`] windows.
    pub status: LinkStatus,
    /// `None` while the window is part of the baseline.
    pub chart: Option<ChartPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowReport {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    pub probes: usize,
    pub lost: usize,
    pub patterns: usize,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time_s: f64,
    pub links: Vec<LinkWindow>,
}

impl WindowReport {
    pub fn alarms(&self) -> impl Iterator<Item = LinkId> + '_ {
        self.links.iter().filter(|l| l.chart.as_ref().is_some_and(|c| c.alarm)).map(|l| l.link)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    /// Config with calibration applied; reruns reproduce the same reports.
    pub config: ExperimentConfig,
    pub reports: Vec<WindowReport>,
    pub statistic: String,
}

impl ExperimentOutcome {
    pub fn any_alarm(&self) -> bool {
        self.reports.iter().any(|r| r.alarms().next().is_some())
    }
}

struct Simulated {
    records: Vec<ProbeRecord>,
    /// `truth[window][link]`.
    truth: Vec<Vec<Option<f64>>>,
    min_filter: bool,
}

fn simulate(tree: &LogicalTree, cfg: &ExperimentConfig) -> Result<Simulated, HarnessError> {
    let windows = cfg.window_count();
    let unit = cfg.monitoring.unit;
    match &cfg.simulation {
        Simulation::Generative(g) => {
            let truth = match &g.truth {
                Some(t) => t.clone(),
                None => vec![default_truth(cfg.binning.top_bin); tree.link_count()],
            };
            let n = (cfg.duration * g.probe_rate + 1e-9).floor() as u64;
            let records = netsim::run_generative(
                tree,
                &truth,
                &GenerativeConfig {
                    n_probes: n,
                    binning: cfg.binning,
                    probe_interval: 1.0 / g.probe_rate,
                    seed: cfg.seed,
                },
            )?;
            let p: Vec<Option<f64>> = truth.iter().map(|t| t.cdf_at(unit).ok()).collect();
            Ok(Simulated { records, truth: vec![p; windows], min_filter: false })
        }
        Simulation::Queueing(q) => {
            let sc = QueueingScenario {
                links: q.links.clone(),
                traffic: q.traffic.clone(),
                probe_rate: q.probe_rate,
                probe_bytes: q.probe_bytes,
                events: cfg.events.clone(),
                duration: cfg.duration,
                warmup: q.warmup,
                seed: cfg.seed,
            };
            let run = netsim::run_queueing(tree, &sc)?;
            let probe_bits = q.probe_bytes as f64 * 8.0;
            let mut hits = vec![vec![(0usize, 0usize); tree.link_count()]; windows];
            for (k, delays) in run.link_delays.iter().enumerate() {
                let l = sc.link_config(LinkId::from_index(k));
                let fixed = if q.remove_fixed_delay {
                    l.propagation_s + probe_bits / l.capacity_bps
                } else {
                    0.0
                };
                for (rec, d) in run.records.iter().zip(delays) {
                    let w = (rec.send_time / cfg.window_length).floor() as usize;
                    let Some(d) = d else { continue };
                    if w < windows {
                        let u = discretize((*d - fixed).max(0.0), &cfg.binning).unwrap_or(cfg.binning.top_bin);
                        let h = &mut hits[w][k];
                        h.1 += 1;
                        if u <= unit {
                            h.0 += 1;
                        }
                    }
                }
            }
            let truth = hits
                .into_iter()
                .map(|row| {
                    row.into_iter()
                        .map(|(le, n)| (n > 0).then(|| le as f64 / n as f64))
                        .collect()
                })
                .collect();
            Ok(Simulated { records: run.records, truth, min_filter: q.remove_fixed_delay })
        }
    }
}

/// What one window's data say about each link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkStatus {
    Estimated,
    /// Every leaf below the link's upstream node sat in the top bin, so the
    /// link's delay is hidden; its estimate is carried over.
    Hidden,
    /// The link is estimated, but saturated sibling subtrees leave it in
    /// series with a neighbour, so only their sum is identified.
    Unseparated,
}

impl LinkStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            LinkStatus::Estimated => "estimated",
            LinkStatus::Hidden => "hidden",
            LinkStatus::Unseparated => "unseparated",
        }
    }
}

/// Classifies links for one window. A node is dark when all leaves below
/// it are in the top bin for at least `threshold` of the probes (by
/// weight); dark subtrees carry no delay information. Links leaving a dark
/// node are hidden, and a non-root internal node left with a single
/// non-dark child joins its in-link and that child's link in series.
pub fn link_status(
    tree: &LogicalTree,
    obs: &ObservationSet,
    top_bin: usize,
    threshold: f64,
) -> Vec<LinkStatus> {
    let mut status = vec![LinkStatus::Estimated; tree.link_count()];
    let total = obs.total_weight();
    if !(total > 0.0) || threshold > 1.0 {
        return status;
    }
    let leaves = tree.leaves();
    let paths: Vec<Vec<LinkId>> =
        leaves.iter().map(|&l| tree.path_links(l).expect("leaf")).collect();
    let dark: Vec<bool> = (0..tree.node_count())
        .map(|v| {
            let v = crate::topology::NodeId(v);
            let Some(k) = tree.in_link(v) else { return false };
            let below: Vec<usize> = (0..paths.len()).filter(|&i| paths[i].contains(&k)).collect();
            let saturated: f64 = obs
                .patterns()
                .iter()
                .filter(|(p, _)| below.iter().all(|&i| p[i] as usize == top_bin))
                .map(|(_, w)| w)
                .sum();
            saturated / total >= threshold
        })
        .collect();
    for &v in tree.topological_order() {
        let Some(k) = tree.in_link(v) else { continue };
        if tree.parent(v).is_some_and(|p| dark[p.0]) {
            status[k.index()] = LinkStatus::Hidden;
            continue;
        }
        if dark[v.0] || tree.is_leaf(v) {
            continue;
        }
        let lit: Vec<_> = tree.children(v).iter().filter(|c| !dark[c.0]).collect();
        if let [c] = lit[..] {
            let down = tree.in_link(*c).expect("child link");
            for l in [k, down] {
                status[l.index()] = LinkStatus::Unseparated;
            }
        }
    }
    status
}

/// EM estimate of one window plus what the window said about each link.
#[derive(Debug, Clone)]
pub struct WindowInversion {
    pub result: EmResult,
    pub status: Vec<LinkStatus>,
    pub secs: f64,
}

fn invert(
    tree: &LogicalTree,
    binning: &BinningSpec,
    em: &EmConfig,
    obs: &ObservationSet,
    init: &EmInit,
    window: usize,
) -> Result<WindowInversion, HarnessError> {
    if obs.is_empty() {
        return Err(HarnessError::EmptyWindow { window });
    }
    let t0 = Instant::now();
    let status = link_status(tree, obs, binning.top_bin, em.saturation_hold);
    let held: Vec<LinkId> = match init {
        EmInit::Given(_) => tree
            .links()
            .filter(|k| status[k.index()] == LinkStatus::Hidden)
            .collect(),
        EmInit::Uniform => Vec::new(),
    };
    let result = em_invert_holding(tree, obs, binning, init, &em.options(), &held)
        .map_err(|source| HarnessError::Window { window, source })?;
    Ok(WindowInversion { result, status, secs: t0.elapsed().as_secs_f64() })
}

/// Inverts every window, warm-starting from the previous window when
/// `em.init` asks for it.
pub fn invert_windows(
    tree: &LogicalTree,
    sets: &[ObservationSet],
    binning: &BinningSpec,
    em: &EmConfig,
) -> Result<Vec<WindowInversion>, HarnessError> {
    let results = match em.init {
        InitStrategy::Uniform => map_range(em.execution, sets.len(), |w| {
            invert(tree, binning, em, &sets[w], &EmInit::Uniform, w)
        })
        .into_iter()
        .collect::<Result<_, _>>()?,
        InitStrategy::PreviousWindow => {
            let mut v: Vec<WindowInversion> = Vec::with_capacity(sets.len());
            for (w, set) in sets.iter().enumerate() {
                let init = match v.last() {
                    Some(prev) => EmInit::Given(prev.result.pmfs.clone()),
                    None => EmInit::Uniform,
                };
                v.push(invert(tree, binning, em, set, &init, w)?);
            }
            v
        }
    };
    for (w, inv) in results.iter().enumerate() {
        let odd: Vec<String> = tree
            .links()
            .filter(|k| inv.status[k.index()] != LinkStatus::Estimated)
            .map(|k| format!("{k}:{}", inv.status[k.index()].as_str()))
            .collect();
        info!(
            "window {w}: {} patterns, {} iterations, loglik {:.3}, {:.2}s{}",
            sets[w].len(),
            inv.result.iterations,
            inv.result.loglik,
            inv.secs,
            if odd.is_empty() { String::new() } else { format!(", {}", odd.join(" ")) }
        );
    }
    Ok(results)
}

/// Name of the monitored statistic as written to `alarms.csv`.
pub fn statistic_name(m: &MonitoringConfig) -> String {
    match m.method {
        MonitorMethod::EwmaOnP => format!("ewma_p_le_{}", m.unit),
        MonitorMethod::CusumOnP => format!("cusum_p_le_{}", m.unit),
        MonitorMethod::EwmaOnCdf => format!("ewma_cdf_q{}", fmt_g12(m.quantile)),
    }
}

fn side_limit(dir: Direction, value: f64, lower: f64, upper: f64) -> f64 {
    match dir {
        Direction::Lower => lower,
        Direction::Upper => upper,
        Direction::TwoSided => {
            if value - lower < upper - value {
                lower
            } else {
                upper
            }
        }
    }
}

/// One chart update from a window's estimate.
type Stepper<'a> = Box<dyn FnMut(&DelayPmf) -> Result<ChartPoint, MonitorError> + 'a>;

/// Charts one link. `windows[i]` is the window estimate; `sub` holds the
/// baseline slice estimates. A window that is not `informative` leaves the
/// chart where it was.
fn chart_link(
    m: &MonitoringConfig,
    baseline_windows: usize,
    windows: &[&DelayPmf],
    sub: &[&DelayPmf],
    informative: &[bool],
) -> Result<Vec<Option<ChartPoint>>, MonitorError> {
    let p = |d: &DelayPmf| d.cdf()[m.unit];
    let nb = baseline_windows.min(windows.len());
    let mut out = vec![None; nb];
    if nb == windows.len() {
        return Ok(out);
    }
    let baseline = || -> Result<Baseline, MonitorError> {
        let spread = calibrate_baseline(&sub.iter().map(|d| p(d)).collect::<Vec<_>>())?;
        let mean = windows[..nb].iter().map(|d| p(d)).sum::<f64>() / nb as f64;
        Ok(Baseline { mean, sd: spread.sd.max(m.min_sigma), degenerate: spread.degenerate })
    };
    let (mut step, mut last): (Stepper, _) =
        match m.method {
            MonitorMethod::EwmaOnP => {
                let b = baseline()?;
                let mut st = EwmaState::calibrated(m.lambda, m.limit, m.direction, b)?;
                let start = ChartPoint { value: b.mean, limit: b.mean, alarm: false };
                let f = move |d: &DelayPmf| {
                    let s = st.step(p(d))?;
                    Ok(ChartPoint {
                        value: s.value,
                        limit: side_limit(m.direction, s.value, s.lower, s.upper),
                        alarm: s.alarm,
                    })
                };
                (Box::new(f), start)
            }
            MonitorMethod::CusumOnP => {
                let b = baseline()?;
                let mut st =
                    CusumState::new(b.mean, m.cusum_kappa * b.sd, m.cusum_h * b.sd, m.direction)?;
                let start = ChartPoint { value: 0.0, limit: st.threshold(), alarm: false };
                let f = move |d: &DelayPmf| {
                    let s = st.step(p(d))?;
                    let (hi, lo) = st.sums();
                    let value = match m.direction {
                        Direction::Lower => lo,
                        Direction::Upper => hi,
                        Direction::TwoSided => hi.max(lo),
                    };
                    Ok(ChartPoint { value, limit: st.threshold(), alarm: s.alarm })
                };
                (Box::new(f), start)
            }
            MonitorMethod::EwmaOnCdf => {
                // Falling P(delay <= unit) means delay quantiles moving up, so
                // the lower side of the probability is the upper side in bins.
                let bins: Vec<usize> = sub
                    .iter()
                    .map(|d| {
                        let c = d.cdf();
                        c.iter().position(|&v| v >= m.quantile).unwrap_or(c.len() - 1)
                    })
                    .collect();
                let lo_bin = *bins.iter().min().unwrap_or(&0) as f64;
                let hi_bin = *bins.iter().max().unwrap_or(&0) as f64;
                let mut init = vec![0.0; windows[0].probs().len()];
                for d in &windows[..nb] {
                    for (s, c) in init.iter_mut().zip(d.cdf()) {
                        *s += c / nb as f64;
                    }
                }
                let mut st = CdfEwmaState::new(m.lambda, &init)?;
                let limit = if m.direction == Direction::Upper { lo_bin } else { hi_bin };
                let start =
                    ChartPoint { value: st.quantile_bin(m.quantile)? as f64, limit, alarm: false };
                let f = move |d: &DelayPmf| {
                    st.step(&d.cdf())?;
                    let q = st.quantile_bin(m.quantile)? as f64;
                    let (alarm, limit) = match m.direction {
                        Direction::Lower => (q > hi_bin, hi_bin),
                        Direction::Upper => (q < lo_bin, lo_bin),
                        Direction::TwoSided => {
                            (q > hi_bin || q < lo_bin, if q < lo_bin { lo_bin } else { hi_bin })
                        }
                    };
                    Ok(ChartPoint { value: q, limit, alarm })
                };
                (Box::new(f), start)
            }
        };
    for (d, &info) in windows[nb..].iter().zip(&informative[nb..]) {
        if info {
            last = step(d)?;
        }
        out.push(Some(last.clone()));
    }
    Ok(out)
}

/// Runs the full pipeline. Calibration, if configured, happens first.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome, HarnessError> {
    let cfg = config.resolved()?;
    let tree = cfg.load_tree()?;
    if let Identifiability::NonIdentifiable { chains } = tree.check_identifiability() {
        warn!("topology is not identifiable; links in series: {chains:?}");
    }
    let n_windows = cfg.window_count();
    let sim = simulate(&tree, &cfg)?;
    let records = if sim.min_filter {
        subtract_window_minimum(&sim.records, cfg.window_length)
    } else {
        sim.records
    };
    let mut windows = window_records(&records, cfg.window_length, &cfg.binning)
        .map_err(|source| HarnessError::Window { window: 0, source })?;
    windows.truncate(n_windows);
    while windows.len() < n_windows {
        let i = windows.len();
        windows.push(WindowData {
            index: i,
            start: i as f64 * cfg.window_length,
            end: (i + 1) as f64 * cfg.window_length,
            observations: Vec::new(),
            lost: 0,
        });
    }
    let sets: Vec<ObservationSet> = windows.iter().map(WindowData::observation_set).collect();
    let exec = cfg.em.execution;

    let results = invert_windows(&tree, &sets, &cfg.binning, &cfg.em)?;

    let nb = cfg.baseline_windows.min(n_windows);
    let parts = cfg.monitoring.sub_windows;
    let sub: Vec<EmResult> = map_range(exec, nb * parts, |i| {
        let (w, s) = (i / parts, i % parts);
        let init = EmInit::Given(results[w].result.pmfs.clone());
        invert(&tree, &cfg.binning, &cfg.em, &windows[w].slice(s, parts), &init, w).map(|i| i.result)
    })
    .into_iter()
    .collect::<Result<_, _>>()?;

    let mut charts = Vec::with_capacity(tree.link_count());
    for k in tree.links() {
        let per_window: Vec<&DelayPmf> = results.iter().map(|i| i.result.pmf(k)).collect();
        let per_sub: Vec<&DelayPmf> = sub.iter().map(|r| r.pmf(k)).collect();
        let informative: Vec<bool> =
            results.iter().map(|i| i.status[k.index()] == LinkStatus::Estimated).collect();
        charts.push(
            chart_link(&cfg.monitoring, cfg.baseline_windows, &per_window, &per_sub, &informative)
                .map_err(|source| HarnessError::Monitor { link: k, source })?,
        );
    }

    let unit = cfg.monitoring.unit;
    let reports = windows
        .iter()
        .zip(&results)
        .enumerate()
        .map(|(w, (wd, inv))| {
            let r = &inv.result;
            WindowReport {
            index: w,
            start: wd.start,
            end: wd.end,
            probes: wd.probes(),
            lost: wd.lost,
            patterns: sets[w].len(),
            loglik: r.loglik,
            iterations: r.iterations,
            converged: r.converged,
            wall_time_s: inv.secs,
            links: tree
                .links()
                .map(|k| LinkWindow {
                    link: k,
                    alpha: r.pmf(k).clone(),
                    p_le: r.pmf(k).cdf()[unit],
                    true_p_le: sim.truth[w][k.index()],
                    status: inv.status[k.index()],
                    chart: charts[k.index()][w].clone(),
                })
                .collect(),
            }
        })
        .collect();
    let statistic = statistic_name(&cfg.monitoring);
    Ok(ExperimentOutcome { config: cfg, reports, statistic })
}

struct Csv(String);

impl Csv {
    fn new(header: &[&str]) -> Self {
        let mut c = Csv(String::new());
        c.row(header.iter().map(|s| s.to_string()));
        c
    }

    fn row(&mut self, cells: impl IntoIterator<Item = String>) {
        let mut first = true;
        for cell in cells {
            if !first {
                self.0.push(',');
            }
            first = false;
            self.0.push_str(&cell);
        }
        self.0.push('\n');
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_g12).unwrap_or_default()
}

/// CSV and SVG contents keyed by file name, in write order.
pub fn render_reports(
    outcome: &ExperimentOutcome,
) -> Result<Vec<(String, String)>, HarnessError> {
    let reports = &outcome.reports;
    if reports.is_empty() {
        return Err(HarnessError::EmptyReports);
    }
    let unit = outcome.config.monitoring.unit;
    let p_col = format!("p_le_{unit}");
    let mut alpha = Csv::new(&["window_index", "link_id", "bin_j", "alpha_hat"]);
    let mut summary = Csv::new(&[
        "window_index",
        "link_id",
        &p_col,
        "loglik",
        "iterations",
        &format!("true_{p_col}"),
        "status",
    ]);
    let mut alarms = Csv::new(&["window_index", "link_id", "statistic", "z_value", "limit", "alarm"]);
    let mut windows = Csv::new(&[
        "window_index",
        "start_s",
        "end_s",
        "probes",
        "lost",
        "patterns",
        "loglik",
        "iterations",
        "converged",
    ]);
    for r in reports {
        windows.row([
            r.index.to_string(),
            fmt_g12(r.start),
            fmt_g12(r.end),
            r.probes.to_string(),
            r.lost.to_string(),
            r.patterns.to_string(),
            fmt_g12(r.loglik),
            r.iterations.to_string(),
            u8::from(r.converged).to_string(),
        ]);
        for l in &r.links {
            for (j, a) in l.alpha.probs().iter().enumerate() {
                alpha.row([r.index.to_string(), l.link.to_string(), j.to_string(), fmt_g12(*a)]);
            }
            summary.row([
                r.index.to_string(),
                l.link.to_string(),
                fmt_g12(l.p_le),
                fmt_g12(r.loglik),
                r.iterations.to_string(),
                opt(l.true_p_le),
                l.status.as_str().to_string(),
            ]);
            if let Some(c) = &l.chart {
                alarms.row([
                    r.index.to_string(),
                    l.link.to_string(),
                    outcome.statistic.clone(),
                    fmt_g12(c.value),
                    fmt_g12(c.limit),
                    u8::from(c.alarm).to_string(),
                ]);
            }
        }
    }
    let mut echo = serde_json::to_string_pretty(&outcome.config)?;
    echo.push('\n');
    let mut files = vec![
        ("alpha.csv".to_string(), alpha.0),
        ("summary.csv".to_string(), summary.0),
        ("alarms.csv".to_string(), alarms.0),
        ("windows.csv".to_string(), windows.0),
        ("config_echo.json".to_string(), echo),
    ];
    for (i, l) in reports[0].links.iter().enumerate() {
        files.push((format!("link_{}.svg", l.link), link_svg(reports, i, unit)));
    }
    Ok(files)
}

/// Writes `alpha.csv`, `summary.csv`, `alarms.csv`, `windows.csv`,
/// `config_echo.json` and one `link_<k>.svg` per link.
pub fn emit_reports(outcome: &ExperimentOutcome, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let files = render_reports(outcome)?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}

const DARK: &str = "#1b3b6f";
const LIGHT: &str = "#9cc3e6";

/// Estimate (dark) against truth (light) across windows for one link.
fn link_svg(reports: &[WindowReport], slot: usize, unit: usize) -> String {
    let (w, h) = (480.0, 300.0);
    let (left, right, top, bottom) = (56.0, 16.0, 36.0, 44.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let n = reports.len();
    let x = |i: usize| {
        if n == 1 {
            left + pw / 2.0
        } else {
            left + pw * i as f64 / (n - 1) as f64
        }
    };
    let y = |p: f64| top + ph * (1.0 - p.clamp(0.0, 1.0));
    let link = reports[0].links[slot].link;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">Link {link}: P(delay &lt;= {unit} unit{})</text>"#,
        w / 2.0,
        if unit == 1 { "" } else { "s" }
    );
    let baseline = reports.iter().take_while(|r| r.links[slot].chart.is_none()).count();
    if baseline > 0 && n > 1 {
        let x1 = x(baseline - 1) + if baseline < n { pw / (n - 1) as f64 / 2.0 } else { 0.0 };
        let _ = writeln!(
            s,
            r##"<rect x="{left}" y="{top}" width="{:.2}" height="{ph}" fill="#f0f0f0"/>"##,
            x1 - left
        );
    }
    for tick in 0..=4 {
        let p = tick as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{0:.2}" x2="{1}" y2="{0:.2}" stroke="#dddddd"/><text x="{2}" y="{3:.2}" text-anchor="end">{p}</text>"##,
            y(p),
            w - right,
            left - 6.0,
            y(p) + 4.0
        );
    }
    for (i, r) in reports.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            x(i),
            h - bottom + 16.0,
            r.index + 1
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">window</text>"#,
        left + pw / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#888888"/>"##
    );
    let series = |vals: Vec<Option<f64>>, color: &str, width: f64, s: &mut String| {
        let pts: Vec<String> = vals
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| format!("{:.2},{:.2}", x(i), y(v))))
            .collect();
        if pts.len() > 1 {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}"/>"#,
                pts.join(" ")
            );
        }
        for p in &pts {
            let (cx, cy) = p.split_once(',').unwrap();
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        }
    };
    series(reports.iter().map(|r| r.links[slot].true_p_le).collect(), LIGHT, 3.0, &mut s);
    series(reports.iter().map(|r| Some(r.links[slot].p_le)).collect(), DARK, 2.0, &mut s);
    for (i, r) in reports.iter().enumerate() {
        if r.links[slot].chart.as_ref().is_some_and(|c| c.alarm) {
            let _ = writeln!(
                s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="7" fill="none" stroke="#c0392b" stroke-width="2"/>"##,
                x(i),
                y(r.links[slot].p_le)
            );
        }
    }
    let ly = h - 8.0;
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="{DARK}" stroke-width="2"/><text x="{2}" y="{3}">estimate</text>"#,
        ly - 4.0,
        left + 18.0,
        left + 22.0,
        ly
    );
    let _ = writeln!(
        s,
        r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{LIGHT}" stroke-width="3"/><text x="{3}" y="{4}">true</text>"#,
        left + 84.0,
        ly - 4.0,
        left + 102.0,
        left + 106.0,
        ly
    );
    s.push_str("</svg>\n");
    s
}
