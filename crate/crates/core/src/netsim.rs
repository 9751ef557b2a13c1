//! Probe traffic generation.
//!
//! Two modes:
//!
//! * [`run_generative`] samples per-link delay units straight from known
//!   pmfs. Every probe draws one value per link and all leaves below a link
//!   see the same draw, which is exactly the model [`crate::tomography`]
//!   inverts.
//! * [`run_queueing`] simulates drop-tail FIFO links carrying background
//!   flows (Poisson flow arrivals, Pareto lifetimes, constant-rate packets)
//!   plus multicast probes sent at a constant rate from the root.
//!
//! Background traffic never leaves its link and nothing reacts to loss, so
//! each link can be simulated on its own once the probe arrival times from
//! its parent link are known. Links are therefore processed root to leaves,
//! each with its own RNG stream derived from the master seed.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tomography::{BinningSpec, DelayPmf};
use crate::topology::{LinkId, LogicalTree};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("missing pmf for link {0}")]
    MissingPmf(LinkId),
    #[error("event references unknown link {0}")]
    UnknownLink(usize),
    #[error("duration must be positive, got {0}")]
    BadDuration(f64),
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Inverse-CDF Pareto draw: `scale * u^(-1/shape)`.
pub fn sample_pareto(shape: f64, scale: f64, u: f64) -> Result<f64, SimError> {
    if !(u > 0.0 && u <= 1.0) {
        return Err(SimError::BadParameter(format!("uniform draw {u} outside (0, 1]")));
    }
    if !(shape > 1.0) {
        return Err(SimError::BadParameter(format!("pareto shape {shape} must exceed 1")));
    }
    if !(scale > 0.0) {
        return Err(SimError::BadParameter(format!("pareto scale {scale} must be positive")));
    }
    Ok(scale * u.powf(-1.0 / shape))
}

/// One multicast probe as seen by every leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub index: u64,
    pub send_time: f64,
    /// End-to-end delay per leaf in [`LogicalTree::leaves`] order; `None` = lost.
    pub delays: Vec<Option<f64>>,
}

impl ProbeRecord {
    pub fn is_lost(&self) -> bool {
        self.delays.iter().any(Option::is_none)
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Uniform draw in `(0, 1]`.
fn unit_open(rng: &mut ChaCha8Rng) -> f64 {
    1.0 - rng.random::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerativeConfig {
    pub n_probes: u64,
    pub binning: BinningSpec,
    /// Spacing between probe send times (seconds).
    #[serde(default = "default_probe_interval")]
    pub probe_interval: f64,
    pub seed: u64,
}

fn default_probe_interval() -> f64 {
    0.1
}

fn draw_unit(cdf: &[f64], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

/// Samples probes from the saturating-sum model with the given link pmfs.
pub fn run_generative(
    tree: &LogicalTree,
    truth: &[DelayPmf],
    cfg: &GenerativeConfig,
) -> Result<Vec<ProbeRecord>, SimError> {
    if truth.len() < tree.link_count() {
        return Err(SimError::MissingPmf(LinkId::from_index(truth.len())));
    }
    let top = cfg.binning.top_bin;
    for (i, p) in truth.iter().enumerate() {
        if p.top_bin() != top {
            return Err(SimError::BadParameter(format!(
                "pmf for link {} has top bin {}, binning says {top}",
                i + 1,
                p.top_bin()
            )));
        }
    }
    let cdfs: Vec<Vec<f64>> = truth.iter().map(|p| p.cdf()).collect();
    let order = tree.topological_order();
    let leaves = tree.leaves();
    let mut rng = rng_for(cfg.seed, 0);
    let mut acc = vec![0usize; tree.node_count()];
    let mut out = Vec::with_capacity(cfg.n_probes as usize);
    for i in 0..cfg.n_probes {
        for &v in order {
            acc[v.0] = match (tree.parent(v), tree.in_link(v)) {
                (Some(p), Some(k)) => {
                    let x = draw_unit(&cdfs[k.index()], rng.random::<f64>());
                    (acc[p.0] + x).min(top)
                }
                _ => 0,
            };
        }
        out.push(ProbeRecord {
            index: i,
            send_time: i as f64 * cfg.probe_interval,
            delays: leaves
                .iter()
                .map(|l| Some(acc[l.0] as f64 * cfg.binning.bin_width))
                .collect(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub capacity_bps: f64,
    pub propagation_s: f64,
    pub buffer_packets: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self { capacity_bps: 10_000_000.0, propagation_s: 0.001, buffer_packets: 100 }
    }
}

impl LinkConfig {
    fn validate(&self) -> Result<(), SimError> {
        if !(self.capacity_bps > 0.0) || !(self.propagation_s >= 0.0) || self.buffer_packets < 1 {
            return Err(SimError::BadParameter(format!("link config {self:?}")));
        }
        Ok(())
    }
}

/// Background flow process of one link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficProfile {
    /// Flow arrivals per second (Poisson).
    pub flow_arrival_rate: f64,
    /// Pareto lifetime shape (> 1) and scale (seconds).
    pub pareto_shape: f64,
    pub pareto_scale: f64,
    /// Sending rate of one flow while active (bits/second).
    pub flow_rate_bps: f64,
    pub packet_bytes: u32,
    /// Scales the flow arrival rate.
    pub multiplier: f64,
}

impl Default for TrafficProfile {
    fn default() -> Self {
        Self {
            flow_arrival_rate: 1.0,
            pareto_shape: 1.5,
            pareto_scale: 1.0,
            flow_rate_bps: 1_000_000.0,
            packet_bytes: 1000,
            multiplier: 1.0,
        }
    }
}

impl TrafficProfile {
    fn validate(&self) -> Result<(), SimError> {
        let ok = self.flow_arrival_rate >= 0.0
            && self.pareto_shape > 1.0
            && self.pareto_scale > 0.0
            && self.flow_rate_bps > 0.0
            && self.packet_bytes > 0
            && self.multiplier > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SimError::BadParameter(format!("traffic profile {self:?}")))
        }
    }

    pub fn mean_lifetime(&self) -> f64 {
        self.pareto_shape * self.pareto_scale / (self.pareto_shape - 1.0)
    }

    /// Long-run offered load as a fraction of `capacity_bps`.
    pub fn offered_load(&self, capacity_bps: f64) -> f64 {
        self.flow_arrival_rate * self.multiplier * self.mean_lifetime() * self.flow_rate_bps
            / capacity_bps
    }
}

/// Sets a link's traffic multiplier from `time` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub time: f64,
    pub link: usize,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueueingScenario {
    /// One entry applies to every link; otherwise one per link.
    pub links: Vec<LinkConfig>,
    /// Same convention as `links`.
    pub traffic: Vec<TrafficProfile>,
    pub probe_rate: f64,
    pub probe_bytes: u32,
    pub events: Vec<ScenarioEvent>,
    pub duration: f64,
    /// Simulated time before the first probe, letting queues reach steady state.
    pub warmup: f64,
    pub seed: u64,
}

impl Default for QueueingScenario {
    fn default() -> Self {
        Self {
            links: vec![LinkConfig::default()],
            traffic: vec![TrafficProfile::default()],
            probe_rate: 10.0,
            probe_bytes: 40,
            events: Vec::new(),
            duration: 3600.0,
            warmup: 300.0,
            seed: 1,
        }
    }
}

impl QueueingScenario {
    pub fn link_config(&self, k: LinkId) -> &LinkConfig {
        per_link(&self.links, k)
    }

    pub fn traffic_for(&self, k: LinkId) -> &TrafficProfile {
        per_link(&self.traffic, k)
    }

    pub fn probe_count(&self) -> u64 {
        (self.duration * self.probe_rate + 1e-9).floor() as u64
    }

    fn validate(&self, tree: &LogicalTree) -> Result<(), SimError> {
        if !(self.duration > 0.0) {
            return Err(SimError::BadDuration(self.duration));
        }
        if !(self.probe_rate > 0.0) || self.probe_bytes == 0 || !(self.warmup >= 0.0) {
            return Err(SimError::BadParameter("probe settings".into()));
        }
        let l = tree.link_count();
        for (name, n) in [("links", self.links.len()), ("traffic", self.traffic.len())] {
            if n != 1 && n != l {
                return Err(SimError::BadParameter(format!(
                    "`{name}` needs 1 or {l} entries, got {n}"
                )));
            }
        }
        for c in &self.links {
            c.validate()?;
        }
        for t in &self.traffic {
            t.validate()?;
        }
        for e in &self.events {
            if e.link == 0 || e.link > l {
                return Err(SimError::UnknownLink(e.link));
            }
            if !(e.multiplier > 0.0) || !(e.time >= 0.0 && e.time <= self.duration) {
                return Err(SimError::BadParameter(format!("event {e:?}")));
            }
        }
        Ok(())
    }
}

fn per_link<T>(v: &[T], k: LinkId) -> &T {
    if v.len() == 1 {
        &v[0]
    } else {
        &v[k.index()]
    }
}

/// Probe records plus the simulator's own view of every link.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueingRun {
    pub records: Vec<ProbeRecord>,
    /// `link_delays[k.index()][probe]`: time the probe spent on link `k`
    /// (queueing, transmission, propagation); `None` if it never crossed it.
    pub link_delays: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Time(f64);

impl Eq for Time {}

impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Active flow, ordered so the heap pops the earliest next packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Flow {
    next: Time,
    end: Time,
    id: u64,
}

impl PartialOrd for Flow {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Flow {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.next, other.id).cmp(&(self.next, self.id))
    }
}

/// Lazily produced, time-ordered background packet arrivals of one link.
struct Background {
    rng: ChaCha8Rng,
    profile: TrafficProfile,
    /// `(time, multiplier)` change points, sorted.
    changes: Vec<(f64, f64)>,
    interval: f64,
    next_flow: f64,
    flows: BinaryHeap<Flow>,
    next_id: u64,
    horizon: f64,
}

impl Background {
    fn new(
        rng: ChaCha8Rng,
        profile: TrafficProfile,
        changes: Vec<(f64, f64)>,
        start: f64,
        horizon: f64,
    ) -> Self {
        let interval = profile.packet_bytes as f64 * 8.0 / profile.flow_rate_bps;
        let mut s = Self {
            rng,
            profile,
            changes,
            interval,
            next_flow: f64::INFINITY,
            flows: BinaryHeap::new(),
            next_id: 0,
            horizon,
        };
        s.next_flow = s.draw_arrival_after(start);
        s
    }

    fn rate_at(&self, t: f64) -> f64 {
        let mut m = self.profile.multiplier;
        for &(ct, cm) in &self.changes {
            if ct <= t {
                m = cm;
            } else {
                break;
            }
        }
        self.profile.flow_arrival_rate * m
    }

    /// Next Poisson arrival after `t` under the piecewise-constant rate,
    /// by inverting the integrated intensity with one Exp(1) draw.
    fn draw_arrival_after(&mut self, mut t: f64) -> f64 {
        let mut remaining = -unit_open(&mut self.rng).ln();
        loop {
            let rate = self.rate_at(t);
            let next_change =
                self.changes.iter().map(|c| c.0).find(|&ct| ct > t).unwrap_or(f64::INFINITY);
            if rate > 0.0 {
                let dt = remaining / rate;
                if t + dt < next_change {
                    return t + dt;
                }
                remaining -= (next_change - t) * rate;
            }
            if !next_change.is_finite() {
                return f64::INFINITY;
            }
            t = next_change;
        }
    }

    fn next_packet(&mut self) -> Option<f64> {
        loop {
            let flow_t = self.flows.peek().map(|f| f.next.0).unwrap_or(f64::INFINITY);
            if self.next_flow <= flow_t {
                let start = self.next_flow;
                if start > self.horizon {
                    return None;
                }
                let u = unit_open(&mut self.rng);
                let life = self.profile.pareto_scale * u.powf(-1.0 / self.profile.pareto_shape);
                self.flows.push(Flow { next: Time(start), end: Time(start + life), id: self.next_id });
                self.next_id += 1;
                self.next_flow = self.draw_arrival_after(start);
                continue;
            }
            let mut f = self.flows.pop()?;
            let t = f.next.0;
            if t > self.horizon {
                return None;
            }
            f.next = Time(t + self.interval);
            if f.next < f.end {
                self.flows.push(f);
            }
            return Some(t);
        }
    }
}

/// One drop-tail FIFO link. Returns, per probe, the arrival time at the far
/// end (`None` when dropped here or upstream).
fn simulate_link(
    cfg: &LinkConfig,
    mut background: Background,
    probes_in: &[Option<f64>],
    probe_bits: f64,
    bg_bits: f64,
) -> Vec<Option<f64>> {
    let mut out = vec![None; probes_in.len()];
    let mut in_system: VecDeque<f64> = VecDeque::with_capacity(cfg.buffer_packets + 1);
    let mut last_departure = f64::NEG_INFINITY;
    let mut bg = background.next_packet();
    let mut admit = |t: f64, bits: f64, q: &mut VecDeque<f64>| -> Option<f64> {
        while q.front().is_some_and(|&d| d <= t) {
            q.pop_front();
        }
        if q.len() >= cfg.buffer_packets {
            return None;
        }
        let dep = t.max(last_departure) + bits / cfg.capacity_bps;
        last_departure = dep;
        q.push_back(dep);
        Some(dep)
    };
    for (i, p) in probes_in.iter().enumerate() {
        let Some(t) = *p else { continue };
        // Background packets arriving no later than the probe go first.
        while let Some(b) = bg.filter(|&b| b <= t) {
            admit(b, bg_bits, &mut in_system);
            bg = background.next_packet();
        }
        out[i] = admit(t, probe_bits, &mut in_system).map(|d| d + cfg.propagation_s);
    }
    out
}

fn link_events(events: &[ScenarioEvent], k: LinkId) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> =
        events.iter().filter(|e| e.link == k.0).map(|e| (e.time, e.multiplier)).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

/// Discrete-event simulation of multicast probing over loaded FIFO links.
pub fn run_queueing(tree: &LogicalTree, sc: &QueueingScenario) -> Result<QueueingRun, SimError> {
    sc.validate(tree)?;
    let n = sc.probe_count() as usize;
    let send: Vec<f64> = (0..n).map(|i| i as f64 / sc.probe_rate).collect();
    let probe_bits = sc.probe_bytes as f64 * 8.0;

    let mut arrivals: Vec<Vec<Option<f64>>> = vec![Vec::new(); tree.node_count()];
    arrivals[tree.root().0] = send.iter().map(|&t| Some(t)).collect();
    let mut link_delays = vec![Vec::new(); tree.link_count()];
    // Generate background until every probe has had time to drain.
    let horizon = sc.duration + 60.0;

    for &v in tree.topological_order() {
        let (Some(p), Some(k)) = (tree.parent(v), tree.in_link(v)) else { continue };
        let profile = *sc.traffic_for(k);
        let background = Background::new(
            rng_for(sc.seed, k.0 as u64),
            profile,
            link_events(&sc.events, k),
            -sc.warmup,
            horizon,
        );
        let input = std::mem::take(&mut arrivals[p.0]);
        let output = simulate_link(
            sc.link_config(k),
            background,
            &input,
            probe_bits,
            profile.packet_bytes as f64 * 8.0,
        );
        link_delays[k.index()] = input
            .iter()
            .zip(&output)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(b - a),
                _ => None,
            })
            .collect();
        arrivals[v.0] = output;
        // Siblings read the parent's arrivals too.
        arrivals[p.0] = input;
    }

    let records = (0..n)
        .map(|i| ProbeRecord {
            index: i as u64,
            send_time: send[i],
            delays: tree
                .leaves()
                .iter()
                .map(|l| arrivals[l.0][i].map(|a| a - send[i]))
                .collect(),
        })
        .collect();
    Ok(QueueingRun { records, link_delays })
}

/// Single-link pilot run: probe delays on one link carrying `profile`.
pub fn pilot_link_delays(
    cfg: &LinkConfig,
    profile: &TrafficProfile,
    probe_rate: f64,
    probe_bytes: u32,
    duration: f64,
    warmup: f64,
    seed: u64,
) -> Vec<f64> {
    let n = (duration * probe_rate).floor() as usize;
    let input: Vec<Option<f64>> = (0..n).map(|i| Some(i as f64 / probe_rate)).collect();
    let bg = Background::new(rng_for(seed, 0), *profile, Vec::new(), -warmup, duration + 60.0);
    let out = simulate_link(cfg, bg, &input, probe_bytes as f64 * 8.0, profile.packet_bytes as f64 * 8.0);
    input
        .iter()
        .zip(out)
        .filter_map(|(a, b)| Some(b? - (*a)?))
        .collect()
}

/// Settings for tuning the flow arrival rate so a target delay quantile
/// lands on the bin width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSpec {
    /// Delay (seconds) that should sit at `quantile`.
    pub target_delay: f64,
    pub quantile: f64,
    pub pilot_duration: f64,
    pub pilot_runs: u32,
    pub iterations: u32,
    /// Pilot runs use seeds `seed, seed + 1, ...`, independent of the experiment seed.
    pub seed: u64,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            target_delay: 0.005,
            quantile: 0.8,
            pilot_duration: 1800.0,
            pilot_runs: 2,
            iterations: 16,
            seed: 0xCA1B,
        }
    }
}

/// Bisection (in log space) on `flow_arrival_rate` using common random
/// numbers across trials. Returns the calibrated profile.
pub fn calibrate_flow_rate(
    cfg: &LinkConfig,
    template: &TrafficProfile,
    probe_rate: f64,
    probe_bytes: u32,
    spec: &CalibrationSpec,
) -> TrafficProfile {
    let per_flow = template.mean_lifetime() * template.flow_rate_bps / cfg.capacity_bps;
    let mut lo = (1e-4 / per_flow).ln();
    let mut hi = (1.5 / per_flow).ln();
    let quantile_at = |rate: f64| -> f64 {
        let p = TrafficProfile { flow_arrival_rate: rate, multiplier: 1.0, ..*template };
        let mut all = Vec::new();
        for r in 0..spec.pilot_runs.max(1) {
            all.extend(pilot_link_delays(
                cfg,
                &p,
                probe_rate,
                probe_bytes,
                spec.pilot_duration,
                300.0,
                spec.seed.wrapping_add(r as u64),
            ));
        }
        if all.is_empty() {
            return f64::INFINITY;
        }
        all.sort_by(f64::total_cmp);
        let idx = ((spec.quantile * all.len() as f64).ceil() as usize).clamp(1, all.len()) - 1;
        all[idx]
    };
    for _ in 0..spec.iterations {
        let mid = 0.5 * (lo + hi);
        if quantile_at(mid.exp()) < spec.target_delay {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    TrafficProfile { flow_arrival_rate: (0.5 * (lo + hi)).exp(), ..*template }
}

/// Shortest round-trip float formatting with 12 significant digits.
pub fn fmt_g12(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let s = if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        let mut s = format!("{x:.decimals$}");
        if s.contains('.') {
            while s.ends_with('0') {
                s.pop();
            }
            if s.ends_with('.') {
                s.pop();
            }
        }
        s
    } else {
        let mut m = format!("{x:.11e}");
        if let Some(e) = m.find('e') {
            let (mant, ex) = m.split_at(e);
            let mut mant = mant.to_string();
            while mant.ends_with('0') {
                mant.pop();
            }
            if mant.ends_with('.') {
                mant.pop();
            }
            m = format!("{mant}{ex}");
        }
        m
    };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

/// Writes records as `probe_index,send_time_s,leaf_id,delay_s,lost`.
pub fn write_records_csv<W: Write>(
    tree: &LogicalTree,
    records: &[ProbeRecord],
    out: W,
) -> Result<(), SimError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["probe_index", "send_time_s", "leaf_id", "delay_s", "lost"])?;
    let leaves: Vec<&str> = tree.leaves().iter().map(|&l| tree.name(l)).collect();
    let mut line = String::new();
    for r in records {
        for (leaf, d) in leaves.iter().zip(&r.delays) {
            line.clear();
            let _ = write!(line, "{}", r.index);
            w.write_record([
                line.as_str(),
                &fmt_g12(r.send_time),
                leaf,
                &d.map(fmt_g12).unwrap_or_default(),
                if d.is_some() { "0" } else { "1" },
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the CSV produced by [`write_records_csv`].
pub fn read_records_csv<R: std::io::Read>(
    tree: &LogicalTree,
    input: R,
) -> Result<Vec<ProbeRecord>, SimError> {
    let leaves = tree.leaves();
    let slot = |name: &str| leaves.iter().position(|&l| tree.name(l) == name);
    let mut rdr = csv::Reader::from_reader(input);
    let mut out: Vec<ProbeRecord> = Vec::new();
    let mut by_index: std::collections::BTreeMap<u64, usize> = Default::default();
    for row in rdr.records() {
        let row = row?;
        let bad = |what: &str| SimError::BadParameter(format!("bad {what} in row {row:?}"));
        let index: u64 = row.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("probe_index"))?;
        let send: f64 = row.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("send_time_s"))?;
        let leaf = row.get(2).and_then(slot).ok_or_else(|| bad("leaf_id"))?;
        let lost = row.get(4).map(|s| s.trim() == "1").unwrap_or(false);
        let delay = if lost {
            None
        } else {
            Some(row.get(3).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| bad("delay_s"))?)
        };
        let pos = *by_index.entry(index).or_insert_with(|| {
            out.push(ProbeRecord { index, send_time: send, delays: vec![None; leaves.len()] });
            out.len() - 1
        });
        out[pos].delays[leaf] = delay;
    }
    Ok(out)
}
