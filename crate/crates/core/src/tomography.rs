//! Link delay tomography on a multicast tree.
//!
//! Each link `k` adds a latent number of delay units `X_k ~ alpha_k` on
//! `{0..=b}`, independently across links and probes. A node's accumulated
//! delay is the saturating sum `min(A_parent + X_k, b)`; leaves observe their
//! accumulated delay. [`em_invert`] recovers every `alpha_k` by maximum
//! likelihood, using exact upward/downward message passing for the E-step.
//!
//! Observations are deduplicated into weighted patterns before inversion, so
//! the cost of one EM iteration scales with the number of distinct leaf
//! vectors rather than the number of probes.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Execution};
use crate::topology::{LinkId, LogicalTree, NodeId};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TomographyError {
    #[error("no observations")]
    EmptyObservations,
    #[error("invalid pmf: {0}")]
    InvalidPmf(String),
    #[error("missing pmf for link {0}")]
    MissingPmf(LinkId),
    #[error("pmf bin count mismatch: expected {expected}, got {got}")]
    BinMismatch { expected: usize, got: usize },
    #[error("negative delay {0}")]
    NegativeDelay(f64),
    #[error("unit {unit} outside 0..={top}")]
    UnitOutOfRange { unit: usize, top: usize },
    #[error("observation has {got} leaf values, tree has {expected} leaves")]
    PatternLength { expected: usize, got: usize },
    #[error("every observation pattern has zero probability under the model")]
    AllPatternsImpossible,
    #[error("invalid binning: q={q}, b={b}")]
    BadBinning { q: f64, b: usize },
    #[error(transparent)]
    Topology(#[from] crate::topology::TopologyError),
}

/// Bin width `q` (seconds) and top bin index `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinningSpec {
    pub bin_width: f64,
    pub top_bin: usize,
}

impl Default for BinningSpec {
    fn default() -> Self {
        Self { bin_width: 0.005, top_bin: 9 }
    }
}

impl BinningSpec {
    pub fn new(bin_width: f64, top_bin: usize) -> Result<Self, TomographyError> {
        let s = Self { bin_width, top_bin };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), TomographyError> {
        if !(self.bin_width > 0.0 && self.bin_width.is_finite()) || self.top_bin < 1 {
            return Err(TomographyError::BadBinning { q: self.bin_width, b: self.top_bin });
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.top_bin + 1
    }
}

/// `min(floor(delay / q), b)`.
pub fn discretize(delay: f64, spec: &BinningSpec) -> Result<usize, TomographyError> {
    if delay < 0.0 || delay.is_nan() {
        return Err(TomographyError::NegativeDelay(delay));
    }
    let r = delay / spec.bin_width;
    // Delays that are exact unit multiples (j * q) must land in bin j even
    // when the division comes out a hair below the integer.
    let j = (r + 1e-9 * r.max(1.0)).floor();
    Ok(if j >= spec.top_bin as f64 { spec.top_bin } else { j as usize })
}

/// Discretized delay distribution of one link over `0..=b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DelayPmf(Vec<f64>);

impl DelayPmf {
    pub fn new(probs: Vec<f64>) -> Result<Self, TomographyError> {
        if probs.len() < 2 {
            return Err(TomographyError::InvalidPmf("needs at least bins 0 and 1".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(TomographyError::InvalidPmf("negative or non-finite entry".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(TomographyError::InvalidPmf(format!("sums to {s}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(top_bin: usize) -> Self {
        Self(vec![1.0 / (top_bin + 1) as f64; top_bin + 1])
    }

    pub fn point_mass(top_bin: usize, at: usize) -> Self {
        let mut v = vec![0.0; top_bin + 1];
        v[at.min(top_bin)] = 1.0;
        Self(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn top_bin(&self) -> usize {
        self.0.len() - 1
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `P(X <= j)`.
    pub fn cdf_at(&self, j: usize) -> Result<f64, TomographyError> {
        if j > self.top_bin() {
            return Err(TomographyError::UnitOutOfRange { unit: j, top: self.top_bin() });
        }
        if j == self.top_bin() {
            return Ok(1.0);
        }
        Ok(self.0[..=j].iter().sum::<f64>().min(1.0))
    }

    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out: Vec<f64> = self
            .0
            .iter()
            .map(|p| {
                acc += p;
                acc.min(1.0)
            })
            .collect();
        *out.last_mut().unwrap() = 1.0;
        out
    }

    /// Raises `alpha(0)` to at least `floor`, rescaling the other bins so the
    /// total stays 1.
    pub fn with_zero_floor(mut self, floor: f64) -> Self {
        let a0 = self.0[0];
        if a0 < floor {
            let rest = 1.0 - a0;
            let scale = if rest > 0.0 { (1.0 - floor) / rest } else { 0.0 };
            for p in self.0.iter_mut().skip(1) {
                *p *= scale;
            }
            self.0[0] = floor;
        }
        self
    }

    /// Total-variation distance `0.5 * sum |p - q|`.
    pub fn total_variation(&self, other: &DelayPmf) -> f64 {
        0.5 * self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }
}

pub fn delay_cdf_at(pmf: &DelayPmf, j: usize) -> Result<f64, TomographyError> {
    pmf.cdf_at(j)
}

/// Saturating convolution: sums at or above `b` pool into bin `b`.
pub fn convolve_pmf(a: &DelayPmf, c: &DelayPmf) -> Result<DelayPmf, TomographyError> {
    if a.0.len() != c.0.len() {
        return Err(TomographyError::BinMismatch { expected: a.0.len(), got: c.0.len() });
    }
    Ok(DelayPmf(convolve_sat(&a.0, &c.0)))
}

fn convolve_sat(a: &[f64], c: &[f64]) -> Vec<f64> {
    let b = a.len() - 1;
    let mut out = vec![0.0; b + 1];
    for (u, &pu) in a.iter().enumerate() {
        if pu == 0.0 {
            continue;
        }
        for (v, &pv) in c.iter().enumerate() {
            out[(u + v).min(b)] += pu * pv;
        }
    }
    out
}

fn check_pmfs(tree: &LogicalTree, pmfs: &[DelayPmf]) -> Result<usize, TomographyError> {
    if pmfs.len() < tree.link_count() {
        return Err(TomographyError::MissingPmf(LinkId::from_index(pmfs.len())));
    }
    let nb = pmfs.first().map(|p| p.0.len()).unwrap_or(0);
    for p in pmfs {
        if p.0.len() != nb {
            return Err(TomographyError::BinMismatch { expected: nb, got: p.0.len() });
        }
    }
    Ok(nb)
}

/// Forward model for one leaf: saturating convolution along its path.
pub fn path_delay_pmf(
    tree: &LogicalTree,
    pmfs: &[DelayPmf],
    leaf: NodeId,
) -> Result<DelayPmf, TomographyError> {
    let nb = check_pmfs(tree, pmfs)?;
    let mut acc = DelayPmf::point_mass(nb - 1, 0);
    for k in tree.path_links(leaf)? {
        acc = convolve_pmf(&acc, &pmfs[k.index()])?;
    }
    Ok(acc)
}

/// Delay units seen at each leaf (in [`LogicalTree::leaves`] order) by one probe.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BinnedObservation {
    pub units: Vec<u16>,
}

impl BinnedObservation {
    pub fn new(units: Vec<u16>) -> Self {
        Self { units }
    }
}

/// Distinct observation patterns with (possibly fractional) multiplicities.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObservationSet {
    patterns: Vec<(Vec<u16>, f64)>,
}

impl ObservationSet {
    pub fn from_observations<'a, I>(obs: I) -> Self
    where
        I: IntoIterator<Item = &'a BinnedObservation>,
    {
        Self::from_weighted(obs.into_iter().map(|o| (o.units.clone(), 1.0)))
    }

    /// Merges duplicate patterns; output is sorted so results never depend
    /// on input order.
    pub fn from_weighted<I>(items: I) -> Self
    where
        I: IntoIterator<Item = (Vec<u16>, f64)>,
    {
        let mut map: BTreeMap<Vec<u16>, f64> = BTreeMap::new();
        for (p, w) in items {
            if w > 0.0 {
                *map.entry(p).or_insert(0.0) += w;
            }
        }
        Self { patterns: map.into_iter().collect() }
    }

    pub fn patterns(&self) -> &[(Vec<u16>, f64)] {
        &self.patterns
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.patterns.iter().map(|p| p.1).sum()
    }

    fn check(&self, leaves: usize, top: usize) -> Result<(), TomographyError> {
        if self.patterns.is_empty() {
            return Err(TomographyError::EmptyObservations);
        }
        for (p, _) in &self.patterns {
            if p.len() != leaves {
                return Err(TomographyError::PatternLength { expected: leaves, got: p.len() });
            }
            if let Some(&u) = p.iter().find(|&&u| u as usize > top) {
                return Err(TomographyError::UnitOutOfRange { unit: u as usize, top });
            }
        }
        Ok(())
    }
}

/// Flattened tree used by the message passer.
#[derive(Debug, Clone)]
struct Plan {
    /// Topological order (root first) as dense node indices.
    order: Vec<usize>,
    children: Vec<Vec<usize>>,
    /// Link index entering each node (`usize::MAX` for the root).
    link: Vec<usize>,
    /// Position in the observation pattern for leaves.
    leaf_slot: Vec<Option<usize>>,
    root: usize,
    links: usize,
}

impl Plan {
    fn new(tree: &LogicalTree) -> Self {
        let n = tree.node_count();
        let mut children = vec![Vec::new(); n];
        let mut link = vec![usize::MAX; n];
        let mut leaf_slot = vec![None; n];
        for v in 0..n {
            let id = NodeId(v);
            children[v] = tree.children(id).iter().map(|c| c.0).collect();
            if let Some(k) = tree.in_link(id) {
                link[v] = k.index();
            }
        }
        for (i, l) in tree.leaves().iter().enumerate() {
            leaf_slot[l.0] = Some(i);
        }
        Self {
            order: tree.topological_order().iter().map(|v| v.0).collect(),
            children,
            link,
            leaf_slot,
            root: tree.root().0,
            links: tree.link_count(),
        }
    }
}

/// Per-call scratch space for message passing.
struct Scratch {
    nb: usize,
    beta: Vec<f64>,
    up: Vec<f64>,
    down: Vec<f64>,
    outside: Vec<f64>,
    post: Vec<f64>,
}

impl Scratch {
    fn new(nodes: usize, nb: usize) -> Self {
        Self {
            nb,
            beta: vec![0.0; nodes * nb],
            up: vec![0.0; nodes * nb],
            down: vec![0.0; nodes * nb],
            outside: vec![0.0; nb],
            post: vec![0.0; nb],
        }
    }
}

/// Probability of one pattern. When `counts` is given, also adds
/// `weight * P(X_k = x | pattern)` to `counts[k * nb + x]`.
fn pass(
    plan: &Plan,
    alpha: &[Vec<f64>],
    pattern: &[u16],
    s: &mut Scratch,
    counts: Option<(&mut [f64], f64)>,
) -> f64 {
    let nb = s.nb;
    let top = nb - 1;

    // Upward: beta_v(a) = P(leaves below v | A_v = a);
    // up_v(a) = sum_x alpha_k(x) beta_v(min(a + x, b)) as a function of the parent's a.
    for &v in plan.order.iter().rev() {
        let (beta, rest) = (&mut s.beta, &mut s.up);
        let bv = v * nb;
        if let Some(slot) = plan.leaf_slot[v] {
            beta[bv..bv + nb].fill(0.0);
            beta[bv + pattern[slot] as usize] = 1.0;
        } else {
            beta[bv..bv + nb].fill(1.0);
            for &c in &plan.children[v] {
                for a in 0..nb {
                    beta[bv + a] *= rest[c * nb + a];
                }
            }
        }
        if v != plan.root {
            let al = &alpha[plan.link[v]];
            for a in 0..nb {
                let mut m = 0.0;
                for (x, &px) in al.iter().enumerate() {
                    m += px * beta[bv + (a + x).min(top)];
                }
                rest[bv + a] = m;
            }
        }
    }
    let prob = s.beta[plan.root * nb];

    let Some((counts, weight)) = counts else { return prob };
    if !(prob > 0.0) {
        return prob;
    }

    // Downward: down_v(a) = P(A_v = a, leaves outside the subtree of v).
    let r = plan.root * nb;
    s.down[r..r + nb].fill(0.0);
    s.down[r] = 1.0;
    let scale = weight / prob;
    for &v in &plan.order {
        let kids = &plan.children[v];
        for &c in kids {
            for a in 0..nb {
                let mut o = s.down[v * nb + a];
                for &sib in kids {
                    if sib != c {
                        o *= s.up[sib * nb + a];
                    }
                }
                s.outside[a] = o;
            }
            let k = plan.link[c];
            let al = &alpha[k];
            let cb = c * nb;
            s.down[cb..cb + nb].fill(0.0);
            s.post.fill(0.0);
            for a in 0..nb {
                let o = s.outside[a];
                if o == 0.0 {
                    continue;
                }
                for (x, &px) in al.iter().enumerate() {
                    let j = (a + x).min(top);
                    let t = o * px;
                    s.down[cb + j] += t;
                    s.post[x] += t * s.beta[cb + j];
                }
            }
            let row = &mut counts[k * nb..(k + 1) * nb];
            for (r, &q) in row.iter_mut().zip(&s.post) {
                *r += scale * q;
            }
        }
    }
    prob
}

/// Log-likelihood with an explicit flag for impossible patterns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLik {
    /// `-inf` when any pattern is impossible.
    pub value: f64,
    /// Number of distinct patterns with probability zero.
    pub impossible_patterns: usize,
}

impl LogLik {
    pub fn is_finite(&self) -> bool {
        self.impossible_patterns == 0
    }
}

struct EStep {
    counts: Vec<f64>,
    loglik: f64,
    impossible: usize,
}

const CHUNK: usize = 128;

fn estep(
    plan: &Plan,
    alpha: &[Vec<f64>],
    obs: &ObservationSet,
    want_counts: bool,
    exec: Execution,
) -> EStep {
    let nb = alpha[0].len();
    let parts = par::map_chunks(exec, obs.patterns(), CHUNK, |chunk| {
        let mut s = Scratch::new(plan.children.len(), nb);
        let mut counts = if want_counts { vec![0.0; plan.links * nb] } else { Vec::new() };
        let mut ll = 0.0;
        let mut impossible = 0usize;
        for (pat, w) in chunk {
            let c = if want_counts { Some((counts.as_mut_slice(), *w)) } else { None };
            let p = pass(plan, alpha, pat, &mut s, c);
            if p > 0.0 {
                ll += w * p.ln();
            } else {
                impossible += 1;
            }
        }
        EStep { counts, loglik: ll, impossible }
    });
    // Fixed-order reduction keeps the sum independent of thread count.
    let mut total = EStep {
        counts: if want_counts { vec![0.0; plan.links * nb] } else { Vec::new() },
        loglik: 0.0,
        impossible: 0,
    };
    for p in parts {
        for (t, c) in total.counts.iter_mut().zip(&p.counts) {
            *t += c;
        }
        total.loglik += p.loglik;
        total.impossible += p.impossible;
    }
    total
}

fn to_alpha(pmfs: &[DelayPmf]) -> Vec<Vec<f64>> {
    pmfs.iter().map(|p| p.0.clone()).collect()
}

/// `sum_patterns multiplicity * log P(pattern)` by message passing.
pub fn loglik(
    tree: &LogicalTree,
    pmfs: &[DelayPmf],
    obs: &ObservationSet,
) -> Result<LogLik, TomographyError> {
    let nb = check_pmfs(tree, pmfs)?;
    obs.check(tree.leaves().len(), nb - 1)?;
    let plan = Plan::new(tree);
    let e = estep(&plan, &to_alpha(pmfs), obs, false, Execution::Sequential);
    Ok(LogLik {
        value: if e.impossible > 0 { f64::NEG_INFINITY } else { e.loglik },
        impossible_patterns: e.impossible,
    })
}

/// Probability of one pattern and the posterior of every link's delay units.
/// `posteriors[k.index()][x] = P(X_k = x | pattern)`; all zeros when the
/// pattern is impossible.
pub fn pattern_posteriors(
    tree: &LogicalTree,
    pmfs: &[DelayPmf],
    pattern: &[u16],
) -> Result<(f64, Vec<Vec<f64>>), TomographyError> {
    let nb = check_pmfs(tree, pmfs)?;
    ObservationSet { patterns: vec![(pattern.to_vec(), 1.0)] }
        .check(tree.leaves().len(), nb - 1)?;
    let plan = Plan::new(tree);
    let mut s = Scratch::new(tree.node_count(), nb);
    let mut counts = vec![0.0; plan.links * nb];
    let p = pass(&plan, &to_alpha(pmfs), pattern, &mut s, Some((&mut counts, 1.0)));
    Ok((p, counts.chunks(nb).map(|c| c.to_vec()).collect()))
}

/// Starting point for EM.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmInit {
    #[default]
    Uniform,
    Given(Vec<DelayPmf>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    /// Stop once `|l_t - l_{t-1}| <= tol * |l_{t-1}|`.
    pub tol: f64,
    pub max_iter: usize,
    /// Minimum `alpha_k(0)` in the returned estimate.
    pub zero_floor: f64,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 500, zero_floor: 1e-6, execution: Execution::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmResult {
    /// Estimated pmf per link, indexed by `LinkId::index()`.
    pub pmfs: Vec<DelayPmf>,
    /// Log-likelihood of the returned (floored) estimate.
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood before the first M-step and after each one.
    pub trace: Vec<f64>,
}

impl EmResult {
    pub fn pmf(&self, k: LinkId) -> &DelayPmf {
        &self.pmfs[k.index()]
    }
}

/// Maximum-likelihood link pmfs from multicast leaf observations.
pub fn em_invert(
    tree: &LogicalTree,
    obs: &ObservationSet,
    spec: &BinningSpec,
    init: &EmInit,
    opts: &EmOptions,
) -> Result<EmResult, TomographyError> {
    em_invert_holding(tree, obs, spec, init, opts, &[])
}

/// [`em_invert`] with the links in `hold` kept at their initial pmf.
/// Likelihood is still nondecreasing: the M-step maximizes over the free
/// links only.
pub fn em_invert_holding(
    tree: &LogicalTree,
    obs: &ObservationSet,
    spec: &BinningSpec,
    init: &EmInit,
    opts: &EmOptions,
    hold: &[LinkId],
) -> Result<EmResult, TomographyError> {
    spec.validate()?;
    let nb = spec.bins();
    obs.check(tree.leaves().len(), spec.top_bin)?;
    if let crate::topology::Identifiability::NonIdentifiable { chains } = tree.check_identifiability()
    {
        warn!("tree is not identifiable (links in series: {chains:?}); estimates depend on the initial point");
    }
    let mut alpha: Vec<Vec<f64>> = match init {
        EmInit::Uniform => vec![DelayPmf::uniform(spec.top_bin).0; tree.link_count()],
        EmInit::Given(p) => {
            let got = check_pmfs(tree, p)?;
            if got != nb {
                return Err(TomographyError::BinMismatch { expected: nb, got });
            }
            to_alpha(&p[..tree.link_count()])
        }
    };
    let plan = Plan::new(tree);

    let mut e = estep(&plan, &alpha, obs, true, opts.execution);
    if e.impossible == obs.len() {
        return Err(TomographyError::AllPatternsImpossible);
    }
    let mut prev = if e.impossible > 0 { f64::NEG_INFINITY } else { e.loglik };
    let mut trace = vec![prev];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        for (k, row) in alpha.iter_mut().enumerate() {
            if hold.contains(&LinkId::from_index(k)) {
                continue;
            }
            let c = &e.counts[k * nb..(k + 1) * nb];
            let s: f64 = c.iter().sum();
            if s > 0.0 {
                for (a, &x) in row.iter_mut().zip(c) {
                    *a = x / s;
                }
            }
        }
        iterations += 1;
        e = estep(&plan, &alpha, obs, true, opts.execution);
        let cur = if e.impossible > 0 { f64::NEG_INFINITY } else { e.loglik };
        trace.push(cur);
        if cur.is_finite() && prev.is_finite() && (cur - prev).abs() <= opts.tol * prev.abs() {
            converged = true;
            break;
        }
        prev = cur;
    }

    let pmfs: Vec<DelayPmf> = alpha
        .into_iter()
        .map(|a| DelayPmf(a).with_zero_floor(opts.zero_floor))
        .collect();
    let final_ll = estep(&plan, &to_alpha(&pmfs), obs, false, opts.execution);
    Ok(EmResult {
        loglik: if final_ll.impossible > 0 { f64::NEG_INFINITY } else { final_ll.loglik },
        pmfs,
        iterations,
        converged,
        trace,
    })
}
