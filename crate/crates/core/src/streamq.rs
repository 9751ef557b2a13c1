//! Streaming quantile estimation.
//!
//! Two estimators live here:
//!
//! * buffer-based incremental quantile estimation: values accumulate in a
//!   bounded [`DataBuffer`]; each update folds the buffer's empirical CDF into
//!   a compact [`QuantileSet`] (a handful of tracked quantiles plus min/max)
//!   and drains the buffer;
//! * a Greenwald-Khanna style [`GkSummary`] that answers any quantile with a
//!   deterministic rank error of at most `eps * n`.
//!
//! Quantiles use the left-continuous inverse `Q(p) = inf{x : F(x) >= p}`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum StreamqError {
    #[error("buffer is empty")]
    EmptyBuffer,
    #[error("buffer is full (capacity {0})")]
    BufferFull(usize),
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("probability {0} outside (0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("tracked probabilities must be strictly increasing inside (0, 1)")]
    BadTrackedProbabilities,
    #[error("epsilon {0} outside (0, 1)")]
    BadEpsilon(f64),
    #[error("summary is empty")]
    EmptySummary,
}

/// Default tracked probabilities for [`QuantileSet`].
pub const DEFAULT_PROBS: [f64; 5] = [0.5, 0.75, 0.9, 0.95, 0.99];

fn check_p(p: f64) -> Result<(), StreamqError> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(StreamqError::ProbabilityOutOfRange(p))
    }
}

/// Target rank `ceil(p * n)` in `1..=n`, snapping products that are within
/// rounding noise of an integer (so `0.7 * 10` gives 7, not 8).
pub fn target_rank(p: f64, n: u64) -> u64 {
    let x = p * n as f64;
    let nearest = x.round();
    let r = if (x - nearest).abs() <= 1e-9 * x.max(1.0) { nearest } else { x.ceil() };
    (r as u64).clamp(1, n.max(1))
}

/// Bounded buffer of raw observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataBuffer {
    capacity: usize,
    values: Vec<f64>,
}

impl DataBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), values: Vec::with_capacity(capacity.max(1)) }
    }

    /// Buffer holding exactly `values`, with capacity equal to their count.
    pub fn from_values(values: &[f64]) -> Result<Self, StreamqError> {
        let mut b = Self::new(values.len());
        for &v in values {
            b.push(v)?;
        }
        Ok(b)
    }

    pub fn push(&mut self, value: f64) -> Result<(), StreamqError> {
        if !value.is_finite() {
            return Err(StreamqError::NonFinite(value));
        }
        if self.values.len() >= self.capacity {
            return Err(StreamqError::BufferFull(self.capacity));
        }
        self.values.push(value);
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.values.len() >= self.capacity
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn clear(&mut self) {
        self.values.clear();
    }
}

/// Step function over the distinct values of a buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    values: Vec<f64>,
    /// Cumulative counts; `cum[i]` values are `<= values[i]`.
    cum: Vec<u64>,
    total: u64,
}

impl EmpiricalCdf {
    pub fn from_values(values: &[f64]) -> Result<Self, StreamqError> {
        if values.is_empty() {
            return Err(StreamqError::EmptyBuffer);
        }
        if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(StreamqError::NonFinite(bad));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut distinct: Vec<f64> = Vec::new();
        let mut cum: Vec<u64> = Vec::new();
        for (i, &v) in sorted.iter().enumerate() {
            if distinct.last() == Some(&v) {
                *cum.last_mut().unwrap() = i as u64 + 1;
            } else {
                distinct.push(v);
                cum.push(i as u64 + 1);
            }
        }
        Ok(Self { values: distinct, cum, total: sorted.len() as u64 })
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(value, F(value))` pairs; the last probability is exactly 1.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values
            .iter()
            .zip(&self.cum)
            .map(move |(&v, &c)| (v, c as f64 / self.total as f64))
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// `F(x) = #{values <= x} / n`.
    pub fn cdf(&self, x: f64) -> f64 {
        let i = self.values.partition_point(|&v| v <= x);
        if i == 0 {
            0.0
        } else {
            self.cum[i - 1] as f64 / self.total as f64
        }
    }

    pub fn quantile(&self, p: f64) -> Result<f64, StreamqError> {
        check_p(p)?;
        let r = target_rank(p, self.total);
        let i = self.cum.partition_point(|&c| c < r);
        Ok(self.values[i])
    }
}

pub fn build_empirical_cdf(buffer: &DataBuffer) -> Result<EmpiricalCdf, StreamqError> {
    EmpiricalCdf::from_values(buffer.values())
}

pub fn quantile(cdf: &EmpiricalCdf, p: f64) -> Result<f64, StreamqError> {
    cdf.quantile(p)
}

/// Compact incremental quantile state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSet {
    probs: Vec<f64>,
    estimates: Vec<f64>,
    n: u64,
    min: f64,
    max: f64,
}

impl Default for QuantileSet {
    fn default() -> Self {
        Self::new(&DEFAULT_PROBS).expect("default probabilities are valid")
    }
}

impl QuantileSet {
    pub fn new(probs: &[f64]) -> Result<Self, StreamqError> {
        let ok = !probs.is_empty()
            && probs.iter().all(|&p| p > 0.0 && p < 1.0)
            && probs.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(StreamqError::BadTrackedProbabilities);
        }
        Ok(Self {
            probs: probs.to_vec(),
            estimates: vec![f64::NAN; probs.len()],
            n: 0,
            min: f64::NAN,
            max: f64::NAN,
        })
    }

    /// State with given estimates, as if built from `n` observations.
    pub fn from_parts(
        probs: &[f64],
        estimates: &[f64],
        n: u64,
        min: f64,
        max: f64,
    ) -> Result<Self, StreamqError> {
        let mut s = Self::new(probs)?;
        if estimates.len() != probs.len() {
            return Err(StreamqError::BadTrackedProbabilities);
        }
        s.estimates = estimates.to_vec();
        s.n = n;
        s.min = min;
        s.max = max;
        Ok(s)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn estimates(&self) -> &[f64] {
        &self.estimates
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    /// Estimate for a tracked probability.
    pub fn estimate(&self, p: f64) -> Option<f64> {
        self.probs.iter().position(|&x| x == p).map(|i| self.estimates[i])
    }

    /// `(p, q, n)` rows.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, u64)> + '_ {
        self.probs.iter().zip(&self.estimates).map(move |(&p, &q)| (p, q, self.n))
    }

    fn knots(&self) -> Vec<(f64, f64)> {
        let mut k = Vec::with_capacity(self.probs.len() + 2);
        k.push((self.min, 0.0));
        k.extend(self.estimates.iter().copied().zip(self.probs.iter().copied()));
        k.push((self.max, 1.0));
        k
    }

    /// Piecewise-linear CDF through `(min, 0), (q_i, p_i), (max, 1)`.
    pub fn prior_cdf(&self, x: f64) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        prior_cdf_at(&self.knots(), x)
    }

    /// Folds the buffer into the state and drains it.
    pub fn iqe_update(&mut self, buffer: &mut DataBuffer) -> Result<(), StreamqError> {
        let ecdf = build_empirical_cdf(buffer)?;
        let n_buf = ecdf.total();
        let w_prior = self.n as f64;
        let w_buf = n_buf as f64;
        let tot = w_prior + w_buf;

        let prior = if self.n > 0 { self.knots() } else { Vec::new() };
        let mut xs: Vec<f64> = ecdf.values.clone();
        xs.extend(prior.iter().map(|k| k.0));
        xs.sort_by(f64::total_cmp);
        xs.dedup();

        let mixed = |x: f64, f_d: f64| -> f64 {
            let fp = if prior.is_empty() { 0.0 } else { prior_cdf_at(&prior, x) };
            (w_prior * fp + w_buf * f_d) / tot
        };
        // Mixture at each knot (right-continuous) and just below it.
        let at: Vec<f64> = xs.iter().map(|&x| mixed(x, ecdf.cdf(x))).collect();

        let mut out = Vec::with_capacity(self.probs.len());
        for &p in &self.probs {
            let k = at.iter().position(|&f| f >= p).unwrap_or(xs.len() - 1);
            let q = if k == 0 {
                xs[0]
            } else {
                // On (x_{k-1}, x_k) the buffer ECDF is flat, the prior linear.
                let (x0, x1) = (xs[k - 1], xs[k]);
                let f_d = ecdf.cdf(x0);
                let f0 = at[k - 1];
                let f1_left = mixed_left(&prior, w_prior, w_buf, x1, f_d);
                if f1_left >= p && f1_left > f0 {
                    let t = ((p - f0) / (f1_left - f0)).clamp(0.0, 1.0);
                    x0 + t * (x1 - x0)
                } else {
                    x1
                }
            };
            out.push(q);
        }
        // The inverse of a CDF is monotone; clamp away rounding wobble.
        for i in 1..out.len() {
            if out[i] < out[i - 1] {
                out[i] = out[i - 1];
            }
        }

        self.estimates = out;
        self.min = if self.n > 0 { self.min.min(ecdf.min()) } else { ecdf.min() };
        self.max = if self.n > 0 { self.max.max(ecdf.max()) } else { ecdf.max() };
        self.n += n_buf;
        buffer.clear();
        Ok(())
    }
}

fn prior_cdf_at(knots: &[(f64, f64)], x: f64) -> f64 {
    let i = knots.partition_point(|k| k.0 <= x);
    if i == 0 {
        return 0.0;
    }
    if i == knots.len() {
        return 1.0;
    }
    let (x0, p0) = knots[i - 1];
    let (x1, p1) = knots[i];
    p0 + (p1 - p0) * (x - x0) / (x1 - x0)
}

/// Left limit of the mixture at `x` given the buffer ECDF value just below.
fn mixed_left(prior: &[(f64, f64)], w_prior: f64, w_buf: f64, x: f64, f_d: f64) -> f64 {
    let fp = if prior.is_empty() {
        0.0
    } else {
        // Prior is continuous except for vertical segments at repeated knots;
        // the left limit at x is the largest knot probability strictly below
        // plus the linear part.
        let i = prior.partition_point(|k| k.0 < x);
        if i == 0 {
            0.0
        } else if i == prior.len() {
            1.0
        } else {
            let (x0, p0) = prior[i - 1];
            let (x1, p1) = prior[i];
            p0 + (p1 - p0) * (x - x0) / (x1 - x0)
        }
    };
    (w_prior * fp + w_buf * f_d) / (w_prior + w_buf)
}

/// Free-function form of [`QuantileSet::iqe_update`].
pub fn iqe_update(state: &mut QuantileSet, buffer: &mut DataBuffer) -> Result<(), StreamqError> {
    state.iqe_update(buffer)
}

/// One GK tuple: value, rank gap to predecessor, rank uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GkTuple {
    pub value: f64,
    pub g: u64,
    pub delta: u64,
}

/// Deterministic eps-approximate quantile summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GkSummary {
    eps: f64,
    tuples: Vec<GkTuple>,
    n: u64,
    compress_every: u64,
    since_compress: u64,
}

impl GkSummary {
    pub fn new(eps: f64) -> Result<Self, StreamqError> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(StreamqError::BadEpsilon(eps));
        }
        Ok(Self {
            eps,
            tuples: Vec::new(),
            n: 0,
            compress_every: ((1.0 / (2.0 * eps)).floor() as u64).max(1),
            since_compress: 0,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.eps
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn tuples(&self) -> &[GkTuple] {
        &self.tuples
    }

    fn band(&self) -> u64 {
        (2.0 * self.eps * self.n as f64).floor() as u64
    }

    /// `g + delta <= floor(2 eps n) + 1` for every tuple, values nondecreasing.
    pub fn is_valid(&self) -> bool {
        let cap = self.band() + 1;
        self.tuples.iter().all(|t| t.g + t.delta <= cap)
            && self.tuples.windows(2).all(|w| w[0].value <= w[1].value)
            && self.tuples.iter().map(|t| t.g).sum::<u64>() == self.n
    }

    /// Inserts without triggering the periodic compress.
    pub fn insert_raw(&mut self, value: f64) -> Result<(), StreamqError> {
        if !value.is_finite() {
            return Err(StreamqError::NonFinite(value));
        }
        let pos = self.tuples.partition_point(|t| t.value <= value);
        // One below the band so g + delta stays within floor(2 eps n); at the
        // band itself a query can land (band + 1) / 2 > eps n ranks away.
        let delta = if pos == 0 || pos == self.tuples.len() {
            0
        } else {
            self.band().saturating_sub(1)
        };
        self.tuples.insert(pos, GkTuple { value, g: 1, delta });
        self.n += 1;
        Ok(())
    }

    /// Inserts and compresses every `floor(1 / (2 eps))` insertions.
    pub fn insert(&mut self, value: f64) -> Result<(), StreamqError> {
        self.insert_raw(value)?;
        self.since_compress += 1;
        if self.since_compress >= self.compress_every {
            self.compress();
            self.since_compress = 0;
        }
        Ok(())
    }

    /// Merges `t_i` into `t_{i+1}` whenever `g_i + g_{i+1} + delta_{i+1} <= floor(2 eps n)`.
    /// The first tuple (current minimum) is never merged away.
    pub fn compress(&mut self) {
        if self.tuples.len() < 3 {
            return;
        }
        let band = self.band();
        let mut i = self.tuples.len() - 2;
        while i >= 1 {
            let (a, b) = (self.tuples[i], self.tuples[i + 1]);
            if a.g + b.g + b.delta <= band {
                self.tuples[i + 1].g += a.g;
                self.tuples.remove(i);
            }
            i -= 1;
        }
    }

    pub fn query(&self, p: f64) -> Result<f64, StreamqError> {
        check_p(p)?;
        if self.n == 0 {
            return Err(StreamqError::EmptySummary);
        }
        let r = target_rank(p, self.n) as i64;
        let mut rmin = 0i64;
        let mut best = (i64::MAX, self.tuples[0].value);
        for t in &self.tuples {
            rmin += t.g as i64;
            let rmax = rmin + t.delta as i64;
            let err = (r - rmin).max(rmax - r);
            if err < best.0 {
                best = (err, t.value);
            }
        }
        Ok(best.1)
    }
}

pub fn gk_insert(summary: &mut GkSummary, value: f64) -> Result<(), StreamqError> {
    summary.insert(value)
}

pub fn gk_compress(summary: &mut GkSummary) {
    summary.compress()
}

pub fn gk_query(summary: &GkSummary, p: f64) -> Result<f64, StreamqError> {
    summary.query(p)
}
