//! Control charts over per-window estimates.
//!
//! [`EwmaState`] smooths a scalar statistic with `Z_t = lambda X_t + (1 - lambda) Z_{t-1}`
//! and alarms against exact time-varying limits; [`CusumState`] accumulates
//! deviations beyond a slack; [`CdfEwmaState`] smooths a whole binned CDF and
//! inverts it. [`calibrate_baseline`] turns in-control samples into the
//! `(mu0, sigma0)` pair the charts need.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MonitorError {
    #[error("non-finite input {0}")]
    NonFinite(f64),
    #[error("smoothing weight {0} outside (0, 1]")]
    BadLambda(f64),
    #[error("control-limit multiplier {0} must be positive")]
    BadLimit(f64),
    #[error("baseline sd {0} must be >= 0")]
    BadSigma(f64),
    #[error("cusum needs kappa >= 0 and h > 0 (got kappa={kappa}, h={h})")]
    BadCusum { kappa: f64, h: f64 },
    #[error("baseline needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("cdf grid mismatch: expected {expected} bins, got {got}")]
    GridMismatch { expected: usize, got: usize },
    #[error("invalid cdf vector: {0}")]
    InvalidCdf(String),
    #[error("probability {0} outside (0, 1]")]
    ProbabilityOutOfRange(f64),
}

/// Which side(s) of the baseline raise alarms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    #[default]
    TwoSided,
    Lower,
    Upper,
}

/// In-control mean and spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub mean: f64,
    pub sd: f64,
    /// Set when every sample was identical (`sd == 0`).
    pub degenerate: bool,
}

/// Sample mean and sample standard deviation (divisor `n - 1`).
pub fn calibrate_baseline(samples: &[f64]) -> Result<Baseline, MonitorError> {
    if samples.len() < 2 {
        return Err(MonitorError::TooFewSamples(samples.len()));
    }
    if let Some(&bad) = samples.iter().find(|x| !x.is_finite()) {
        return Err(MonitorError::NonFinite(bad));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
    let sd = (ss / (n - 1.0)).sqrt();
    Ok(Baseline { mean, sd, degenerate: sd == 0.0 })
}

/// Result of one chart update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChartStep {
    /// Chart statistic after the update (Z_t for EWMA, the active sum for CUSUM).
    pub value: f64,
    /// Lower and upper control limits at this step (infinite when unarmed).
    pub lower: f64,
    pub upper: f64,
    pub alarm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwmaState {
    lambda: f64,
    z: f64,
    limit: f64,
    direction: Direction,
    t: u64,
    baseline: Option<Baseline>,
}

impl EwmaState {
    /// Uncalibrated chart starting at `z0`; it smooths but never alarms.
    pub fn new(lambda: f64, limit: f64, direction: Direction, z0: f64) -> Result<Self, MonitorError> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(MonitorError::BadLambda(lambda));
        }
        if !(limit > 0.0) {
            return Err(MonitorError::BadLimit(limit));
        }
        Ok(Self { lambda, z: z0, limit, direction, t: 0, baseline: None })
    }

    /// Chart armed against `baseline`, with `Z_0 = mu0`.
    pub fn calibrated(
        lambda: f64,
        limit: f64,
        direction: Direction,
        baseline: Baseline,
    ) -> Result<Self, MonitorError> {
        if !(baseline.sd >= 0.0) {
            return Err(MonitorError::BadSigma(baseline.sd));
        }
        let mut s = Self::new(lambda, limit, direction, baseline.mean)?;
        s.baseline = Some(baseline);
        Ok(s)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn value(&self) -> f64 {
        self.z
    }

    pub fn step_index(&self) -> u64 {
        self.t
    }

    pub fn baseline(&self) -> Option<Baseline> {
        self.baseline
    }

    /// Control limits at step `t`:
    /// `mu0 -/+ L sigma0 sqrt(lambda / (2 - lambda) * (1 - (1 - lambda)^(2t)))`.
    pub fn limits_at(&self, t: u64) -> (f64, f64) {
        match self.baseline {
            None => (f64::NEG_INFINITY, f64::INFINITY),
            Some(b) => {
                let l = self.lambda;
                let decay = (1.0 - l).powi((2 * t).min(i32::MAX as u64) as i32);
                let half = self.limit * b.sd * (l / (2.0 - l) * (1.0 - decay)).sqrt();
                (b.mean - half, b.mean + half)
            }
        }
    }

    pub fn step(&mut self, x: f64) -> Result<ChartStep, MonitorError> {
        if !x.is_finite() {
            return Err(MonitorError::NonFinite(x));
        }
        self.z = self.lambda * x + (1.0 - self.lambda) * self.z;
        self.t += 1;
        let (lower, upper) = self.limits_at(self.t);
        let alarm = self.baseline.is_some()
            && match self.direction {
                Direction::TwoSided => self.z < lower || self.z > upper,
                Direction::Lower => self.z < lower,
                Direction::Upper => self.z > upper,
            };
        Ok(ChartStep { value: self.z, lower, upper, alarm })
    }
}

pub fn ewma_step(state: &mut EwmaState, x: f64) -> Result<ChartStep, MonitorError> {
    state.step(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CusumState {
    kappa: f64,
    h: f64,
    mu0: f64,
    direction: Direction,
    s_plus: f64,
    s_minus: f64,
}

impl CusumState {
    pub fn new(mu0: f64, kappa: f64, h: f64, direction: Direction) -> Result<Self, MonitorError> {
        if !(kappa >= 0.0 && h > 0.0) || !mu0.is_finite() {
            return Err(MonitorError::BadCusum { kappa, h });
        }
        Ok(Self { kappa, h, mu0, direction, s_plus: 0.0, s_minus: 0.0 })
    }

    /// Conventional chart from a baseline: `kappa = 0.5 sd`, `h = 4 sd`.
    pub fn from_baseline(b: Baseline, direction: Direction) -> Result<Self, MonitorError> {
        Self::new(b.mean, 0.5 * b.sd, 4.0 * b.sd, direction)
    }

    pub fn sums(&self) -> (f64, f64) {
        (self.s_plus, self.s_minus)
    }

    pub fn threshold(&self) -> f64 {
        self.h
    }

    pub fn step(&mut self, x: f64) -> Result<ChartStep, MonitorError> {
        if !x.is_finite() {
            return Err(MonitorError::NonFinite(x));
        }
        let d = x - self.mu0;
        self.s_plus = (self.s_plus + d - self.kappa).max(0.0);
        self.s_minus = (self.s_minus - d - self.kappa).max(0.0);
        let (hi, lo) = (self.s_plus > self.h, self.s_minus > self.h);
        let (alarm, value) = match self.direction {
            Direction::TwoSided => (hi || lo, self.s_plus.max(self.s_minus)),
            Direction::Upper => (hi, self.s_plus),
            Direction::Lower => (lo, self.s_minus),
        };
        Ok(ChartStep { value, lower: -self.h, upper: self.h, alarm })
    }
}

pub fn cusum_step(state: &mut CusumState, x: f64) -> Result<ChartStep, MonitorError> {
    state.step(x)
}

/// Checks nondecreasing, inside `[0, 1]`, terminal value 1.
pub fn validate_cdf(cdf: &[f64]) -> Result<(), MonitorError> {
    if cdf.is_empty() {
        return Err(MonitorError::InvalidCdf("empty".into()));
    }
    if cdf.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(MonitorError::InvalidCdf("value outside [0, 1]".into()));
    }
    if cdf.windows(2).any(|w| w[1] < w[0]) {
        return Err(MonitorError::InvalidCdf("decreasing".into()));
    }
    let last = *cdf.last().unwrap();
    if (last - 1.0).abs() > 1e-9 {
        return Err(MonitorError::InvalidCdf(format!("terminal value {last} != 1")));
    }
    Ok(())
}

/// EWMA of a binned CDF; invert with [`CdfEwmaState::quantile_bin`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfEwmaState {
    lambda: f64,
    z: Vec<f64>,
    t: u64,
}

impl CdfEwmaState {
    pub fn new(lambda: f64, initial: &[f64]) -> Result<Self, MonitorError> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(MonitorError::BadLambda(lambda));
        }
        validate_cdf(initial)?;
        let mut z = initial.to_vec();
        *z.last_mut().unwrap() = 1.0;
        Ok(Self { lambda, z, t: 0 })
    }

    pub fn cdf(&self) -> &[f64] {
        &self.z
    }

    pub fn step_index(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, window: &[f64]) -> Result<(), MonitorError> {
        if window.len() != self.z.len() {
            return Err(MonitorError::GridMismatch { expected: self.z.len(), got: window.len() });
        }
        validate_cdf(window)?;
        let l = self.lambda;
        for (z, &w) in self.z.iter_mut().zip(window) {
            *z = (l * w + (1.0 - l) * *z).clamp(0.0, 1.0);
        }
        *self.z.last_mut().unwrap() = 1.0;
        self.t += 1;
        Ok(())
    }

    /// Smallest bin whose smoothed CDF reaches `p`.
    pub fn quantile_bin(&self, p: f64) -> Result<usize, MonitorError> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(MonitorError::ProbabilityOutOfRange(p));
        }
        Ok(self.z.iter().position(|&v| v >= p).unwrap_or(self.z.len() - 1))
    }
}

pub fn ewma_cdf_step(state: &mut CdfEwmaState, window_cdf: &[f64]) -> Result<(), MonitorError> {
    state.step(window_cdf)
}

pub fn cdf_ewma_quantile(state: &CdfEwmaState, p: f64) -> Result<usize, MonitorError> {
    state.quantile_bin(p)
}
