//! Sampling schedules: validated, strictly decreasing lists of noise levels.
//!
//! Schedules are stored in generation order, `sigmas[0] = sigma_max` down to
//! `sigmas[n] = sigma_min`. Both endpoints are written back verbatim after any
//! floating-point construction so they stay bit-identical to the configured
//! noise range.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The configured noise range `0 < sigma_min < sigma_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl NoiseSpec {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min.is_finite() && sigma_max.is_finite() && sigma_min > 0.0 && sigma_min < sigma_max)
        {
            return Err(Error::InvalidNoiseSpec { sigma_min, sigma_max });
        }
        Ok(Self { sigma_min, sigma_max })
    }
}

impl Default for NoiseSpec {
    /// The usual continuous-time range, `[0.002, 80]`.
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
        }
    }
}

/// A single problem found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    TooShort { len: usize },
    NonFinite { index: usize },
    NonPositive { index: usize, value: f64 },
    NotStrictlyDecreasing { index: usize, prev: f64, value: f64 },
    EndpointMismatch { which: &'static str, expected: f64, found: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooShort { len } => write!(f, "need at least 2 sigmas, got {len}"),
            Violation::NonFinite { index } => write!(f, "sigma[{index}] is not finite"),
            Violation::NonPositive { index, value } => {
                write!(f, "sigma[{index}] = {value} is not positive")
            }
            Violation::NotStrictlyDecreasing { index, prev, value } => write!(
                f,
                "not strictly decreasing at index {index} ({prev} -> {value})"
            ),
            Violation::EndpointMismatch {
                which,
                expected,
                found,
            } => write!(f, "{which} endpoint is {found}, expected {expected}"),
        }
    }
}

/// Checks positivity, strict monotonicity and (optionally) the endpoints.
pub fn validate(sigmas: &[f64], spec: Option<&NoiseSpec>) -> std::result::Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if sigmas.len() < 2 {
        out.push(Violation::TooShort { len: sigmas.len() });
    }
    for (index, &value) in sigmas.iter().enumerate() {
        if !value.is_finite() {
            out.push(Violation::NonFinite { index });
        } else if value <= 0.0 {
            out.push(Violation::NonPositive { index, value });
        }
    }
    for (index, w) in sigmas.windows(2).enumerate() {
        if !(w[1] < w[0]) {
            out.push(Violation::NotStrictlyDecreasing {
                index: index + 1,
                prev: w[0],
                value: w[1],
            });
        }
    }
    if let (Some(spec), Some(first), Some(last)) = (spec, sigmas.first(), sigmas.last()) {
        if first.to_bits() != spec.sigma_max.to_bits() {
            out.push(Violation::EndpointMismatch {
                which: "sigma_max",
                expected: spec.sigma_max,
                found: *first,
            });
        }
        if last.to_bits() != spec.sigma_min.to_bits() {
            out.push(Violation::EndpointMismatch {
                which: "sigma_min",
                expected: spec.sigma_min,
                found: *last,
            });
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    sigmas: Vec<f64>,
    name: Option<String>,
}

impl Schedule {
    /// Builds a schedule from descending sigmas.
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        validate(&sigmas, None).map_err(Error::InvalidSchedule)?;
        Ok(Self { sigmas, name: None })
    }

    /// Builds a schedule and overwrites both endpoints with `spec`.
    pub(crate) fn with_endpoints(mut sigmas: Vec<f64>, spec: &NoiseSpec) -> Result<Self> {
        if let Some(first) = sigmas.first_mut() {
            *first = spec.sigma_max;
        }
        if let Some(last) = sigmas.last_mut() {
            *last = spec.sigma_min;
        }
        Self::new(sigmas)
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn into_sigmas(self) -> Vec<f64> {
        self.sigmas
    }

    /// Number of solver steps, `len - 1`.
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[0]
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigmas[self.sigmas.len() - 1]
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            sigma_min: self.sigma_min(),
            sigma_max: self.sigma_max(),
        }
    }

    /// Noise levels in increasing order, `t_0 < t_1 < ... < t_n`.
    pub fn ascending(&self) -> Vec<f64> {
        self.sigmas.iter().rev().copied().collect()
    }

    /// Builds a schedule from increasing noise levels.
    pub fn from_ascending(ts: &[f64]) -> Result<Self> {
        Self::new(ts.iter().rev().copied().collect())
    }

    /// Doubles the step count by inserting the geometric mean of every pair of
    /// neighbours. Existing values are kept bit-exactly at even indices.
    pub fn subdivide(&self) -> Schedule {
        let mut out = Vec::with_capacity(2 * self.sigmas.len() - 1);
        for w in self.sigmas.windows(2) {
            out.push(w[0]);
            out.push((0.5 * (w[0].ln() + w[1].ln())).exp());
        }
        out.push(self.sigma_min());
        Schedule {
            sigmas: out,
            name: self.name.clone(),
        }
    }

    /// Resamples the schedule to `m` steps, treating `log sigma` as a
    /// piecewise-linear function of the normalized index `i / n`.
    pub fn interpolate(&self, m: usize) -> Result<Schedule> {
        if m == 0 {
            return Err(Error::param("m", "target step count must be at least 1"));
        }
        let n = self.steps();
        let logs: Vec<f64> = self.sigmas.iter().map(|s| s.ln()).collect();
        let mut out = Vec::with_capacity(m + 1);
        for j in 0..=m {
            // Exact integer position so grid-aligned abscissae return stored values.
            let num = j * n;
            let k = num / m;
            let rem = num % m;
            if rem == 0 {
                out.push(self.sigmas[k]);
            } else {
                let frac = rem as f64 / m as f64;
                out.push(((1.0 - frac) * logs[k] + frac * logs[k + 1]).exp());
            }
        }
        let mut s = Schedule::with_endpoints(out, &self.noise_spec())?;
        s.name = self.name.clone();
        Ok(s)
    }

    /// Returns a copy with `sigmas[index]` replaced. The result is validated.
    pub fn with_value(&self, index: usize, value: f64) -> Result<Schedule> {
        let mut sigmas = self.sigmas.clone();
        sigmas[index] = value;
        let mut s = Schedule::new(sigmas)?;
        s.name = self.name.clone();
        Ok(s)
    }

    /// Returns a validated schedule with new sigmas and the same name.
    pub fn with_sigmas(&self, sigmas: Vec<f64>) -> Result<Schedule> {
        let mut s = Schedule::new(sigmas)?;
        s.name = self.name.clone();
        Ok(s)
    }

    pub fn to_file(&self) -> ScheduleFile {
        ScheduleFile {
            name: self.name.clone().unwrap_or_default(),
            sigma_min: self.sigma_min(),
            sigma_max: self.sigma_max(),
            sigmas: self.sigmas.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("schedule serializes")
    }

    pub fn from_json(text: &str) -> Result<Schedule> {
        let file: ScheduleFile = serde_json::from_str(text)?;
        file.into_schedule()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Schedule> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk interchange form of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub name: String,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigmas: Vec<f64>,
}

impl ScheduleFile {
    pub fn into_schedule(self) -> Result<Schedule> {
        let spec = NoiseSpec::new(self.sigma_min, self.sigma_max)?;
        validate(&self.sigmas, Some(&spec)).map_err(Error::InvalidSchedule)?;
        let s = Schedule::new(self.sigmas)?;
        Ok(if self.name.is_empty() { s } else { s.named(self.name) })
    }
}

/// How a quadratic time schedule spaces its points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadraticSpacing {
    /// `t_i = eps + (i/n)^2 (T - eps)`.
    Index,
    /// `t_i = (sqrt(eps) + (i/n)(sqrt(T) - sqrt(eps)))^2`.
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeuristicKind {
    /// `sigma_i = (sigma_min^(1/rho) + i/n (sigma_max^(1/rho) - sigma_min^(1/rho)))^rho`.
    Edm { rho: f64 },
    /// The `rho = 1` member of the EDM family.
    LogSnr,
    TimeUniform,
    TimeQuadratic(QuadraticSpacing),
}

impl HeuristicKind {
    pub fn label(&self) -> String {
        match self {
            HeuristicKind::Edm { rho } => format!("edm-rho{rho}"),
            HeuristicKind::LogSnr => "logsnr".into(),
            HeuristicKind::TimeUniform => "time-uniform".into(),
            HeuristicKind::TimeQuadratic(QuadraticSpacing::Index) => "time-quadratic-index".into(),
            HeuristicKind::TimeQuadratic(QuadraticSpacing::Time) => "time-quadratic-time".into(),
        }
    }
}

/// Time interval `[eps, t_end]` of a discrete-time model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub eps: f64,
    pub t_end: f64,
}

fn check_steps(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::param("n", "step count must be at least 1"));
    }
    Ok(())
}

fn edm_sigmas(rho: f64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let a = lo.powf(1.0 / rho);
    let b = hi.powf(1.0 / rho);
    (0..=n)
        .rev()
        .map(|i| (a + (i as f64 / n as f64) * (b - a)).powf(rho))
        .collect()
}

fn time_points(kind: &HeuristicKind, n: usize, grid: TimeGrid) -> Vec<f64> {
    let TimeGrid { eps, t_end } = grid;
    (0..=n)
        .rev()
        .map(|i| {
            let u = i as f64 / n as f64;
            match kind {
                HeuristicKind::TimeQuadratic(QuadraticSpacing::Index) => eps + u * u * (t_end - eps),
                HeuristicKind::TimeQuadratic(QuadraticSpacing::Time) => {
                    let r = eps.sqrt() + u * (t_end.sqrt() - eps.sqrt());
                    r * r
                }
                _ => eps + u * (t_end - eps),
            }
        })
        .collect()
}

/// Builds one of the hand-crafted schedules on `spec`.
///
/// The time-based kinds use the identity map `sigma(t) = t` on
/// `[sigma_min, sigma_max]`; see [`discrete_time_schedule`] for a custom map.
pub fn heuristic_schedule(kind: HeuristicKind, n: usize, spec: &NoiseSpec) -> Result<Schedule> {
    check_steps(n)?;
    let spec = NoiseSpec::new(spec.sigma_min, spec.sigma_max)?;
    let sigmas = match kind {
        HeuristicKind::Edm { rho } => {
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(Error::param("rho", format!("must be positive, got {rho}")));
            }
            edm_sigmas(rho, n, spec.sigma_min, spec.sigma_max)
        }
        HeuristicKind::LogSnr => edm_sigmas(1.0, n, spec.sigma_min, spec.sigma_max),
        HeuristicKind::TimeUniform | HeuristicKind::TimeQuadratic(_) => time_points(
            &kind,
            n,
            TimeGrid {
                eps: spec.sigma_min,
                t_end: spec.sigma_max,
            },
        ),
    };
    Ok(Schedule::with_endpoints(sigmas, &spec)?.named(kind.label()))
}

/// Builds a time-uniform or time-quadratic schedule for a discrete-time model
/// whose noise level is `sigma_of_t`. The map must be increasing; endpoints are
/// pinned to `spec`.
pub fn discrete_time_schedule(
    kind: HeuristicKind,
    n: usize,
    grid: TimeGrid,
    sigma_of_t: &dyn Fn(f64) -> f64,
    spec: &NoiseSpec,
) -> Result<Schedule> {
    check_steps(n)?;
    if !matches!(kind, HeuristicKind::TimeUniform | HeuristicKind::TimeQuadratic(_)) {
        return Err(Error::param("kind", "only time-based kinds take a time grid"));
    }
    if !(grid.eps >= 0.0 && grid.eps < grid.t_end) {
        return Err(Error::param("grid", "need 0 <= eps < t_end"));
    }
    let sigmas = time_points(&kind, n, grid).into_iter().map(sigma_of_t).collect();
    Ok(Schedule::with_endpoints(sigmas, spec)?.named(kind.label()))
}
