//! Importance-sampled Monte-Carlo estimates of the interval KLUB.
//!
//! For an interval `(lo, hi)` the estimated quantity is
//! `int_lo^hi t^-3 E||D(x_t, t) - D(x_hi, hi)||^2 dt` with `x_hi = x_t + sqrt(hi^2 - t^2) e'`.
//! The global constant prefactor is dropped. On isotropic Gaussian data with the
//! ideal denoiser this equals `d/2` times [`crate::gaussian::klub_interval`].

use rand::distributions::Open01;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::rng::{domain, StreamKey};
use crate::schedule::Schedule;
use crate::toy_models::DataModel;

pub const C_IMP: f64 = 0.5;
pub const GRID_POINTS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalTriple {
    pub t_lo: f64,
    pub t_mid: f64,
    pub t_hi: f64,
}

impl IntervalTriple {
    pub fn new(t_lo: f64, t_mid: f64, t_hi: f64) -> Result<Self> {
        if !(t_lo > 0.0 && t_lo < t_mid && t_mid < t_hi && t_hi.is_finite()) {
            return Err(Error::param(
                "triple",
                format!("need 0 < t_lo < t_mid < t_hi, got ({t_lo}, {t_mid}, {t_hi})"),
            ));
        }
        Ok(Self { t_lo, t_mid, t_hi })
    }

    /// Upper end of the interval containing `t`.
    pub fn t_up(&self, t: f64) -> f64 {
        if t <= self.t_mid {
            self.t_mid
        } else {
            self.t_hi
        }
    }
}

/// `1/(t^2+c^2) - 1/(up^2+c^2)`, written without cancellation.
fn bracket(t: f64, up: f64, c_imp: f64) -> f64 {
    let c2 = c_imp * c_imp;
    (up - t) * (up + t) / ((t * t + c2) * (up * up + c2))
}

fn branch_density(t: f64, up: f64, c_imp: f64) -> f64 {
    bracket(t, up, c_imp) / (t * t * t)
}

/// Unnormalized importance density `t^-3 (1/(t^2+c^2) - 1/(t_up^2+c^2))`.
pub fn importance_density(t: f64, triple: &IntervalTriple, c_imp: f64) -> Result<f64> {
    if !(t > triple.t_lo && t <= triple.t_hi) {
        return Err(Error::param(
            "t",
            format!("{t} outside ({}, {}]", triple.t_lo, triple.t_hi),
        ));
    }
    Ok(branch_density(t, triple.t_up(t), c_imp))
}

/// Exact `int_lo^up` of the branch density (used as a quadrature check).
pub fn branch_mass_exact(lo: f64, up: f64, c_imp: f64) -> f64 {
    let a = c_imp * c_imp;
    let k = 1.0 / (up * up + a);
    let anti = |t: f64| -1.0 / (2.0 * a * t * t) - t.ln() / (a * a) + (t * t + a).ln() / (2.0 * a * a) + k / (2.0 * t * t);
    anti(up) - anti(lo)
}

#[derive(Debug, Clone)]
struct Branch {
    lo: f64,
    up: f64,
    log_grid: Vec<f64>,
    /// Normalized cumulative mass at each grid node.
    cdf: Vec<f64>,
    mass: f64,
}

impl Branch {
    fn new(lo: f64, up: f64, c_imp: f64) -> Self {
        let (a, b) = (lo.ln(), up.ln());
        let h = (b - a) / (GRID_POINTS - 1) as f64;
        let log_grid: Vec<f64> = (0..GRID_POINTS)
            .map(|k| if k == GRID_POINTS - 1 { b } else { a + k as f64 * h })
            .collect();
        // Density in u = log t is pi(t) t.
        let g: Vec<f64> = log_grid
            .iter()
            .enumerate()
            .map(|(k, &u)| {
                let t = match k {
                    0 => lo,
                    _ if k == GRID_POINTS - 1 => up,
                    _ => u.exp(),
                };
                branch_density(t, up, c_imp) * t
            })
            .collect();
        let mut cdf = Vec::with_capacity(GRID_POINTS);
        let mut acc = 0.0;
        cdf.push(0.0);
        for k in 1..GRID_POINTS {
            acc += 0.5 * h * (g[k - 1] + g[k]);
            cdf.push(acc);
        }
        let mass = acc;
        for v in cdf.iter_mut() {
            *v /= mass;
        }
        Self {
            lo,
            up,
            log_grid,
            cdf,
            mass,
        }
    }

    fn invert(&self, v: f64) -> f64 {
        let k = self.cdf.partition_point(|&c| c < v).clamp(1, GRID_POINTS - 1);
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let frac = if c1 > c0 { (v - c0) / (c1 - c0) } else { 0.5 };
        let u = self.log_grid[k - 1] + frac * (self.log_grid[k] - self.log_grid[k - 1]);
        u.exp().clamp(self.lo, self.up)
    }

    fn cdf_at(&self, t: f64) -> f64 {
        if t <= self.lo {
            return 0.0;
        }
        if t >= self.up {
            return 1.0;
        }
        let u = t.ln();
        let k = self.log_grid.partition_point(|&g| g < u).clamp(1, GRID_POINTS - 1);
        let (u0, u1) = (self.log_grid[k - 1], self.log_grid[k]);
        self.cdf[k - 1] + (u - u0) / (u1 - u0) * (self.cdf[k] - self.cdf[k - 1])
    }
}

/// Tabulated inverse-CDF sampler for the importance density over one
/// interval or a pair of adjacent intervals.
#[derive(Debug, Clone)]
pub struct ImportanceSampler {
    branches: Vec<Branch>,
    total: f64,
}

impl ImportanceSampler {
    pub fn for_triple(triple: &IntervalTriple, c_imp: f64) -> Self {
        Self::from_branches(vec![
            Branch::new(triple.t_lo, triple.t_mid, c_imp),
            Branch::new(triple.t_mid, triple.t_hi, c_imp),
        ])
    }

    pub fn for_interval(lo: f64, hi: f64, c_imp: f64) -> Result<Self> {
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::param("interval", format!("need 0 < lo < hi, got ({lo}, {hi})")));
        }
        Ok(Self::from_branches(vec![Branch::new(lo, hi, c_imp)]))
    }

    fn from_branches(branches: Vec<Branch>) -> Self {
        let total = branches.iter().map(|b| b.mass).sum();
        Self { branches, total }
    }

    /// Normalization `Z`: total mass of the unnormalized density.
    pub fn normalization(&self) -> f64 {
        self.total
    }

    pub fn branch_masses(&self) -> Vec<f64> {
        self.branches.iter().map(|b| b.mass).collect()
    }

    /// Maps `v` in (0, 1) to `(t, t_up)`; monotone in `v`.
    pub fn transform(&self, v: f64) -> (f64, f64) {
        let mut rest = v * self.total;
        let last = self.branches.len() - 1;
        for (k, b) in self.branches.iter().enumerate() {
            if rest < b.mass || k == last {
                return (b.invert((rest / b.mass).min(1.0)), b.up);
            }
            rest -= b.mass;
        }
        unreachable!()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> (f64, f64) {
        self.transform(rng.sample(Open01))
    }

    /// Tabulated CDF of the normalized density.
    pub fn cdf(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for b in &self.branches {
            acc += b.mass * b.cdf_at(t);
        }
        acc / self.total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlubEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    /// `Z` multiplying the mean weight; `None` for sums over intervals.
    pub normalization: Option<f64>,
}

impl KlubEstimate {
    pub fn add(self, other: KlubEstimate) -> KlubEstimate {
        KlubEstimate {
            value: self.value + other.value,
            std_error: self.std_error.hypot(other.std_error),
            n_samples: self.n_samples + other.n_samples,
            normalization: None,
        }
    }

    /// Mean weight before normalization.
    pub fn raw_mean(&self) -> Option<f64> {
        self.normalization.map(|z| self.value / z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlubSample {
    pub t: f64,
    pub t_up: f64,
    pub w: f64,
}

/// Fixed, seeded set of data samples drawn with replacement.
#[derive(Debug, Clone)]
pub struct DataPool {
    samples: Vec<f64>,
    dim: usize,
}

impl DataPool {
    pub fn new(model: &DataModel, size: usize, seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(Error::Empty("data pool"));
        }
        Ok(Self {
            samples: model.sample(size, crate::rng::derive_seed(seed, domain::POOL)),
            dim: model.dim(),
        })
    }

    pub fn from_samples(samples: Vec<f64>, dim: usize) -> Result<Self> {
        if samples.is_empty() || dim == 0 || samples.len() % dim != 0 {
            return Err(Error::Empty("data pool"));
        }
        Ok(Self { samples, dim })
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy)]
pub enum DataSource<'a> {
    /// Fresh draws from the model.
    Model(&'a DataModel),
    Pool(&'a DataPool),
}

impl DataSource<'_> {
    fn dim(&self) -> usize {
        match self {
            DataSource::Model(m) => m.dim(),
            DataSource::Pool(p) => p.dim,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self {
            DataSource::Model(m) => {
                m.sample_into(rng, out);
            }
            DataSource::Pool(p) => out.copy_from_slice(p.get(rng.gen_range(0..p.len()))),
        }
    }
}

struct Scratch {
    x0: Vec<f64>,
    xt: Vec<f64>,
    xu: Vec<f64>,
    dt: Vec<f64>,
    du: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Self {
            x0: vec![0.0; d],
            xt: vec![0.0; d],
            xu: vec![0.0; d],
            dt: vec![0.0; d],
            du: vec![0.0; d],
        }
    }
}

/// Monte-Carlo KLUB estimator. Sample `j` of an estimate keyed by `key`
/// always consumes stream `j` in the same order (data, `t`, `e`, `e'`), so
/// two estimates with equal keys use common random numbers.
pub struct KlubEstimator<'a, D> {
    denoiser: &'a D,
    data: DataSource<'a>,
    n_mc: usize,
    c_imp: f64,
}

impl<'a, D: Denoiser> KlubEstimator<'a, D> {
    pub fn new(denoiser: &'a D, data: DataSource<'a>, n_mc: usize) -> Result<Self> {
        if n_mc < 2 {
            return Err(Error::param("n_mc", "need at least 2 samples for a standard error"));
        }
        if data.dim() != denoiser.dim() {
            return Err(Error::DimensionMismatch {
                expected: denoiser.dim(),
                got: data.dim(),
            });
        }
        Ok(Self {
            denoiser,
            data,
            n_mc,
            c_imp: C_IMP,
        })
    }

    pub fn with_c_imp(mut self, c_imp: f64) -> Self {
        self.c_imp = c_imp;
        self
    }

    pub fn n_mc(&self) -> usize {
        self.n_mc
    }

    /// `||D(x_t, t) - D(x_up, up)||^2` for sample `j` after `t` was drawn.
    fn sq_diff(&self, rng: &mut ChaCha8Rng, t: f64, up: f64, s: &mut Scratch) -> f64 {
        let noise = ((up - t) * (up + t)).max(0.0).sqrt();
        for k in 0..s.x0.len() {
            let e: f64 = rng.sample(StandardNormal);
            s.xt[k] = s.x0[k] + t * e;
        }
        for k in 0..s.x0.len() {
            let e: f64 = rng.sample(StandardNormal);
            s.xu[k] = s.xt[k] + noise * e;
        }
        self.denoiser.denoise(&s.xt, t, &mut s.dt);
        self.denoiser.denoise(&s.xu, up, &mut s.du);
        s.dt.iter().zip(&s.du).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    fn draw_samples(&self, sampler: &ImportanceSampler, key: StreamKey) -> Vec<KlubSample> {
        let d = self.denoiser.dim();
        (0..self.n_mc as u64)
            .into_par_iter()
            .map_init(
                || Scratch::new(d),
                |s, j| {
                    let mut rng = key.stream(j);
                    self.data.draw(&mut rng, &mut s.x0);
                    let (t, t_up) = sampler.sample(&mut rng);
                    let b = bracket(t, t_up, self.c_imp);
                    let sq = self.sq_diff(&mut rng, t, t_up, s);
                    let w = if b > 0.0 { sq / b } else { 0.0 };
                    KlubSample { t, t_up, w }
                },
            )
            .collect()
    }

    fn finish(&self, samples: &[KlubSample], z: f64) -> KlubEstimate {
        let (mean, sd) = mean_sd(samples.iter().map(|s| s.w));
        KlubEstimate {
            value: z * mean,
            std_error: z * sd / (samples.len() as f64).sqrt(),
            n_samples: samples.len(),
            normalization: Some(z),
        }
    }

    /// Estimate of `KLUB(t_lo, t_mid) + KLUB(t_mid, t_hi)` plus the per-sample table.
    pub fn pair_estimate_with_samples(&self, triple: &IntervalTriple, key: StreamKey) -> (KlubEstimate, Vec<KlubSample>) {
        let sampler = ImportanceSampler::for_triple(triple, self.c_imp);
        let samples = self.draw_samples(&sampler, key);
        (self.finish(&samples, sampler.normalization()), samples)
    }

    pub fn pair_estimate(&self, triple: &IntervalTriple, key: StreamKey) -> KlubEstimate {
        self.pair_estimate_with_samples(triple, key).0
    }

    pub fn interval_estimate(&self, lo: f64, hi: f64, key: StreamKey) -> Result<KlubEstimate> {
        let sampler = ImportanceSampler::for_interval(lo, hi, self.c_imp)?;
        let samples = self.draw_samples(&sampler, key);
        Ok(self.finish(&samples, sampler.normalization()))
    }

    /// Sum of per-interval estimates; interval `i` (from the top) uses `key.child(i)`.
    pub fn schedule_total(&self, s: &Schedule, key: StreamKey) -> KlubEstimate {
        let parts: Vec<KlubEstimate> = s
            .sigmas()
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                self.interval_estimate(w[1], w[0], key.child(i as u64))
                    .expect("schedule intervals are positive and increasing")
            })
            .collect();
        let mut total = parts[0];
        for p in &parts[1..] {
            total = total.add(*p);
        }
        if parts.len() > 1 {
            total.normalization = None;
        }
        total
    }

    /// Baseline estimate of the same pair integral with `t` log-uniform on
    /// `(t_lo, t_hi)`; used to measure the importance-sampling gain.
    pub fn log_uniform_pair_estimate(&self, triple: &IntervalTriple, key: StreamKey) -> (KlubEstimate, Vec<f64>) {
        let d = self.denoiser.dim();
        let span = (triple.t_hi / triple.t_lo).ln();
        let values: Vec<f64> = (0..self.n_mc as u64)
            .into_par_iter()
            .map_init(
                || Scratch::new(d),
                |s, j| {
                    let mut rng = key.stream(j);
                    self.data.draw(&mut rng, &mut s.x0);
                    let v: f64 = rng.sample(Open01);
                    let t = (triple.t_lo.ln() + v * span).exp().min(triple.t_hi);
                    let up = triple.t_up(t);
                    let sq = self.sq_diff(&mut rng, t, up, s);
                    sq * span / (t * t)
                },
            )
            .collect();
        let (mean, sd) = mean_sd(values.iter().copied());
        let est = KlubEstimate {
            value: mean,
            std_error: sd / (values.len() as f64).sqrt(),
            n_samples: values.len(),
            normalization: None,
        };
        (est, values)
    }
}

/// Mean and sample standard deviation, summed in order.
pub fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    let mean = sum / n as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    let sd = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
    (mean, sd)
}

/// Writes the `(t, t_up, w)` table as CSV.
pub fn write_samples_csv<W: std::io::Write>(samples: &[KlubSample], mut out: W) -> std::io::Result<()> {
    writeln!(out, "t,t_up,w")?;
    for s in samples {
        writeln!(out, "{},{},{}", s.t, s.t_up, s.w)?;
    }
    Ok(())
}
