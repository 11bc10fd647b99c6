//! Variance-exploding sampling loop and per-step update rules.
//!
//! Every rule here has the form `x' = alpha x + beta D_hat + gamma z`, the
//! exact solution of the sampler's SDE with the denoiser frozen over the step
//! (extrapolated from the previous step for the 2M multistep kinds).

use std::fmt;
use std::str::FromStr;

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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SolverKind {
    Ddim,
    /// Same as `ErSde { lambda: 1.0 }`.
    StochasticDdim,
    ErSde { lambda: f64 },
    DpmPp2m,
    SdeDpmPp2m,
}

impl SolverKind {
    pub fn validate(&self) -> Result<()> {
        if let SolverKind::ErSde { lambda } = self {
            if !(*lambda > 0.0 && lambda.is_finite()) {
                return Err(Error::param("lambda", format!("must be positive, got {lambda}")));
            }
        }
        Ok(())
    }

    pub fn is_stochastic(&self) -> bool {
        !matches!(self, SolverKind::Ddim | SolverKind::DpmPp2m)
    }

    pub fn is_multistep(&self) -> bool {
        matches!(self, SolverKind::DpmPp2m | SolverKind::SdeDpmPp2m)
    }

    /// Noise exponent `lambda` of the equivalent ER-SDE, `0` for ODE kinds.
    fn lambda(&self) -> f64 {
        match self {
            SolverKind::Ddim | SolverKind::DpmPp2m => 0.0,
            SolverKind::StochasticDdim | SolverKind::SdeDpmPp2m => 1.0,
            SolverKind::ErSde { lambda } => *lambda,
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolverKind::Ddim => f.write_str("ddim"),
            SolverKind::StochasticDdim => f.write_str("stochastic-ddim"),
            SolverKind::ErSde { lambda } => write!(f, "er-sde:{lambda}"),
            SolverKind::DpmPp2m => f.write_str("dpmpp-2m"),
            SolverKind::SdeDpmPp2m => f.write_str("sde-dpmpp-2m"),
        }
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "ddim" => SolverKind::Ddim,
            "stochastic-ddim" => SolverKind::StochasticDdim,
            "dpmpp-2m" => SolverKind::DpmPp2m,
            "sde-dpmpp-2m" => SolverKind::SdeDpmPp2m,
            other => match other.strip_prefix("er-sde:") {
                Some(l) => SolverKind::ErSde {
                    lambda: l
                        .parse()
                        .map_err(|_| Error::param("lambda", format!("not a number: {l}")))?,
                },
                None => return Err(Error::param("solver", format!("unknown solver `{s}`"))),
            },
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// Previous denoiser evaluation kept by the multistep kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct History<'a> {
    pub sigma: f64,
    pub denoised: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct StepRule {
    x_coef: f64,
    d_coef: f64,
    noise_coef: f64,
}

fn check_step(b: f64, a: f64) -> Result<()> {
    if !(a > 0.0 && a < b) {
        return Err(Error::NonDecreasingStep { from: b, to: a });
    }
    Ok(())
}

/// `(a/b)^(l^2+1)` drift and `a sqrt(1 - (a/b)^(2 l^2))` noise; `l = 0` is DDIM.
fn er_sde_rule(b: f64, a: f64, lambda: f64) -> StepRule {
    let log_ratio = (a / b).ln();
    let l2 = lambda * lambda;
    let x_coef = ((l2 + 1.0) * log_ratio).exp();
    StepRule {
        x_coef,
        d_coef: -((l2 + 1.0) * log_ratio).exp_m1(),
        noise_coef: a * (-(2.0 * l2 * log_ratio).exp_m1()).sqrt(),
    }
}

/// Weights `(w_b, w_prev)` of the second-order denoiser extrapolation.
fn extrapolation_weights(b: f64, a: f64, prev: f64) -> Result<(f64, f64)> {
    if !(prev > b) {
        return Err(Error::param(
            "history",
            format!("previous sigma {prev} must exceed current sigma {b}"),
        ));
    }
    let r = (prev.ln() - b.ln()) / (b.ln() - a.ln());
    let k = 1.0 / (2.0 * r);
    Ok((1.0 + k, -k))
}

fn apply(rule: StepRule, x: &[f64], d_hat: &[f64], z: Option<&[f64]>) -> Vec<f64> {
    let mut out: Vec<f64> = x
        .iter()
        .zip(d_hat)
        .map(|(x, d)| rule.x_coef * x + rule.d_coef * d)
        .collect();
    if let Some(z) = z {
        for (o, z) in out.iter_mut().zip(z) {
            *o += rule.noise_coef * z;
        }
    }
    out
}

fn extrapolate(b: f64, a: f64, d_b: &[f64], history: Option<&History<'_>>) -> Result<Vec<f64>> {
    match history {
        None => Ok(d_b.to_vec()),
        Some(h) => {
            if h.denoised.len() != d_b.len() {
                return Err(Error::DimensionMismatch {
                    expected: d_b.len(),
                    got: h.denoised.len(),
                });
            }
            let (wb, wp) = extrapolation_weights(b, a, h.sigma)?;
            Ok(d_b.iter().zip(h.denoised).map(|(d, p)| wb * d + wp * p).collect())
        }
    }
}

/// DDIM / Euler step `x' = (a/b) x + (1 - a/b) D_b`.
pub fn step_ddim(x: &[f64], b: f64, a: f64, d_b: &[f64]) -> Result<Vec<f64>> {
    check_step(b, a)?;
    Ok(apply(er_sde_rule(b, a, 0.0), x, d_b, None))
}

/// First-order ER-SDE step with diffusion `lambda sqrt(2t)`.
pub fn step_er_sde_lambda(x: &[f64], b: f64, a: f64, d_b: &[f64], lambda: f64, z: &[f64]) -> Result<Vec<f64>> {
    check_step(b, a)?;
    SolverKind::ErSde { lambda }.validate()?;
    Ok(apply(er_sde_rule(b, a, lambda), x, d_b, Some(z)))
}

/// DPM-Solver++(2M) in data-prediction form.
pub fn step_dpmpp_2m(x: &[f64], b: f64, a: f64, d_b: &[f64], history: Option<&History<'_>>) -> Result<Vec<f64>> {
    check_step(b, a)?;
    let d_hat = extrapolate(b, a, d_b, history)?;
    Ok(apply(er_sde_rule(b, a, 0.0), x, &d_hat, None))
}

/// SDE-DPM-Solver++(2M): the `lambda = 1` rule with the 2M extrapolated denoiser.
pub fn step_sde_dpmpp_2m(
    x: &[f64],
    b: f64,
    a: f64,
    d_b: &[f64],
    history: Option<&History<'_>>,
    z: &[f64],
) -> Result<Vec<f64>> {
    check_step(b, a)?;
    let d_hat = extrapolate(b, a, d_b, history)?;
    Ok(apply(er_sde_rule(b, a, 1.0), x, &d_hat, Some(z)))
}

/// Distribution of the starting point at `sigma_max`.
#[derive(Debug, Clone, Copy)]
pub enum Prior<'a> {
    /// `N(0, sigma_max^2 I)`.
    Isotropic,
    /// `p(x; sigma_max)`: a data sample plus `sigma_max` noise.
    Marginal(&'a DataModel),
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerOptions<'a> {
    pub prior: Prior<'a>,
    pub trace: bool,
}

impl Default for SamplerOptions<'_> {
    fn default() -> Self {
        Self {
            prior: Prior::Isotropic,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub sigma_from: f64,
    pub sigma_to: f64,
    pub mean_abs_x: f64,
    pub mean_abs_d: f64,
}

#[derive(Debug, Clone)]
pub struct SamplerOutput {
    pub samples: Vec<f64>,
    pub dim: usize,
    pub nfe: usize,
    pub trace: Option<Vec<TraceRow>>,
}

impl SamplerOutput {
    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

struct Lane<'a> {
    x: &'a mut [f64],
    prev: &'a mut [f64],
    rng: &'a mut ChaCha8Rng,
}

/// Runs `kind` along `schedule` from `n` prior draws. Sample `i` owns random
/// stream `i` of `seed`, so output is independent of thread count.
pub fn run_sampler<D: Denoiser>(
    denoiser: &D,
    kind: SolverKind,
    schedule: &Schedule,
    n: usize,
    seed: u64,
    options: SamplerOptions<'_>,
) -> Result<SamplerOutput> {
    kind.validate()?;
    let d = denoiser.dim();
    let key = StreamKey::new(seed, domain::SAMPLER);
    let mut rngs: Vec<ChaCha8Rng> = (0..n as u64).map(|i| key.stream(i)).collect();
    let mut x = vec![0.0; n * d];
    let sigma_max = schedule.sigma_max();
    x.par_chunks_mut(d).zip(rngs.par_iter_mut()).for_each(|(row, rng)| {
        match options.prior {
            Prior::Isotropic => {
                for v in row.iter_mut() {
                    *v = sigma_max * rng.sample::<f64, _>(StandardNormal);
                }
            }
            Prior::Marginal(model) => {
                model.sample_into(rng, row);
                for v in row.iter_mut() {
                    *v += sigma_max * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    });
    integrate(denoiser, kind, schedule, x, &mut rngs, options.trace)
}

/// Runs the sampler from explicit starting points (one stream per row).
pub fn run_from<D: Denoiser>(
    denoiser: &D,
    kind: SolverKind,
    schedule: &Schedule,
    initial: Vec<f64>,
    seed: u64,
) -> Result<SamplerOutput> {
    kind.validate()?;
    let d = denoiser.dim();
    if initial.len() % d != 0 {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: initial.len() % d,
        });
    }
    let key = StreamKey::new(seed, domain::SAMPLER);
    let mut rngs: Vec<ChaCha8Rng> = (0..(initial.len() / d) as u64).map(|i| key.stream(i)).collect();
    integrate(denoiser, kind, schedule, initial, &mut rngs, false)
}

fn integrate<D: Denoiser>(
    denoiser: &D,
    kind: SolverKind,
    schedule: &Schedule,
    mut x: Vec<f64>,
    rngs: &mut [ChaCha8Rng],
    trace: bool,
) -> Result<SamplerOutput> {
    let d = denoiser.dim();
    let mut prev = vec![0.0; x.len()];
    let sigmas = schedule.sigmas();
    let lambda = kind.lambda();
    let mut rows = trace.then(Vec::new);

    for step in 0..schedule.steps() {
        let (b, a) = (sigmas[step], sigmas[step + 1]);
        let rule = er_sde_rule(b, a, lambda);
        let weights = if kind.is_multistep() && step > 0 {
            Some(extrapolation_weights(b, a, sigmas[step - 1])?)
        } else {
            None
        };
        let stochastic = kind.is_stochastic();

        let lanes: Vec<Lane<'_>> = x
            .chunks_mut(d)
            .zip(prev.chunks_mut(d))
            .zip(rngs.iter_mut())
            .map(|((x, prev), rng)| Lane { x, prev, rng })
            .collect();
        let norms: Vec<(f64, f64)> = lanes
            .into_par_iter()
            .map_init(
                || vec![0.0; d],
                |den, lane| {
                    denoiser.denoise(lane.x, b, den);
                    let stats = if trace { (norm(lane.x), norm(den)) } else { (0.0, 0.0) };
                    for k in 0..d {
                        let d_hat = match weights {
                            Some((wb, wp)) => wb * den[k] + wp * lane.prev[k],
                            None => den[k],
                        };
                        lane.x[k] = rule.x_coef * lane.x[k] + rule.d_coef * d_hat;
                        lane.prev[k] = den[k];
                    }
                    if stochastic {
                        for k in 0..d {
                            lane.x[k] += rule.noise_coef * lane.rng.sample::<f64, _>(StandardNormal);
                        }
                    }
                    stats
                },
            )
            .collect();

        if let Some(rows) = rows.as_mut() {
            let n = norms.len().max(1) as f64;
            rows.push(TraceRow {
                step,
                sigma_from: b,
                sigma_to: a,
                mean_abs_x: norms.iter().map(|p| p.0).sum::<f64>() / n,
                mean_abs_d: norms.iter().map(|p| p.1).sum::<f64>() / n,
            });
        }
    }

    Ok(SamplerOutput {
        samples: x,
        dim: d,
        nfe: schedule.steps(),
        trace: rows,
    })
}
