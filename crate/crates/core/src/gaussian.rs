//! Closed-form results for isotropic Gaussian data `N(0, c^2 I)` in the
//! variance-exploding setting `sigma(t) = t`.
//!
//! These are the oracles the stochastic parts of the crate are checked
//! against: the score, the exact output law of n-step Euler (DDIM), its KL to
//! the true marginal, the path-space KL upper bound and the schedules that
//! minimize each.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{heuristic_schedule, HeuristicKind, NoiseSpec, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsoGaussian {
    /// Per-axis standard deviation of the data.
    pub c: f64,
    pub d: usize,
}

impl IsoGaussian {
    pub fn new(c: f64, d: usize) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::param("c", format!("must be positive, got {c}")));
        }
        if d == 0 {
            return Err(Error::param("d", "dimension must be at least 1"));
        }
        Ok(Self { c, d })
    }
}

/// `grad log p(x; t) = -x / (c^2 + t^2)`.
pub fn gaussian_score(x: &[f64], t: f64, c: f64) -> Vec<f64> {
    let k = -1.0 / (c * c + t * t);
    x.iter().map(|v| k * v).collect()
}

/// The Euler-KL-optimal schedule: `arctan(t_i / c)` linear in `i`.
pub fn gaussian_optimal_schedule(n: usize, spec: &NoiseSpec, c: f64) -> Result<Schedule> {
    if n == 0 {
        return Err(Error::param("n", "step count must be at least 1"));
    }
    let spec = NoiseSpec::new(spec.sigma_min, spec.sigma_max)?;
    let a0 = (spec.sigma_min / c).atan();
    let a1 = (spec.sigma_max / c).atan();
    let sigmas = (0..=n)
        .rev()
        .map(|i| {
            let u = i as f64 / n as f64;
            c * ((1.0 - u) * a0 + u * a1).tan()
        })
        .collect();
    Ok(Schedule::with_endpoints(sigmas, &spec)?.named(format!("gaussian-optimal-c{c}")))
}

/// Interior point minimizing the Euler KL between fixed neighbours.
pub fn kl_stationary_point(lo: f64, hi: f64, c: f64) -> f64 {
    let c2 = c * c;
    ((lo * hi - c2) + ((lo * lo + c2) * (hi * hi + c2)).sqrt()) / (lo + hi)
}

/// Interior point minimizing the Gaussian KLUB between fixed neighbours.
pub fn klub_stationary_point(lo: f64, hi: f64, c: f64) -> f64 {
    let c2 = c * c;
    let p = lo * hi;
    c * (p / (((lo * lo + c2) * (hi * hi + c2)).sqrt() - p)).sqrt()
}

fn max_relative_residual(s: &Schedule, point: impl Fn(f64, f64) -> f64) -> f64 {
    let ts = s.ascending();
    ts.windows(3)
        .map(|w| ((w[1] - point(w[0], w[2])) / w[1]).abs())
        .fold(0.0, f64::max)
}

/// Largest relative violation of the Euler-KL stationarity condition.
pub fn kl_stationarity_residual(s: &Schedule, c: f64) -> f64 {
    max_relative_residual(s, |lo, hi| kl_stationary_point(lo, hi, c))
}

/// Largest relative violation of the KLUB stationarity condition.
pub fn klub_stationarity_residual(s: &Schedule, c: f64) -> f64 {
    max_relative_residual(s, |lo, hi| klub_stationary_point(lo, hi, c))
}

/// Product of per-step gains `(t_{i-1} t_i + c^2) / (t_i^2 + c^2)`: one Euler
/// step from `b` to `a` multiplies `x` by `(ab + c^2) / (b^2 + c^2)`.
pub fn euler_gain(s: &Schedule, c: f64) -> f64 {
    let c2 = c * c;
    s.sigmas()
        .windows(2)
        .map(|w| (w[1] * w[0] + c2) / (w[0] * w[0] + c2))
        .product()
}

/// Per-axis variance of n-step Euler output when started from
/// `N(0, prior_var)`.
pub fn euler_output_variance(s: &Schedule, c: f64, prior_var: f64) -> f64 {
    let g = euler_gain(s, c);
    g * g * prior_var
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerKl {
    /// Ratio of true to Euler output variance.
    pub f: f64,
    pub log_f: f64,
    pub kl: f64,
}

/// Exact KL between `p(x; t_min)` and the output of n Euler steps started at
/// `p(x; t_max)`: `(d/2)(f - 1 - log f)`.
pub fn gaussian_euler_kl(s: &Schedule, c: f64, d: usize) -> EulerKl {
    let c2 = c * c;
    let ts = s.ascending();
    let n = ts.len() - 1;
    let mut log_f = (ts[0] * ts[0] + c2).ln() + (ts[n] * ts[n] + c2).ln();
    for t in &ts[1..n] {
        log_f += 2.0 * (t * t + c2).ln();
    }
    for w in ts.windows(2) {
        log_f -= 2.0 * (w[0] * w[1] + c2).ln();
    }
    let kl = 0.5 * d as f64 * (log_f.exp_m1() - log_f);
    EulerKl {
        f: log_f.exp(),
        log_f,
        kl,
    }
}

/// Gaussian KLUB of one interval `(lo, hi)`, up to the schedule-independent
/// factor `d / 2`:
/// `log((hi^2+c^2)/(lo^2+c^2)) - log(hi^2/lo^2) + c^2 (hi^2-lo^2) / ((c^2+hi^2) lo^2)`.
pub fn klub_interval(lo: f64, hi: f64, c: f64) -> f64 {
    let c2 = c * c;
    let gap = hi * hi - lo * lo;
    (gap / (lo * lo + c2)).ln_1p() - 2.0 * (hi / lo).ln() + c2 * gap / ((c2 + hi * hi) * lo * lo)
}

/// Total Gaussian KLUB of a schedule (same constant as [`klub_interval`]).
pub fn gaussian_klub_closed_form(s: &Schedule, c: f64) -> f64 {
    s.sigmas()
        .windows(2)
        .map(|w| klub_interval(w[1], w[0], c))
        .sum()
}

pub const KLUB_FIXED_POINT_MAX_ITERS: usize = 10_000;
pub const KLUB_FIXED_POINT_TOL: f64 = 1e-12;

/// Solves the KLUB stationarity equations by Gauss-Seidel fixed-point sweeps,
/// starting from EDM (rho = 7).
pub fn gaussian_klub_optimal_schedule(n: usize, spec: &NoiseSpec, c: f64) -> Result<Schedule> {
    if n < 2 {
        return Err(Error::param("n", "need at least 2 steps for an interior point"));
    }
    let init = heuristic_schedule(HeuristicKind::Edm { rho: 7.0 }, n, spec)?;
    let mut ts = init.ascending();
    let mut change = f64::INFINITY;
    for _ in 0..KLUB_FIXED_POINT_MAX_ITERS {
        change = 0.0;
        for i in 1..n {
            let next = klub_stationary_point(ts[i - 1], ts[i + 1], c);
            change = f64::max(change, ((next - ts[i]) / ts[i]).abs());
            ts[i] = next;
        }
        if change < KLUB_FIXED_POINT_TOL {
            return Ok(Schedule::from_ascending(&ts)?.named(format!("gaussian-klub-optimal-c{c}")));
        }
    }
    Err(Error::NoConvergence {
        iterations: KLUB_FIXED_POINT_MAX_ITERS,
        residual: change,
    })
}

/// Per-dimension `E||D(x_t, t) - D(x_ti, t_i)||^2` under the forward process:
/// `c^4 (1/(t^2+c^2) - 1/(t_i^2+c^2))`. Multiply by `d` for the full norm.
pub fn denoiser_gap_expectation(t: f64, t_i: f64, c: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::param("t", format!("must be non-negative, got {t}")));
    }
    if t > t_i {
        return Err(Error::param("t", format!("must not exceed t_i ({t} > {t_i})")));
    }
    let c2 = c * c;
    Ok(c2 * c2 * (1.0 / (t * t + c2) - 1.0 / (t_i * t_i + c2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> NoiseSpec {
        NoiseSpec::default()
    }

    #[test]
    fn score_examples() {
        assert_eq!(gaussian_score(&[0.0, 0.0], 3.0, 1.0), vec![-0.0, -0.0]);
        assert_eq!(gaussian_score(&[1.0, 0.0], 0.0, 1.0), vec![-1.0, -0.0]);
        assert_eq!(gaussian_score(&[2.0], 1.0, 1.0), vec![-1.0]);
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let c = rng.gen_range(0.2..3.0);
            let t = rng.gen_range(0.0..5.0);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let v = c * c + t * t;
            let logp = |x: &[f64]| -0.5 * x.iter().map(|a| a * a).sum::<f64>() / v;
            let s = gaussian_score(&x, t, c);
            for k in 0..3 {
                let h = 1e-5;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (logp(&xp) - logp(&xm)) / (2.0 * h);
                assert!((fd - s[k]).abs() <= 1e-6 * s[k].abs().max(1e-3));
            }
        }
    }

    #[test]
    fn optimal_schedule_examples() {
        let s = gaussian_optimal_schedule(1, &spec(), 1.0).unwrap();
        assert_eq!(s.sigmas(), &[80.0, 0.002]);
        let s = gaussian_optimal_schedule(2, &spec(), 1.0).unwrap();
        assert!((s.sigmas()[1] - 0.9895553832181438).abs() < 1e-12);
        // Large c linearizes tan/arctan.
        let s = gaussian_optimal_schedule(4, &spec(), 1e7).unwrap();
        for (i, v) in s.ascending().iter().enumerate() {
            let lin = 0.002 + i as f64 / 4.0 * (80.0 - 0.002);
            assert!((v - lin).abs() < 1e-6 * lin.max(1.0));
        }
    }

    #[test]
    fn optimal_schedule_is_kl_stationary() {
        for c in [0.1, 0.5, 1.0, 2.0] {
            for n in [2, 5, 10, 40] {
                let s = gaussian_optimal_schedule(n, &spec(), c).unwrap();
                assert!(kl_stationarity_residual(&s, c) < 1e-10, "c={c} n={n}");
            }
        }
    }

    #[test]
    fn kl_stationary_forms_agree() {
        for (lo, hi, c) in [(0.002f64, 80.0f64, 1.0f64), (0.3, 2.0, 0.5), (1.0, 1.5, 3.0)] {
            let alt = c * (0.5 * ((lo / c).atan() + (hi / c).atan())).tan();
            assert!((kl_stationary_point(lo, hi, c) - alt).abs() < 1e-12 * alt);
        }
    }

    #[test]
    fn euler_kl_examples() {
        let one = Schedule::new(vec![80.0, 0.002]).unwrap();
        let r = gaussian_euler_kl(&one, 1.0, 1);
        let f = (0.002f64.powi(2) + 1.0) * (6400.0 + 1.0) / (0.16f64 + 1.0).powi(2);
        assert!((r.f - f).abs() < 1e-12 * f);
        assert!((r.kl - 0.5 * (f - 1.0 - f.ln())).abs() < 1e-12 * r.kl);

        let s = Schedule::new(vec![80.0, 1.0, 0.002]).unwrap();
        let r = gaussian_euler_kl(&s, 1.0, 1);
        assert!((r.f - 3.886906331089336).abs() < 1e-12);
        assert!((r.kl - 0.764646388752833).abs() < 1e-12);
        let r2 = gaussian_euler_kl(&s, 1.0, 2);
        assert_eq!(r2.kl, 2.0 * r.kl);
    }

    #[test]
    fn euler_kl_is_positive_and_stable() {
        for n in [1, 2, 10, 300] {
            let s = heuristic_schedule(HeuristicKind::Edm { rho: 7.0 }, n, &spec()).unwrap();
            let r = gaussian_euler_kl(&s, 1.0, 1);
            assert!(r.f > 1.0 && r.kl > 0.0, "n={n}");
        }
        // Very fine schedules: f -> 1, KL stays positive without cancellation.
        let s = heuristic_schedule(HeuristicKind::Edm { rho: 7.0 }, 20_000, &spec()).unwrap();
        assert!(gaussian_euler_kl(&s, 1.0, 1).kl > 0.0);
    }

    #[test]
    fn klub_closed_form_two_points() {
        let s = Schedule::new(vec![80.0, 0.002]).unwrap();
        let c2: f64 = 1.0;
        let a2 = 4e-6;
        let b2 = 6400.0;
        let expected = ((b2 + c2) / (a2 + c2)).ln() - (b2 / a2).ln() + c2 * (b2 - a2) / ((c2 + b2) * a2);
        let got = gaussian_klub_closed_form(&s, 1.0);
        assert!((got - expected).abs() < 1e-9 * expected);
        assert!((got - 249948.51438237747).abs() < 1e-6);
    }

    fn sum_term(s: &Schedule, c: f64) -> f64 {
        let c2 = c * c;
        s.sigmas()
            .windows(2)
            .map(|w| c2 * (w[0] * w[0] - w[1] * w[1]) / ((c2 + w[0] * w[0]) * w[1] * w[1]))
            .sum()
    }

    #[test]
    fn inserting_a_point_decreases_sum_term() {
        let (lo, hi) = (0.002f64, 80.0f64);
        let base = Schedule::new(vec![hi, lo]).unwrap();
        for k in 1..200 {
            let t = (lo.ln() + k as f64 / 200.0 * (hi / lo).ln()).exp();
            let s = Schedule::new(vec![hi, t, lo]).unwrap();
            assert!(sum_term(&s, 1.0) < sum_term(&base, 1.0));
            assert!(gaussian_klub_closed_form(&s, 1.0) < gaussian_klub_closed_form(&base, 1.0));
        }
    }

    #[test]
    fn sum_term_approaches_integral_limit() {
        let loguniform = |n: usize| {
            let ts: Vec<f64> = (0..=n)
                .map(|i| (0.002f64.ln() + i as f64 / n as f64 * (80.0f64 / 0.002).ln()).exp())
                .collect();
            Schedule::with_endpoints(ts.into_iter().rev().collect(), &spec()).unwrap()
        };
        let limit = (6400.0f64 / 4e-6).ln() - (6401.0f64 / (1.0 + 4e-6)).ln();
        let s64 = sum_term(&loguniform(64), 1.0);
        let s1024 = sum_term(&loguniform(1024), 1.0);
        // Independently evaluated: 14.538001563676975 and 12.548120845102941.
        assert!((s64 - 14.538001563676975).abs() < 1e-9);
        assert!((s1024 - 12.548120845102941).abs() < 1e-9);
        assert!(s1024 < s64 && s1024 > limit);
        assert!((s1024 - limit) / limit < 0.01);
    }

    #[test]
    fn klub_optimal_two_steps() {
        let s = gaussian_klub_optimal_schedule(2, &spec(), 1.0).unwrap();
        assert!((s.sigmas()[1] - 0.044764351238872346).abs() < 1e-12);
        let kl_opt = gaussian_optimal_schedule(2, &spec(), 1.0).unwrap();
        assert!((kl_opt.sigmas()[1] - s.sigmas()[1]).abs() > 0.5);
        assert!(gaussian_klub_optimal_schedule(1, &spec(), 1.0).is_err());
    }

    #[test]
    fn klub_optimal_is_stationary_and_minimal() {
        for c in [0.5, 1.0] {
            for n in [3, 10, 40] {
                let s = gaussian_klub_optimal_schedule(n, &spec(), c).unwrap();
                assert!(klub_stationarity_residual(&s, c) < 1e-10, "c={c} n={n}");
                let base = gaussian_klub_closed_form(&s, c);
                for i in 1..n {
                    for f in [0.95, 1.05] {
                        let p = s.with_value(i, s.sigmas()[i] * f).unwrap();
                        assert!(gaussian_klub_closed_form(&p, c) > base);
                    }
                }
            }
        }
    }

    #[test]
    fn klub_fixed_point_is_stable() {
        let s = gaussian_klub_optimal_schedule(6, &spec(), 1.0).unwrap();
        let mut ts = s.ascending();
        for (i, t) in ts.iter_mut().enumerate().skip(1).take(5) {
            *t *= if i % 2 == 0 { 1.1 } else { 0.9 };
        }
        for _ in 0..10_000 {
            for i in 1..6 {
                ts[i] = klub_stationary_point(ts[i - 1], ts[i + 1], 1.0);
            }
        }
        for (a, b) in ts.iter().zip(s.ascending()) {
            assert!((a - b).abs() < 1e-8 * b);
        }
    }

    #[test]
    fn denoiser_gap_examples() {
        assert_eq!(denoiser_gap_expectation(2.0, 2.0, 1.0).unwrap(), 0.0);
        assert!((denoiser_gap_expectation(1.0, 2.0, 1.0).unwrap() - 0.3).abs() < 1e-15);
        assert!((3.0 * denoiser_gap_expectation(1.0, 2.0, 1.0).unwrap() - 0.9).abs() < 1e-15);
        assert!(denoiser_gap_expectation(3.0, 2.0, 1.0).is_err());
        assert!(denoiser_gap_expectation(0.5, 2.0, 1.0).unwrap() > 0.0);
    }

    #[test]
    fn denoiser_gap_matches_forward_process_monte_carlo() {
        use rand_distr::StandardNormal;
        let (t, ti, c, d) = (1.0, 2.0, 1.0, 3usize);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let den = |x: f64, s: f64| c * c * x / (c * c + s * s);
        let mut acc = 0.0;
        for _ in 0..n {
            for _ in 0..d {
                let x0: f64 = c * rng.sample::<f64, _>(StandardNormal);
                let xt = x0 + t * rng.sample::<f64, _>(StandardNormal);
                let xi = xt + (ti * ti - t * t as f64).sqrt() * rng.sample::<f64, _>(StandardNormal);
                acc += (den(xt, t) - den(xi, ti)).powi(2);
            }
        }
        let mc = acc / n as f64;
        assert!((mc - 0.9).abs() / 0.9 < 0.02);
    }

    #[test]
    fn euler_step_factor() {
        // One step 2 -> 1 with c = 1 scales by 0.6.
        let s = Schedule::new(vec![2.0, 1.0]).unwrap();
        assert!((euler_gain(&s, 1.0) - 0.6).abs() < 1e-15);
    }
}
