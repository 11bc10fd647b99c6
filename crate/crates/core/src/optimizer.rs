//! Coordinate-descent schedule optimization with early stopping and
//! hierarchical refinement.
//!
//! Indices refer to [`Schedule::sigmas`], which is stored from `sigma_max`
//! down. Index `i` has neighbors `i - 1` (larger) and `i + 1` (smaller).

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::gaussian::{gaussian_euler_kl, klub_interval};
use crate::klub::{DataPool, DataSource, IntervalTriple, KlubEstimator};
use crate::rng::{derive_seed, domain, StreamKey};
use crate::schedule::Schedule;
use crate::solvers::{run_sampler, SamplerOptions, SolverKind};
use crate::toy_models::DataModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub n_candidates: usize,
    /// Fraction of the log-gap to each neighbor covered by the candidates.
    pub span: f64,
    pub n_mc: usize,
    pub pool_size: usize,
    pub stage1_max_sweeps: usize,
    pub refine_max_sweeps: usize,
    /// Sweeps between monitor evaluations.
    pub monitor_every: usize,
    pub monitor_samples: usize,
    pub seed: u64,
    /// Red-black sweeps (odd indices, then even) instead of serial ones.
    pub parallel: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            n_candidates: 11,
            span: 0.9,
            n_mc: 4096,
            pool_size: 8192,
            stage1_max_sweeps: 30,
            refine_max_sweeps: 5,
            monitor_every: 1,
            monitor_samples: 20_000,
            seed: 0,
            parallel: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates < 3 || self.n_candidates % 2 == 0 {
            return Err(Error::param("n_candidates", format!("must be odd and >= 3, got {}", self.n_candidates)));
        }
        if !(self.span > 0.0 && self.span < 1.0) {
            return Err(Error::param("span", format!("must lie in (0, 1), got {}", self.span)));
        }
        if self.n_mc < 2 {
            return Err(Error::param("n_mc", "must be at least 2"));
        }
        if self.pool_size == 0 {
            return Err(Error::param("pool_size", "must be positive"));
        }
        if self.monitor_every == 0 {
            return Err(Error::param("monitor_every", "must be positive"));
        }
        if self.monitor_samples == 0 {
            return Err(Error::param("monitor_samples", "must be positive"));
        }
        Ok(())
    }

    /// Log-spacing of the candidate grid for a point with neighbors `lo < hi`.
    pub fn cell_width(&self, lo: f64, hi: f64) -> f64 {
        (hi / lo).ln() * self.span / (self.n_candidates - 2) as f64
    }
}

/// Candidate values for an interior point: `n_candidates - 1` points evenly
/// spaced in log over the span-restricted neighborhood, then the current value.
pub fn candidates(lo: f64, t: f64, hi: f64, n_candidates: usize, span: f64) -> Vec<f64> {
    let a = (lo.ln() * span + t.ln() * (1.0 - span)).exp();
    let b = (hi.ln() * span + t.ln() * (1.0 - span)).exp();
    let m = n_candidates - 1;
    let (la, lb) = (a.ln(), b.ln());
    let mut out: Vec<f64> = (0..m)
        .map(|k| {
            let v = (la + (lb - la) * k as f64 / (m - 1) as f64).exp();
            v.clamp(a, b)
        })
        .collect();
    out.push(t);
    out
}

/// Where a pair evaluation sits in the run; seeds the common random numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairContext {
    pub stage: usize,
    pub index: usize,
}

/// An objective over adjacent interval pairs. Lower is better.
pub trait KlubObjective: Sync {
    fn pair(&self, triple: &IntervalTriple, ctx: PairContext) -> f64;

    /// Total over the schedule with its standard error (zero if exact).
    fn total(&self, s: &Schedule, stage: usize) -> (f64, f64);

    /// Denoiser evaluations spent so far.
    fn evaluations(&self) -> u64 {
        0
    }
}

/// Exact Gaussian KLUB, in the same units as the Monte-Carlo estimator.
#[derive(Debug, Clone, Copy)]
pub struct GaussianClosedForm {
    pub c: f64,
    pub d: usize,
}

impl KlubObjective for GaussianClosedForm {
    fn pair(&self, tr: &IntervalTriple, _ctx: PairContext) -> f64 {
        0.5 * self.d as f64 * (klub_interval(tr.t_lo, tr.t_mid, self.c) + klub_interval(tr.t_mid, tr.t_hi, self.c))
    }

    fn total(&self, s: &Schedule, _stage: usize) -> (f64, f64) {
        (0.5 * self.d as f64 * crate::gaussian::gaussian_klub_closed_form(s, self.c), 0.0)
    }
}

pub struct MonteCarloObjective<'a, D> {
    estimator: KlubEstimator<'a, D>,
    key: StreamKey,
    evals: AtomicU64,
}

impl<'a, D: Denoiser> MonteCarloObjective<'a, D> {
    pub fn new(estimator: KlubEstimator<'a, D>, seed: u64) -> Self {
        Self {
            estimator,
            key: StreamKey::new(seed, domain::KLUB),
            evals: AtomicU64::new(0),
        }
    }
}

impl<D: Denoiser> KlubObjective for MonteCarloObjective<'_, D> {
    fn pair(&self, triple: &IntervalTriple, ctx: PairContext) -> f64 {
        self.evals.fetch_add(2 * self.estimator.n_mc() as u64, Ordering::Relaxed);
        let key = self.key.child(ctx.stage as u64).child(ctx.index as u64);
        self.estimator.pair_estimate(triple, key).value
    }

    fn total(&self, s: &Schedule, stage: usize) -> (f64, f64) {
        self.evals.fetch_add((2 * self.estimator.n_mc() * s.steps()) as u64, Ordering::Relaxed);
        let key = StreamKey::new(derive_seed(self.key.seed, domain::TOTAL), domain::TOTAL).child(stage as u64);
        let e = self.estimator.schedule_total(s, key);
        (e.value, e.std_error)
    }

    fn evaluations(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }
}

/// Output-quality monitor for early stopping. Lower is better.
pub trait Monitor: Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, s: &Schedule) -> Result<f64>;
}

/// Exact KL of Euler sampling on Gaussian data.
#[derive(Debug, Clone, Copy)]
pub struct EulerKlMonitor {
    pub c: f64,
    pub d: usize,
}

impl Monitor for EulerKlMonitor {
    fn name(&self) -> &str {
        "gaussian-euler-kl"
    }

    fn evaluate(&self, s: &Schedule) -> Result<f64> {
        Ok(gaussian_euler_kl(s, self.c, self.d).kl)
    }
}

/// NLL of sampler output under the model, with a fixed sampling seed.
pub struct NllMonitor<'a> {
    pub model: &'a DataModel,
    pub solver: SolverKind,
    pub n_samples: usize,
    pub seed: u64,
}

impl Monitor for NllMonitor<'_> {
    fn name(&self) -> &str {
        "nll"
    }

    fn evaluate(&self, s: &Schedule) -> Result<f64> {
        let out = run_sampler(self.model, self.solver, s, self.n_samples, self.seed, SamplerOptions::default())?;
        self.model.nll(&out.samples)
    }
}

pub struct FnMonitor<F> {
    pub name: String,
    pub f: F,
}

impl<F: Fn(&Schedule) -> Result<f64> + Sync> Monitor for FnMonitor<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn evaluate(&self, s: &Schedule) -> Result<f64> {
        (self.f)(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexUpdate {
    pub value: f64,
    pub changed: bool,
    /// Objective at the current value minus at the chosen one (>= 0).
    pub improvement: f64,
}

fn check_interior(s: &Schedule, i: usize) -> Result<()> {
    if i == 0 || i >= s.steps() {
        return Err(Error::IndexOutOfRange { index: i, steps: s.steps() });
    }
    Ok(())
}

fn best_for_index(
    s: &Schedule,
    i: usize,
    cfg: &OptimizerConfig,
    obj: &dyn KlubObjective,
    stage: usize,
) -> IndexUpdate {
    let sig = s.sigmas();
    let (hi, t, lo) = (sig[i - 1], sig[i], sig[i + 1]);
    let ctx = PairContext { stage, index: i };
    let cands = candidates(lo, t, hi, cfg.n_candidates, cfg.span);
    let current = *cands.last().expect("candidates include the current value");
    let triple = |v: f64| IntervalTriple::new(lo, v, hi).expect("candidates lie strictly inside the neighbors");
    let current_value = obj.pair(&triple(current), ctx);
    let mut best = (current, current_value);
    for &v in &cands[..cands.len() - 1] {
        let val = obj.pair(&triple(v), ctx);
        if val < best.1 {
            best = (v, val);
        }
    }
    IndexUpdate {
        value: best.0,
        changed: best.0 != current,
        improvement: current_value - best.1,
    }
}

/// Sets `t_i` to the best candidate; `changed` is false when the current value wins.
pub fn optimize_index(
    s: &Schedule,
    i: usize,
    cfg: &OptimizerConfig,
    obj: &dyn KlubObjective,
    stage: usize,
) -> Result<(Schedule, IndexUpdate)> {
    cfg.validate()?;
    check_interior(s, i)?;
    let up = best_for_index(s, i, cfg, obj, stage);
    Ok((s.with_value(i, up.value)?, up))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub changed: usize,
    pub index_updates: usize,
    pub improvement: f64,
}

/// One pass over `indices`. Serial sweeps visit them in order; parallel sweeps
/// update odd indices against the current schedule, then even ones.
pub fn sweep(
    s: &Schedule,
    indices: &[usize],
    cfg: &OptimizerConfig,
    obj: &dyn KlubObjective,
    stage: usize,
) -> Result<(Schedule, SweepOutcome)> {
    cfg.validate()?;
    for &i in indices {
        check_interior(s, i)?;
    }
    let mut cur = s.clone();
    let mut out = SweepOutcome {
        changed: 0,
        index_updates: 0,
        improvement: 0.0,
    };
    if cfg.parallel {
        for parity in [1, 0] {
            let color: Vec<usize> = indices.iter().copied().filter(|i| i % 2 == parity).collect();
            let ups: Vec<IndexUpdate> = color
                .par_iter()
                .map(|&i| best_for_index(&cur, i, cfg, obj, stage))
                .collect();
            let mut sig = cur.sigmas().to_vec();
            for (&i, up) in color.iter().zip(&ups) {
                sig[i] = up.value;
                out.changed += up.changed as usize;
                out.improvement += up.improvement;
            }
            out.index_updates += color.len();
            cur = cur.with_sigmas(sig)?;
        }
    } else {
        for &i in indices {
            let up = best_for_index(&cur, i, cfg, obj, stage);
            if up.changed {
                cur = cur.with_value(i, up.value)?;
            }
            out.changed += up.changed as usize;
            out.improvement += up.improvement;
            out.index_updates += 1;
        }
    }
    Ok((cur, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// A full sweep left every index unchanged.
    Converged,
    MaxSweeps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    /// 0 is the starting schedule.
    pub sweep: usize,
    pub klub_total: f64,
    pub klub_std_error: f64,
    pub monitor: Option<f64>,
    pub changed: usize,
    pub improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub steps: usize,
    pub sweeps: Vec<SweepRecord>,
    pub stop_reason: StopReason,
    pub index_updates: usize,
    /// Sweep whose schedule was returned.
    pub selected_sweep: usize,
    pub monitor_name: Option<String>,
    pub final_sigmas: Vec<f64>,
}

/// Runs sweeps over `indices` until no index moves or the budget is spent.
/// With a monitor, evaluates it at the start, every `monitor_every` sweeps and
/// at the end, and returns the schedule with the lowest monitor value (the
/// earliest one on ties).
pub fn optimize_stage(
    s0: &Schedule,
    indices: &[usize],
    max_sweeps: usize,
    cfg: &OptimizerConfig,
    obj: &dyn KlubObjective,
    monitor: Option<&dyn Monitor>,
    stage: usize,
) -> Result<(Schedule, StageReport)> {
    cfg.validate()?;
    let mut cur = s0.clone();
    let (total, se) = obj.total(&cur, stage);
    let mut records = vec![SweepRecord {
        sweep: 0,
        klub_total: total,
        klub_std_error: se,
        monitor: monitor.map(|m| m.evaluate(&cur)).transpose()?,
        changed: 0,
        improvement: 0.0,
    }];
    let mut best = (cur.clone(), records[0].monitor, 0usize);
    let mut stop = StopReason::MaxSweeps;
    let mut updates = 0;
    for k in 1..=max_sweeps {
        let (next, outcome) = sweep(&cur, indices, cfg, obj, stage)?;
        updates += outcome.index_updates;
        cur = next;
        let done = outcome.changed == 0;
        let last = done || k == max_sweeps;
        let (total, se) = obj.total(&cur, stage);
        let mon = match monitor {
            Some(m) if k % cfg.monitor_every == 0 || last => Some(m.evaluate(&cur)?),
            _ => None,
        };
        if let (Some(v), Some(b)) = (mon, best.1) {
            if v < b {
                best = (cur.clone(), Some(v), k);
            }
        }
        records.push(SweepRecord {
            sweep: k,
            klub_total: total,
            klub_std_error: se,
            monitor: mon,
            changed: outcome.changed,
            improvement: outcome.improvement,
        });
        if done {
            stop = StopReason::Converged;
            break;
        }
    }
    let (chosen, selected) = match monitor {
        Some(_) => (best.0, best.2),
        None => (cur, records.len() - 1),
    };
    let report = StageReport {
        stage,
        steps: chosen.steps(),
        sweeps: records,
        stop_reason: stop,
        index_updates: updates,
        selected_sweep: selected,
        monitor_name: monitor.map(|m| m.name().to_string()),
        final_sigmas: chosen.sigmas().to_vec(),
    };
    Ok((chosen, report))
}

/// Optimizes every interior point of `s0`, keeping the best schedule by `monitor`.
pub fn optimize_with_early_stop(
    s0: &Schedule,
    cfg: &OptimizerConfig,
    obj: &dyn KlubObjective,
    monitor: &dyn Monitor,
) -> Result<(Schedule, StageReport)> {
    let all: Vec<usize> = (1..s0.steps()).collect();
    optimize_stage(s0, &all, cfg.stage1_max_sweeps, cfg, obj, Some(monitor), 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub config: OptimizerConfig,
    pub stages: Vec<StageReport>,
    pub index_updates: usize,
    pub denoiser_evaluations: u64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalResult {
    /// Stage outputs, each with twice the steps of the previous one.
    pub stages: Vec<Schedule>,
    pub report: OptimizationReport,
}

impl HierarchicalResult {
    pub fn stage_for(&self, steps: usize) -> Option<&Schedule> {
        self.stages.iter().find(|s| s.steps() == steps)
    }

    pub fn finest(&self) -> &Schedule {
        self.stages.last().expect("at least one stage")
    }
}

/// Stage 1 optimizes all interior points of `init` (with early stopping when a
/// monitor is given); each later stage subdivides and optimizes only the
/// inserted odd-index points.
pub fn hierarchical_optimize(
    init: &Schedule,
    refinements: usize,
    cfg: &OptimizerConfig,
    obj: &dyn KlubObjective,
    monitor: Option<&dyn Monitor>,
) -> Result<HierarchicalResult> {
    cfg.validate()?;
    let clock = Instant::now();
    let all: Vec<usize> = (1..init.steps()).collect();
    let (s1, r1) = optimize_stage(init, &all, cfg.stage1_max_sweeps, cfg, obj, monitor, 1)?;
    let name = init.name().map(|n| format!("ays-{n}")).unwrap_or_else(|| "ays".into());
    let mut stages = vec![s1.named(format!("{name}-{}", init.steps()))];
    let mut reports = vec![r1];
    for r in 0..refinements {
        let fine = stages[r].subdivide();
        let odd: Vec<usize> = (1..fine.steps()).step_by(2).collect();
        let (s, rep) = optimize_stage(&fine, &odd, cfg.refine_max_sweeps, cfg, obj, None, r + 2)?;
        stages.push(s.named(format!("{name}-{}", fine.steps())));
        reports.push(rep);
    }
    let report = OptimizationReport {
        config: cfg.clone(),
        index_updates: reports.iter().map(|r| r.index_updates).sum(),
        stages: reports,
        denoiser_evaluations: obj.evaluations(),
        wall_clock_secs: clock.elapsed().as_secs_f64(),
    };
    Ok(HierarchicalResult { stages, report })
}

/// Builds the pooled Monte-Carlo objective for `model`'s ideal denoiser and runs
/// the hierarchical optimization (10, 20, 40 steps for a 10-step init and two
/// refinements).
pub fn optimize_model(
    model: &DataModel,
    init: &Schedule,
    refinements: usize,
    cfg: &OptimizerConfig,
    monitor: Option<&dyn Monitor>,
) -> Result<HierarchicalResult> {
    cfg.validate()?;
    let pool = DataPool::new(model, cfg.pool_size, cfg.seed)?;
    let est = KlubEstimator::new(model, DataSource::Pool(&pool), cfg.n_mc)?;
    let obj = MonteCarloObjective::new(est, cfg.seed);
    hierarchical_optimize(init, refinements, cfg, &obj, monitor)
}

/// Stage output when one has exactly `m` steps, otherwise log-linear
/// interpolation of the finest stage.
pub fn schedule_for_steps(results: &HierarchicalResult, m: usize) -> Result<Schedule> {
    stage_or_interpolate(&results.stages, m)
}

/// [`schedule_for_steps`] over a plain list of stage schedules, finest last.
pub fn stage_or_interpolate(stages: &[Schedule], m: usize) -> Result<Schedule> {
    if m == 0 {
        return Err(Error::param("steps", "must be at least 1"));
    }
    if let Some(s) = stages.iter().find(|s| s.steps() == m) {
        return Ok(s.clone());
    }
    let fine = stages.last().ok_or(Error::Empty("stages"))?;
    let base = fine.name().unwrap_or("ays").to_string();
    Ok(fine.interpolate(m)?.named(format!("{base}-interp{m}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::FnDenoiser;
    use crate::gaussian::{gaussian_klub_optimal_schedule, klub_stationary_point, IsoGaussian};
    use crate::schedule::{heuristic_schedule, HeuristicKind, NoiseSpec};

    fn edm(n: usize) -> Schedule {
        heuristic_schedule(HeuristicKind::Edm { rho: 7.0 }, n, &NoiseSpec::default()).unwrap()
    }

    fn exact() -> GaussianClosedForm {
        GaussianClosedForm { c: 1.0, d: 1 }
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        for bad in [
            OptimizerConfig { n_candidates: 10, ..Default::default() },
            OptimizerConfig { n_candidates: 1, ..Default::default() },
            OptimizerConfig { span: 1.0, ..Default::default() },
            OptimizerConfig { span: 0.0, ..Default::default() },
            OptimizerConfig { monitor_every: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn candidates_stay_inside_neighbors() {
        let c = candidates(0.5, 2.0, 10.0, 11, 0.9);
        assert_eq!(c.len(), 11);
        assert_eq!(*c.last().unwrap(), 2.0);
        assert!(c.iter().all(|&v| v > 0.5 && v < 10.0));
        assert!(c.windows(2).take(9).all(|w| w[0] < w[1]));
    }

    #[test]
    fn index_range_is_checked() {
        let s = edm(4);
        let cfg = OptimizerConfig::default();
        assert!(optimize_index(&s, 0, &cfg, &exact(), 1).is_err());
        assert!(optimize_index(&s, 4, &cfg, &exact(), 1).is_err());
        assert!(optimize_index(&s, 2, &cfg, &exact(), 1).is_ok());
    }

    #[test]
    fn ties_keep_current_value() {
        let constant = FnDenoiser::new(1, |_x: &[f64], _s, out: &mut [f64]| out[0] = 0.25);
        let model = DataModel::Gaussian(IsoGaussian::new(1.0, 1).unwrap());
        let est = KlubEstimator::new(&constant, DataSource::Model(&model), 64).unwrap();
        let obj = MonteCarloObjective::new(est, 0);
        let s = edm(5);
        let (next, up) = optimize_index(&s, 2, &OptimizerConfig::default(), &obj, 1).unwrap();
        assert!(!up.changed);
        assert_eq!(next, s);
        assert_eq!(obj.evaluations(), 11 * 2 * 64);
    }

    #[test]
    fn two_step_converges_to_klub_optimum() {
        let s = edm(2);
        let cfg = OptimizerConfig { parallel: false, ..Default::default() };
        let (out, rep) = optimize_stage(&s, &[1], 20, &cfg, &exact(), None, 1).unwrap();
        assert_eq!(rep.stop_reason, StopReason::Converged);
        let target = 0.044764351238872346;
        let t = out.sigmas()[1];
        assert!((t / target).ln().abs() <= cfg.cell_width(0.002, 80.0));
    }

    #[test]
    fn closed_form_total_decreases_each_changing_sweep() {
        let cfg = OptimizerConfig::default();
        let mut s = edm(10);
        let indices: Vec<usize> = (1..10).collect();
        let mut prev = exact().total(&s, 1).0;
        for _ in 0..30 {
            let (next, out) = sweep(&s, &indices, &cfg, &exact(), 1).unwrap();
            let tot = exact().total(&next, 1).0;
            if out.changed == 0 {
                assert_eq!(tot, prev);
                break;
            }
            assert!(tot < prev);
            prev = tot;
            s = next;
        }
    }

    #[test]
    fn fixed_point_is_stationary_within_a_cell() {
        for parallel in [false, true] {
            let cfg = OptimizerConfig { parallel, ..Default::default() };
            let all: Vec<usize> = (1..10).collect();
            let (s, rep) = optimize_stage(&edm(10), &all, 30, &cfg, &exact(), None, 1).unwrap();
            assert_eq!(rep.stop_reason, StopReason::Converged);
            assert!(rep.index_updates < 300);
            let sig = s.sigmas();
            for i in 1..10 {
                let target = klub_stationary_point(sig[i + 1], sig[i - 1], 1.0);
                assert!((sig[i] / target).ln().abs() <= cfg.cell_width(sig[i + 1], sig[i - 1]));
            }
            let opt = gaussian_klub_optimal_schedule(10, &NoiseSpec::default(), 1.0).unwrap();
            let gap = exact().total(&s, 1).0 / exact().total(&opt, 1).0 - 1.0;
            assert!((0.0..0.1).contains(&gap), "gap {gap}");
        }
    }

    #[test]
    fn early_stop_returns_best_monitor() {
        let cfg = OptimizerConfig::default();
        let kl = EulerKlMonitor { c: 1.0, d: 1 };
        let (s, rep) = optimize_with_early_stop(&edm(10), &cfg, &exact(), &kl).unwrap();
        let best = rep.sweeps.iter().filter_map(|r| r.monitor).fold(f64::INFINITY, f64::min);
        assert_eq!(kl.evaluate(&s).unwrap(), best);
        let monitored = rep.sweeps.iter().filter(|r| r.monitor.is_some()).count();
        assert_eq!(monitored, rep.sweeps.len());

        // Monotone monitor: the last schedule wins.
        let neg_total = FnMonitor {
            name: "klub".into(),
            f: |s: &Schedule| Ok(exact().total(s, 1).0),
        };
        let (s, rep) = optimize_with_early_stop(&edm(10), &cfg, &exact(), &neg_total).unwrap();
        let last = rep.sweeps.last().unwrap().monitor.unwrap();
        assert_eq!(rep.sweeps[rep.selected_sweep].monitor, Some(last));
        assert_eq!(neg_total.evaluate(&s).unwrap(), last);
    }

    #[test]
    fn sparse_monitor_compares_first_and_last() {
        let cfg = OptimizerConfig { monitor_every: 1000, ..Default::default() };
        let kl = EulerKlMonitor { c: 1.0, d: 1 };
        let (_, rep) = optimize_with_early_stop(&edm(10), &cfg, &exact(), &kl).unwrap();
        let evaluated: Vec<usize> = rep.sweeps.iter().filter(|r| r.monitor.is_some()).map(|r| r.sweep).collect();
        assert_eq!(evaluated, vec![0, rep.sweeps.len() - 1]);
    }

    #[test]
    fn hierarchical_freezes_even_indices() {
        let cfg = OptimizerConfig::default();
        let res = hierarchical_optimize(&edm(10), 2, &cfg, &exact(), None).unwrap();
        assert_eq!(res.stages.iter().map(|s| s.steps()).collect::<Vec<_>>(), vec![10, 20, 40]);
        for w in res.stages.windows(2) {
            for (k, v) in w[0].sigmas().iter().enumerate() {
                assert_eq!(w[1].sigmas()[2 * k], *v);
            }
        }
        assert_eq!(schedule_for_steps(&res, 40).unwrap(), res.stages[2]);
        assert_eq!(schedule_for_steps(&res, 20).unwrap(), res.stages[1]);
        let s15 = schedule_for_steps(&res, 15).unwrap();
        assert_eq!(s15.steps(), 15);
        assert_eq!(s15.sigma_max(), 80.0);
        assert_eq!(s15.sigma_min(), 0.002);
        assert!(schedule_for_steps(&res, 0).is_err());
        let json = serde_json::to_string(&res.report).unwrap();
        assert!(json.contains("stop_reason"));
    }

    #[test]
    fn monte_carlo_objective_is_deterministic() {
        let model = DataModel::Gaussian(IsoGaussian::new(1.0, 2).unwrap());
        let cfg = OptimizerConfig {
            n_mc: 256,
            pool_size: 512,
            stage1_max_sweeps: 3,
            refine_max_sweeps: 1,
            seed: 11,
            ..Default::default()
        };
        let a = optimize_model(&model, &edm(10), 2, &cfg, None).unwrap();
        let b = optimize_model(&model, &edm(10), 2, &cfg, None).unwrap();
        assert_eq!(a.stages, b.stages);
        assert!(a.report.denoiser_evaluations > 0);
        for st in &a.report.stages {
            assert!(st.sweeps.iter().all(|r| r.improvement >= 0.0));
        }
    }
}
