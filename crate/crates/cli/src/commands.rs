use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ays_core::gaussian::{euler_output_variance, gaussian_euler_kl, gaussian_klub_optimal_schedule, gaussian_optimal_schedule};
use ays_core::klub::{DataSource, KlubEstimator};
use ays_core::optimizer::{optimize_model, stage_or_interpolate, EulerKlMonitor, Monitor, NllMonitor, OptimizerConfig};
use ays_core::rng::{derive_seed, domain, StreamKey};
use ays_core::schedule::{heuristic_schedule, HeuristicKind, NoiseSpec, QuadraticSpacing, Schedule};
use ays_core::solvers::{run_sampler, Prior, SamplerOptions, SolverKind};
use ays_core::toy_models::{DataModel, ModelConfig};
use serde::Serialize;
use serde_json::json;

use crate::output::{
    histogram_2d, histogram_csv, manifest_for, samples_from_bin, samples_from_csv, samples_to_bin, samples_to_csv, Run,
};
use crate::{usage, CompareArgs, EvalArgs, Metric, OptimizeArgs, PriorKind, SampleArgs, SampleFormat, ScheduleArgs, ScheduleKind, Spacing};

pub const HIST_BINS: usize = 50;

fn noise_spec(lo: f64, hi: f64) -> Result<NoiseSpec> {
    Ok(NoiseSpec::new(lo, hi)?)
}

fn load_model(run: &mut Run, path: &Path) -> Result<(ModelConfig, DataModel)> {
    let text = run.read_input_string(path)?;
    let cfg = ModelConfig::from_json(&text).with_context(|| format!("parsing model config {}", path.display()))?;
    let model = cfg.build().with_context(|| format!("building model from {}", path.display()))?;
    Ok((cfg, model))
}

fn load_schedule(run: &mut Run, path: &Path) -> Result<Schedule> {
    let text = run.read_input_string(path)?;
    Schedule::from_json(&text).with_context(|| format!("parsing schedule {}", path.display()))
}

fn schedule_json(s: &Schedule) -> String {
    let mut text = s.to_json();
    if !text.ends_with('\n') {
        text.push('\n');
    }
    text
}

pub fn schedule(a: ScheduleArgs) -> Result<()> {
    let spec = noise_spec(a.noise.sigma_min, a.noise.sigma_max)?;
    let n = a.steps as usize;
    let need_c = || a.c.ok_or_else(|| usage("--c is required for the Gaussian-optimal kinds"));
    let s = match a.kind {
        ScheduleKind::Edm => heuristic_schedule(HeuristicKind::Edm { rho: a.rho }, n, &spec)?,
        ScheduleKind::Logsnr => heuristic_schedule(HeuristicKind::LogSnr, n, &spec)?,
        ScheduleKind::TimeUniform => heuristic_schedule(HeuristicKind::TimeUniform, n, &spec)?,
        ScheduleKind::TimeQuadratic => {
            let sp = match a.spacing {
                Spacing::Index => QuadraticSpacing::Index,
                Spacing::Time => QuadraticSpacing::Time,
            };
            heuristic_schedule(HeuristicKind::TimeQuadratic(sp), n, &spec)?
        }
        ScheduleKind::GaussianOptimal => gaussian_optimal_schedule(n, &spec, need_c()?)?,
        ScheduleKind::GaussianKlubOptimal => gaussian_klub_optimal_schedule(n, &spec, need_c()?)?,
    };
    let mut run = Run::new("schedule", None, &a)?;
    run.write(&a.out, schedule_json(&s).as_bytes())?;
    run.finish(&manifest_for(&a.out))?;
    println!("wrote {} ({} steps)", a.out.display(), s.steps());
    Ok(())
}

fn stage_path(dir: &Path, steps: usize) -> PathBuf {
    dir.join(format!("schedule-{steps}.json"))
}

pub fn optimize(a: OptimizeArgs) -> Result<()> {
    let mut run = Run::new("optimize", Some(a.seed), &a)?;
    let (model_cfg, model) = load_model(&mut run, &a.model)?;
    let mut cfg = match &a.config {
        Some(p) => {
            let text = run.read_input_string(p)?;
            serde_json::from_str::<OptimizerConfig>(&text).with_context(|| format!("parsing optimizer config {}", p.display()))?
        }
        None => OptimizerConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(v) = a.n_mc {
        cfg.n_mc = v;
    }
    if let Some(v) = a.pool_size {
        cfg.pool_size = v;
    }
    if let Some(v) = a.n_candidates {
        cfg.n_candidates = v;
    }
    if let Some(v) = a.span {
        cfg.span = v;
    }
    if let Some(v) = a.max_sweeps {
        cfg.stage1_max_sweeps = v;
    }
    if let Some(v) = a.refine_sweeps {
        cfg.refine_max_sweeps = v;
    }
    if let Some(v) = a.monitor_every {
        cfg.monitor_every = v;
    }
    if let Some(v) = a.monitor_samples {
        cfg.monitor_samples = v;
    }
    if a.serial {
        cfg.parallel = false;
    }
    cfg.validate()?;
    let spec = noise_spec(a.noise.sigma_min, a.noise.sigma_max)?;
    let init = heuristic_schedule(HeuristicKind::Edm { rho: a.init_rho }, a.steps as usize, &spec)?;

    let euler;
    let nll;
    let monitor: Option<&dyn Monitor> = match (&model, a.no_monitor) {
        (_, true) => None,
        (DataModel::Gaussian(g), false) => {
            euler = EulerKlMonitor { c: g.c, d: g.d };
            Some(&euler)
        }
        (DataModel::Mixture(_), false) => {
            nll = NllMonitor {
                model: &model,
                solver: a.monitor_solver,
                n_samples: cfg.monitor_samples,
                seed: derive_seed(cfg.seed, domain::MONITOR),
            };
            Some(&nll)
        }
    };

    let res = optimize_model(&model, &init, a.refinements, &cfg, monitor)?;
    for w in res.stages.windows(2) {
        let frozen = w[0].sigmas().iter().enumerate().all(|(k, v)| w[1].sigmas()[2 * k] == *v);
        if !frozen {
            bail!("stage with {} steps moved a frozen point", w[1].steps());
        }
    }
    for s in &res.stages {
        run.write(&stage_path(&a.out_dir, s.steps()), schedule_json(s).as_bytes())?;
    }
    run.write_json(&a.out_dir.join("report.json"), &res.report)?;
    run.config = json!({ "args": &a, "model": model_cfg, "optimizer": cfg });
    run.finish(&a.out_dir.join("manifest.json"))?;
    for st in &res.report.stages {
        let last = st.sweeps.last().expect("stage records its start");
        println!(
            "stage {} ({} steps): {} sweeps, {:?}, KLUB {:.6} ± {:.6}",
            st.stage,
            st.steps,
            st.sweeps.len() - 1,
            st.stop_reason,
            last.klub_total,
            last.klub_std_error
        );
    }
    println!("wrote {}", a.out_dir.display());
    Ok(())
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let mut run = Run::new("sample", Some(a.seed), &a)?;
    let (_, model) = load_model(&mut run, &a.model)?;
    let sched = load_schedule(&mut run, &a.schedule)?;
    let gaussian_c = match &model {
        DataModel::Gaussian(g) => Some(g.c),
        _ => None,
    };
    if a.check_variance && (gaussian_c.is_none() || a.solver != SolverKind::Ddim) {
        return Err(usage("--check-variance needs a Gaussian model and the ddim solver"));
    }
    let prior = match a.prior {
        PriorKind::Isotropic => Prior::Isotropic,
        PriorKind::Marginal => Prior::Marginal(&model),
    };
    let out = run_sampler(
        &model,
        a.solver,
        &sched,
        a.n as usize,
        a.seed,
        SamplerOptions {
            prior,
            trace: a.trace.is_some(),
        },
    )?;
    let bytes = match a.format {
        SampleFormat::Csv => samples_to_csv(&out.samples, out.dim).into_bytes(),
        SampleFormat::Bin => samples_to_bin(&out.samples),
    };
    run.write(&a.out, &bytes)?;
    if let (Some(path), Some(rows)) = (&a.trace, &out.trace) {
        let mut text = String::from("step,sigma_from,sigma_to,mean_abs_x,mean_abs_d\n");
        for r in rows {
            writeln!(text, "{},{},{},{},{}", r.step, r.sigma_from, r.sigma_to, r.mean_abs_x, r.mean_abs_d)?;
        }
        run.write(path, text.as_bytes())?;
    }
    if a.check_variance {
        let c = gaussian_c.expect("checked above");
        let n = out.len() as f64;
        let mut empirical = 0.0;
        for k in 0..out.dim {
            let col = out.samples.iter().skip(k).step_by(out.dim);
            let mean = col.clone().sum::<f64>() / n;
            empirical += col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        }
        empirical /= out.dim as f64;
        let prior_var = match a.prior {
            PriorKind::Isotropic => sched.sigma_max().powi(2),
            PriorKind::Marginal => sched.sigma_max().powi(2) + c * c,
        };
        let predicted = euler_output_variance(&sched, c, prior_var);
        println!(
            "{}",
            json!({
                "empirical_variance": empirical,
                "predicted_variance": predicted,
                "relative_error": empirical / predicted - 1.0,
            })
        );
    }
    run.finish(&manifest_for(&a.out))?;
    println!("wrote {} ({} samples, {} NFE)", a.out.display(), out.len(), out.nfe);
    Ok(())
}

fn read_samples(run: &mut Run, path: &Path, dim: usize) -> Result<Vec<f64>> {
    let bytes = run.read_input(path)?;
    let samples = if path.extension().is_some_and(|e| e == "bin") {
        samples_from_bin(&bytes, dim)
    } else {
        samples_from_csv(std::str::from_utf8(&bytes).context("sample CSV is not UTF-8")?, dim)
    };
    samples.map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn label_of(s: &Schedule, path: &Path) -> String {
    s.name().map(str::to_string).unwrap_or_else(|| path.display().to_string())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut run = Run::new("eval", Some(a.seed), &a)?;
    let (_, model) = load_model(&mut run, &a.model)?;
    let report = match a.metric {
        Metric::Nll => {
            let path = a.samples.as_ref().ok_or_else(|| usage("--samples is required for nll"))?;
            let samples = read_samples(&mut run, path, model.dim())?;
            let e = model.nll_with_error(&samples)?;
            json!({ "metric": "nll", "samples": path.display().to_string(), "nll": e.nll, "std_error": e.std_error, "n": e.n })
        }
        Metric::GaussianEulerKl => {
            let DataModel::Gaussian(g) = &model else {
                return Err(usage("gaussian-euler-kl needs a Gaussian model"));
            };
            if a.schedule.is_empty() {
                return Err(usage("--schedule is required for gaussian-euler-kl"));
            }
            let mut rows = Vec::new();
            for p in &a.schedule {
                let s = load_schedule(&mut run, p)?;
                let kl = gaussian_euler_kl(&s, g.c, g.d);
                rows.push(json!({ "schedule": label_of(&s, p), "steps": s.steps(), "kl": kl.kl, "f": kl.f, "log_f": kl.log_f }));
            }
            json!({ "metric": "gaussian-euler-kl", "results": rows })
        }
        Metric::Klub => {
            if a.schedule.is_empty() {
                return Err(usage("--schedule is required for klub"));
            }
            let est = KlubEstimator::new(&model, DataSource::Model(&model), a.n_mc)?;
            let mut rows = Vec::new();
            for p in &a.schedule {
                let s = load_schedule(&mut run, p)?;
                let e = est.schedule_total(&s, StreamKey::new(a.seed, domain::KLUB));
                rows.push(json!({
                    "schedule": label_of(&s, p),
                    "steps": s.steps(),
                    "value": e.value,
                    "std_error": e.std_error,
                    "n_samples": e.n_samples,
                }));
            }
            json!({ "metric": "klub", "n_mc": a.n_mc, "results": rows })
        }
    };
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(out) = &a.out {
        run.write(out, format!("{text}\n").as_bytes())?;
        run.finish(&manifest_for(out))?;
    }
    Ok(())
}

enum ScheduleRef {
    Heuristic(HeuristicKind),
    File(Schedule),
    Stages(Vec<Schedule>),
}

fn parse_heuristic(name: &str) -> Option<Result<HeuristicKind>> {
    let kind = match name {
        "edm" => HeuristicKind::Edm { rho: 7.0 },
        "logsnr" => HeuristicKind::LogSnr,
        "time-uniform" => HeuristicKind::TimeUniform,
        "time-quadratic-index" => HeuristicKind::TimeQuadratic(QuadraticSpacing::Index),
        "time-quadratic-time" => HeuristicKind::TimeQuadratic(QuadraticSpacing::Time),
        other => {
            let rho = other.strip_prefix("edm:")?;
            return Some(
                rho.parse::<f64>()
                    .map(|rho| HeuristicKind::Edm { rho })
                    .map_err(|_| usage(format!("bad rho in `{other}`"))),
            );
        }
    };
    Some(Ok(kind))
}

fn resolve_ref(run: &mut Run, r: &str) -> Result<(String, ScheduleRef)> {
    if let Some(kind) = parse_heuristic(r) {
        let kind = kind?;
        return Ok((kind.label(), ScheduleRef::Heuristic(kind)));
    }
    let path = Path::new(r);
    if path.is_dir() {
        let mut stages = Vec::new();
        for entry in std::fs::read_dir(path)? {
            let p = entry?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if name.starts_with("schedule-") && name.ends_with(".json") {
                stages.push(load_schedule(run, &p)?);
            }
        }
        if stages.is_empty() {
            return Err(usage(format!("{r}: no schedule-*.json files")));
        }
        stages.sort_by_key(|s| s.steps());
        let label = path.file_name().and_then(|n| n.to_str()).unwrap_or("optimized").to_string();
        return Ok((label, ScheduleRef::Stages(stages)));
    }
    if path.is_file() {
        let s = load_schedule(run, path)?;
        let label = s
            .name()
            .map(str::to_string)
            .or_else(|| path.file_stem().and_then(|n| n.to_str()).map(str::to_string))
            .unwrap_or_else(|| r.to_string());
        return Ok((label, ScheduleRef::File(s)));
    }
    Err(usage(format!("`{r}` is neither a known schedule kind nor an existing file or directory")))
}

fn at_nfe(r: &ScheduleRef, nfe: usize, spec: &NoiseSpec) -> Result<Schedule> {
    Ok(match r {
        ScheduleRef::Heuristic(k) => heuristic_schedule(*k, nfe, spec)?,
        ScheduleRef::File(s) if s.steps() == nfe => s.clone(),
        ScheduleRef::File(s) => s.interpolate(nfe)?,
        ScheduleRef::Stages(st) => stage_or_interpolate(st, nfe)?,
    })
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

#[derive(Serialize)]
struct HistogramBox {
    lo: [f64; 2],
    hi: [f64; 2],
    bins: usize,
    rows: &'static str,
}

pub fn compare(a: CompareArgs) -> Result<()> {
    let mut run = Run::new("compare", Some(a.seed), &a)?;
    let (model_cfg, model) = load_model(&mut run, &a.model)?;
    let spec = noise_spec(a.noise.sigma_min, a.noise.sigma_max)?;
    let mut refs = Vec::new();
    for r in &a.schedules {
        refs.push(resolve_ref(&mut run, r)?);
    }
    if a.histograms && model.dim() < 2 {
        return Err(usage("--histograms needs a model with at least 2 dimensions"));
    }
    let hist_box = a.histograms.then(|| {
        let (mean, var) = (model.mean(), model.per_axis_variance());
        HistogramBox {
            lo: [mean[0] - 4.0 * var[0].sqrt(), mean[1] - 4.0 * var[1].sqrt()],
            hi: [mean[0] + 4.0 * var[0].sqrt(), mean[1] + 4.0 * var[1].sqrt()],
            bins: HIST_BINS,
            rows: "axis 1 (rows) by axis 0 (columns), row-major",
        }
    });

    let mut table = String::from("solver,schedule,nfe,nll,std_error,n\n");
    for solver in &a.solvers {
        for (label, r) in &refs {
            for &nfe in &a.nfe {
                let s = at_nfe(r, nfe as usize, &spec)?;
                let out = run_sampler(&model, *solver, &s, a.n as usize, a.seed, SamplerOptions::default())?;
                let e = model.nll_with_error(&out.samples)?;
                writeln!(table, "{solver},{label},{nfe},{},{},{}", e.nll, e.std_error, e.n)?;
                println!("{solver:>16} {label:>24} NFE {nfe:>3}: NLL {:.4} ± {:.4}", e.nll, e.std_error);
                if let Some(b) = &hist_box {
                    let counts = histogram_2d(&out.samples, out.dim, b.lo, b.hi, b.bins);
                    let name = format!("hist_{}_{}_nfe{nfe}.csv", file_safe(&solver.to_string()), file_safe(label));
                    run.write(&a.out_dir.join("hist").join(name), histogram_csv(&counts, b.bins).as_bytes())?;
                }
            }
        }
    }
    run.write(&a.out_dir.join("nll.csv"), table.as_bytes())?;
    run.config = json!({ "args": &a, "model": model_cfg, "histogram_box": hist_box });
    run.finish(&a.out_dir.join("manifest.json"))?;
    println!("wrote {}", a.out_dir.display());
    Ok(())
}
