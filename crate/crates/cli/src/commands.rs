//! The four subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use pglab_core::hard::{build_variant, layout_csv, HardInstance, StateClass};
use pglab_core::mdp_text;
use pglab_core::numeric::{fmt17, ls_slope};
use pglab_core::random::random_policy;
use pglab_core::verify::{self, CheckReport, ScalingPoint};
use pglab_core::{run, Instance, PgConfig, Policy, RunResult};

use crate::output;
use crate::spec::{ExperimentSpec, Source};

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn build_hard(spec: &ExperimentSpec) -> Result<Option<HardInstance>> {
    match spec.hard_params() {
        Some(params) => Ok(Some(build_variant(&params, spec.variant)?)),
        None => Ok(None),
    }
}

/// The instance a run executes on: collapsed when requested.
fn execution_instance(spec: &ExperimentSpec, hard: Option<&HardInstance>) -> Result<Instance> {
    match (&spec.source, hard) {
        (_, Some(h)) if spec.collapse => Ok(h.collapsed()?),
        (_, Some(h)) => Ok(h.full()),
        (Source::File(path), None) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(Instance::generic(mdp_text::from_text(&text)?))
        }
        (Source::Hard { .. }, None) => unreachable!("hard source always builds"),
    }
}

pub fn cmd_build(spec: &ExperimentSpec, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let hard = build_hard(spec)?;
    let inst = execution_instance(spec, hard.as_ref())?;
    write(&out.join("mdp.txt"), &mdp_text::to_text(&inst.mdp))?;
    if let Some(h) = &hard {
        write(&out.join("layout.csv"), &layout_csv(h))?;
        if spec.collapse {
            let info = inst.hard.as_ref().expect("hard instance");
            let mut w = csv::Writer::from_writer(output::create(&out.join("classes.csv"))?);
            w.write_record(["state_id", "class", "multiplicity"])?;
            for (s, class) in info.labels.iter().enumerate() {
                w.write_record([s.to_string(), class.to_string(), inst.multiplicity[s].to_string()])?;
            }
            w.flush()?;
        }
    }
    write(&out.join("params.txt"), &spec.to_text())?;
    eprintln!(
        "built {} execution states into {}",
        inst.mdp.num_states(),
        out.display()
    );
    Ok(())
}

fn monitored_states(spec: &ExperimentSpec, inst: &Instance) -> Result<Option<Vec<usize>>> {
    if spec.monitor.is_empty() {
        return Ok(None);
    }
    let info = inst
        .hard
        .as_ref()
        .ok_or_else(|| anyhow!("monitor labels need a hard instance"))?;
    spec.monitor
        .iter()
        .map(|label| {
            let class: StateClass = label.parse().map_err(|e| anyhow!("monitor: {e}"))?;
            info.labels
                .iter()
                .position(|&c| c == class)
                .ok_or_else(|| anyhow!("monitor: no state of class {label}"))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

pub fn config(spec: &ExperimentSpec, inst: &Instance) -> Result<PgConfig> {
    let mut cfg = PgConfig::new(spec.resolved_eta(inst.mdp.gamma()), spec.max_iter);
    cfg.stop_sup_error = spec.stop_sup_error;
    cfg.stop_mean_error = spec.stop_mean_error;
    cfg.stop_when_crossed = spec.stop_when_crossed;
    cfg.eval_tol = spec.eval_tol;
    cfg.enforce_paper_regime = spec.enforce_paper_regime;
    cfg.monitor_states = monitored_states(spec, inst)?;
    Ok(cfg)
}

fn execute(spec: &ExperimentSpec, out: &Path) -> Result<RunResult> {
    ensure_dir(out)?;
    let hard = build_hard(spec)?;
    let inst = execution_instance(spec, hard.as_ref())?;
    let cfg = config(spec, &inst)?;
    let res = run(&inst, &cfg, spec.algo)?;
    write(&out.join("params.txt"), &spec.to_text())?;
    output::write_trace_jsonl(&out.join("trace.jsonl"), &res)?;
    output::write_trace_csv(&out.join("trace.csv"), &res)?;
    output::write_crossings_csv(&out.join("crossings.csv"), &res)?;
    output::write_json(&out.join("summary.json"), &res)?;
    Ok(res)
}

pub fn cmd_run(spec: &ExperimentSpec, out: &Path) -> Result<()> {
    let res = execute(spec, out)?;
    eprintln!(
        "{} stopped ({}) after {} iterations: sup error {}, mean error {}",
        res.algorithm, res.stop_reason, res.iterations, res.final_sup_error, res.final_mean_error
    );
    Ok(())
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    seed: u64,
    checks: &'a [CheckReport],
}

/// Runs every applicable check; returns whether any failed.
pub fn cmd_verify(spec: &ExperimentSpec, run_dir: Option<&Path>, out: &Path, policies: usize) -> Result<bool> {
    ensure_dir(out)?;
    let recorded = run_dir.map(output::load_run).transpose()?;
    let hard = build_hard(spec)?;
    let mut reports = Vec::new();
    if let Some(h) = &hard {
        let gamma = h.params.gamma;
        reports.push(verify::check_optimal_values(&h.mdp, &h.layout, gamma));
        let inst = execution_instance(spec, Some(h))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut sample: Vec<Policy> = vec![Policy::uniform(&inst.mdp)];
        sample.extend((0..policies).map(|i| random_policy(&mut rng, &inst.mdp, [0.5, 2.0, 6.0][i % 3])));
        reports.extend(verify::check_visitation_bounds(&inst, &sample, recorded.as_ref())?);
        let per_policy = sample
            .iter()
            .map(|pi| verify::check_q_structure(&inst, pi))
            .collect::<pglab_core::Result<Vec<_>>>()?;
        reports.extend(verify::combine(per_policy));
    } else if let Some(run) = &recorded {
        reports.push(verify::check_visitation_upper(run));
    }
    if let Some(run) = &recorded {
        reports.extend(verify::check_run_invariants(run));
        reports.push(verify::check_blowup(run));
    }
    if reports.is_empty() {
        bail!("nothing to verify: give a hard-instance spec or a run directory");
    }
    output::write_json(
        &out.join("report.json"),
        &VerifyReport {
            seed: spec.seed,
            checks: &reports,
        },
    )?;
    let table = verify::reports_table(&reports);
    write(&out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(verify::any_failed(&reports))
}

struct Point {
    spec: ExperimentSpec,
    size: Option<usize>,
    gamma: Option<f64>,
    dir: PathBuf,
}

fn sweep_points(spec: &ExperimentSpec, out: &Path) -> Result<Vec<Point>> {
    if !spec.has_sweep() {
        bail!("sweep needs at least one non-empty axis (sweep_sizes, sweep_gammas or sweep_etas)");
    }
    fn axis<T: Copy>(xs: &[T]) -> Vec<Option<T>> {
        if xs.is_empty() {
            vec![None]
        } else {
            xs.iter().copied().map(Some).collect()
        }
    }
    let mut points = Vec::new();
    for size in axis(&spec.sweep_sizes) {
        for gamma in axis(&spec.sweep_gammas) {
            for eta in axis(&spec.sweep_etas) {
                let point = spec.at_point(size, gamma, eta)?;
                let dir = out.join(format!("point_{:03}", points.len()));
                points.push(Point {
                    spec: point,
                    size,
                    gamma,
                    dir,
                });
            }
        }
    }
    Ok(points)
}

fn aggregate(points: &[Point], results: &[Result<RunResult, String>], out: &Path) -> Result<Vec<CheckReport>> {
    let h_max = results
        .iter()
        .filter_map(|r| r.as_ref().ok())
        .filter_map(|r| r.hard.as_ref().map(|h| h.h))
        .max()
        .unwrap_or(0);
    let scaling: Vec<Option<ScalingPoint>> = results
        .iter()
        .map(|r| r.as_ref().ok().map(ScalingPoint::from_run))
        .collect();

    // Slope of log t against log |S| within each (gamma, eta) group.
    let slope_of = |i: usize, pick: fn(&ScalingPoint) -> Option<u64>| -> Option<f64> {
        let me = scaling[i].as_ref()?;
        let group: Vec<&ScalingPoint> = scaling
            .iter()
            .flatten()
            .filter(|p| p.gamma == me.gamma && p.eta == me.eta)
            .collect();
        if group.len() < 3 {
            return None;
        }
        let xs: Vec<f64> = group.iter().map(|p| (p.size as f64).ln()).collect();
        let ys: Vec<f64> = group
            .iter()
            .map(|p| pick(p).map(|t| (t.max(1) as f64).ln()))
            .collect::<Option<_>>()?;
        ls_slope(&xs, &ys)
    };

    let mut w = csv::Writer::from_writer(output::create(&out.join("aggregate.csv"))?);
    let mut header: Vec<String> = [
        "point",
        "size",
        "gamma",
        "eta",
        "status",
        "stop_reason",
        "iterations",
        "final_sup_err",
    ]
    .map(String::from)
    .to_vec();
    header.extend((1..=h_max).map(|s| format!("t_{s}")));
    header.extend(["t1_size_slope", "t2_size_slope"].map(String::from));
    w.write_record(&header)?;
    for (i, (p, res)) in points.iter().zip(results).enumerate() {
        let gamma = p.gamma.or(p.spec.gamma());
        let mut row = vec![
            i.to_string(),
            p.size
                .or(p.spec.hard_params().map(|h| h.target_size))
                .map(|s| s.to_string())
                .unwrap_or_default(),
            gamma.map(fmt17).unwrap_or_default(),
            gamma.map(|g| fmt17(p.spec.resolved_eta(g))).unwrap_or_default(),
        ];
        match res {
            Ok(r) => {
                row.extend([
                    "ok".to_string(),
                    r.stop_reason.to_string(),
                    r.iterations.to_string(),
                    fmt17(r.final_sup_error),
                ]);
                row.extend((1..=h_max).map(|s| r.crossings.t_chain(s).map(|t| t.to_string()).unwrap_or_default()));
            }
            Err(e) => {
                row.extend([format!("failed: {e}"), String::new(), String::new(), String::new()]);
                row.extend((1..=h_max).map(|_| String::new()));
            }
        }
        row.push(slope_of(i, |p| p.t1).map(fmt17).unwrap_or_default());
        row.push(slope_of(i, |p| p.t2).map(fmt17).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;

    // Scaling checks for every group that qualifies.
    let mut reports = Vec::new();
    let ok: Vec<&ScalingPoint> = scaling.iter().flatten().collect();
    let mut seen = Vec::new();
    for p in &ok {
        let key = (p.gamma.to_bits(), p.eta.to_bits());
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        let group: Vec<ScalingPoint> = ok
            .iter()
            .filter(|q| q.gamma == p.gamma && q.eta == p.eta)
            .map(|q| (*q).clone())
            .collect();
        if let Ok(mut r) = verify::check_scaling_t1(&group) {
            r.notes.push(format!("gamma = {}, eta = {}", p.gamma, p.eta));
            reports.push(r);
        }
    }
    let mut seen = Vec::new();
    for p in &ok {
        let key = (p.size, p.gamma.to_bits());
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        let group: Vec<ScalingPoint> = ok
            .iter()
            .filter(|q| q.size == p.size && q.gamma == p.gamma)
            .map(|q| (*q).clone())
            .collect();
        if let Ok(mut r) = verify::check_stepsize_scaling(&group) {
            r.notes.push(format!("|S| = {}, gamma = {}", p.size, p.gamma));
            reports.push(r);
        }
    }
    Ok(reports)
}

pub fn cmd_sweep(spec: &ExperimentSpec, out: &Path, jobs: usize) -> Result<()> {
    ensure_dir(out)?;
    let points = sweep_points(spec, out)?;
    write(&out.join("params.txt"), &spec.to_text())?;
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, points.len()) {
            let tx = tx.clone();
            let (next, points) = (&next, &points);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(p) = points.get(i) else { break };
                let res = execute(&p.spec, &p.dir).map_err(|e| format!("{e:#}"));
                match &res {
                    Ok(r) => eprintln!("point {i}: {} after {} iterations", r.stop_reason, r.iterations),
                    Err(e) => eprintln!("point {i}: failed: {e}"),
                }
                let _ = tx.send((i, res));
            });
        }
    });
    drop(tx);
    let mut results: Vec<Option<Result<RunResult, String>>> = points.iter().map(|_| None).collect();
    for (i, r) in rx {
        results[i] = Some(r);
    }
    let results: Vec<Result<RunResult, String>> = results
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err("worker exited early".into())))
        .collect();
    let reports = aggregate(&points, &results, out)?;
    if !reports.is_empty() {
        write(&out.join("scaling.txt"), &verify::reports_table(&reports))?;
        output::write_json(&out.join("scaling.json"), &reports)?;
        print!("{}", verify::reports_table(&reports));
    }
    let failed = results.iter().filter(|r| r.is_err()).count();
    eprintln!(
        "{} points, {failed} failed; aggregate in {}",
        points.len(),
        out.join("aggregate.csv").display()
    );
    Ok(())
}
