//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line to the
//! terminal (bypassing output capture) and asserts the same outcome.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pglab_core::hard::{StateClass, A0, A1};
use pglab_core::pg::{default_npg_eta, finite_difference_coordinate, pg_gradient, SnapshotPolicy};
use pglab_core::random::{random_logits, random_mdp, random_policy, RandomMdpConfig};
use pglab_core::verify::{
    check_blowup, check_run_invariants, check_scaling_t1, check_stepsize_scaling, check_visitation_lower,
    compare_optimal_values, CheckReport, ScalingPoint,
};
use pglab_core::*;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "[criterion {id:>2}] {} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn within(elapsed: Duration, limit_secs: f64) -> bool {
    elapsed.as_secs_f64() < limit_secs
}

fn find<'a>(reports: &'a [CheckReport], name: &str) -> &'a CheckReport {
    reports
        .iter()
        .find(|r| r.name == name)
        .unwrap_or_else(|| panic!("missing report {name}"))
}

fn summary(r: &CheckReport) -> String {
    let status = match (&r.status, &r.witness) {
        (pglab_core::verify::CheckStatus::Skipped(why), _) => format!("skipped ({why})"),
        (_, Some(w)) => format!("violated: {}", w.detail),
        _ => "ok".to_string(),
    };
    match r.margin {
        Some(m) => format!("{} {status}, margin {m:.3e}", r.name),
        None => format!("{} {status}", r.name),
    }
}

/// Desk instance for the closed-form and single-policy checks.
fn desk96() -> HardMdpParams {
    HardMdpParams::desk(0.96, 2000, 6)
}

/// Desk instance for the long-horizon dynamics at `gamma = 0.9`.
fn desk90(size: usize) -> HardMdpParams {
    let mut p = HardMdpParams::desk(0.9, size, 6);
    p.c_b1 = 0.2;
    p.c_b2 = 0.2;
    p.c_m = 0.4;
    p.c_p = 0.1;
    p
}

fn desk90_eta() -> f64 {
    0.1f64.powi(2) / 6.0
}

/// Long PG run shared by the crossing, blow-up, comparison and ordering criteria.
fn long_run() -> &'static RunResult {
    static RUN: OnceLock<RunResult> = OnceLock::new();
    RUN.get_or_init(|| {
        let inst = collapsed_instance(&desk90(1000), Variant::Base).unwrap();
        let mut cfg = PgConfig::new(desk90_eta(), 20_000_000).without_error_stops();
        cfg.stop_when_crossed = true;
        cfg.enforce_paper_regime = false;
        run(&inst, &cfg, Algorithm::Pg).unwrap()
    })
}

#[test]
fn c01_closed_form_optimal_values() {
    let start = Instant::now();
    let hard = build_hard_mdp(&desk96()).unwrap();
    let rep = compare_optimal_values(&hard.mdp, &hard.layout, 0.96);
    let elapsed = start.elapsed();
    let pass = rep.passed() && within(elapsed, 1.0);
    report(
        1,
        "closed-form optimal values",
        pass,
        &format!(
            "{} over {} states, {:.3}s",
            summary(&rep),
            hard.mdp.num_states(),
            elapsed.as_secs_f64()
        ),
    );
}

fn relative_error(g: f64, fd: f64) -> f64 {
    (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3)
}

#[test]
fn c02_gradient_matches_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut coords = 0usize;
    let mut check = |mdp: &TabularMdp, theta: &PolicyLogits, mu: &StateDist| {
        let g = pg_gradient(mdp, theta, mu, 1e-14).unwrap();
        for k in 0..g.len() {
            let fd = finite_difference_coordinate(mdp, theta, mu, 1e-6, k).unwrap();
            worst = worst.max(relative_error(g[k], fd));
            coords += 1;
        }
    };
    let cfg = RandomMdpConfig::default();
    for _ in 0..20 {
        let mdp = random_mdp(&mut rng, &cfg);
        let mu = StateDist::uniform(mdp.num_states());
        let theta = random_logits(&mut rng, &mdp, 2.0);
        check(&mdp, &theta, &mu);
    }
    let hard = build_hard_mdp(&desk90(1000)).unwrap();
    let mu = StateDist::uniform(hard.mdp.num_states());
    for _ in 0..5 {
        let theta = random_logits(&mut rng, &hard.mdp, 2.0);
        check(&hard.mdp, &theta, &mu);
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-5 && within(elapsed, 30.0);
    report(
        2,
        "gradient oracle",
        pass,
        &format!(
            "worst relative error {worst:.2e} over {coords} coordinates, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c03_ascent_nonnegativity_zero_sum() {
    let start = Instant::now();
    let p = desk96();
    let inst = collapsed_instance(&p, Variant::Base).unwrap();
    let eta = (1.0 - p.gamma).powi(2) / 10.0;
    let mut cfg = PgConfig::new(eta, 100_000).without_error_stops();
    cfg.snapshots = SnapshotPolicy {
        stride: 100,
        dense_until: 100_000,
        growth: 1.0,
    };
    let res = run(&inst, &cfg, Algorithm::Pg).unwrap();
    let reports = check_run_invariants(&res);
    let picked = ["monotone-improvement-v", "non-negativity", "zero-sum-logits"].map(|n| find(&reports, n));
    let elapsed = start.elapsed();
    let pass = res.iterations == 100_000 && picked.iter().all(|r| r.passed()) && within(elapsed, 120.0);
    let detail: Vec<String> = picked.iter().map(|r| summary(r)).collect();
    report(
        3,
        "ascent, non-negativity, zero-sum",
        pass,
        &format!(
            "{} iterations; {}; {:.1}s",
            res.iterations,
            detail.join("; "),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c04_buffer_identities() {
    let start = Instant::now();
    let p = desk96();
    let hard = build_hard_mdp(&p).unwrap();
    let inst = hard.full();
    let g2 = p.gamma * p.gamma;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let pi = random_policy(&mut rng, &inst.mdp, 3.0);
        let ev = policy_evaluation(&inst.mdp, &pi, &inst.uniform_mu(), 1e-14).unwrap();
        for (class, r) in [(StateClass::Buffer(1), g2), (StateClass::Buffer(2), g2 * g2)] {
            let block = hard.layout.block(class).unwrap();
            for s in block.start..block.start + block.len {
                let q1 = ev.q[inst.mdp.find_pair(s, A1).unwrap()];
                let q0 = ev.q[inst.mdp.find_pair(s, A0).unwrap()];
                worst = worst.max((q1 - r).abs()).max((q0 + r).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-12 && within(elapsed, 5.0);
    report(
        4,
        "buffer identities",
        pass,
        &format!(
            "max deviation {worst:.2e} over 50 policies, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c05_visitation_lower_bounds() {
    let start = Instant::now();
    let hard = build_hard_mdp(&desk96()).unwrap();
    let inst = hard.full();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let policies: Vec<Policy> = (0..100)
        .map(|i| {
            let scale = [0.5, 2.0, 6.0, 12.0][i % 4];
            random_policy(&mut rng, &inst.mdp, scale)
        })
        .collect();
    let rep = check_visitation_lower(&inst, &policies).unwrap();
    let elapsed = start.elapsed();
    let pass = rep.passed() && rep.margin.is_some_and(|m| m > 0.0) && within(elapsed, 30.0);
    report(
        5,
        "visitation lower bounds",
        pass,
        &format!("{} (relative), {:.1}s", summary(&rep), elapsed.as_secs_f64()),
    );
}

#[test]
fn c06_collapsed_matches_full() {
    let start = Instant::now();
    let p = desk90(1000);
    let full = build_hard_mdp(&p).unwrap().full();
    let zeros = PolicyLogits::zeros(&full.mdp);
    let lumped = collapse(&full, &zeros).unwrap();
    let mut cfg = PgConfig::new(desk90_eta(), 1000).without_error_stops();
    cfg.snapshots = SnapshotPolicy {
        stride: 1,
        dense_until: 1000,
        growth: 1.0,
    };
    let a = run(&full, &cfg, Algorithm::Pg).unwrap();
    let b = run(&lumped.instance, &cfg, Algorithm::Pg).unwrap();
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for ma in &a.monitored {
        let Some(mb) = b.monitored.iter().find(|m| m.class == ma.class) else {
            continue;
        };
        let sa = a.series(ma.state);
        let sb = b.series(mb.state);
        assert_eq!(sa.len(), sb.len());
        for ((ia, xa), (ib, xb)) in sa.iter().zip(&sb) {
            assert_eq!(ia, ib);
            worst = worst.max((xa.v - xb.v).abs());
            compared += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = compared == a.monitored.len() * 1001 && worst <= 1e-10 && within(elapsed, 60.0);
    report(
        6,
        "collapsed equals full",
        pass,
        &format!(
            "max V deviation {worst:.2e} over {compared} trace entries, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c07_crossing_structure() {
    let res = long_run();
    let reports = check_run_invariants(res);
    let picked = [
        "crossing-order",
        "adjoint-crossing-equivalence",
        "crossing-policy-floor",
    ]
    .map(|n| find(&reports, n));
    let pass = picked.iter().all(|r| r.passed());
    let times: Vec<String> = (1..=6)
        .map(|s| format!("t_{s}={:?}", res.crossings.t_chain(s)))
        .collect();
    let detail: Vec<String> = picked.iter().map(|r| summary(r)).collect();
    report(
        7,
        "crossing-time structure",
        pass,
        &format!("{}; {}", times.join(" "), detail.join("; ")),
    );
}

fn t1_run(size: usize, eta: f64) -> ScalingPoint {
    let inst = collapsed_instance(&desk90(size), Variant::Base).unwrap();
    let info = inst.hard.as_ref().unwrap();
    let mut cfg = PgConfig::new(eta, 50_000_000).without_error_stops();
    cfg.monitor_states = Some(vec![info.chain_state(1), info.chain_state(2)]);
    cfg.stop_when_crossed = true;
    cfg.snapshots = SnapshotPolicy {
        stride: 1,
        dense_until: 0,
        growth: 2.0,
    };
    ScalingPoint::from_run(&run(&inst, &cfg, Algorithm::Pg).unwrap())
}

#[test]
fn c08_t1_scaling() {
    let start = Instant::now();
    let eta = 0.1f64.powi(2) / 10.0;
    let jobs = [(1000, eta), (2000, eta), (4000, eta), (1000, eta / 2.0)];
    let points: Vec<ScalingPoint> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs.iter().map(|&(n, e)| scope.spawn(move || t1_run(n, e))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let size_rep = check_scaling_t1(&points[..3]).unwrap();
    let eta_rep = check_stepsize_scaling(&[points[0].clone(), points[3].clone()]).unwrap();
    let elapsed = start.elapsed();
    let pass = size_rep.passed() && eta_rep.passed() && within(elapsed, 600.0);
    let ts: Vec<String> = points
        .iter()
        .map(|p| format!("|S|={} eta={:.1e}: t_1={:?}", p.size, p.eta, p.t1))
        .collect();
    report(
        8,
        "t_1 scaling",
        pass,
        &format!(
            "{}; {} [{}]; {} [{}]; {:.1}s",
            ts.join(", "),
            summary(&size_rep),
            size_rep.notes.join(", "),
            summary(&eta_rep),
            eta_rep.notes.join(", "),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c09_blowup_signature() {
    let res = long_run();
    let rep = check_blowup(res);
    report(
        9,
        "blow-up signature",
        rep.passed(),
        &format!("{} [{}]", summary(&rep), rep.notes.join("; ")),
    );
}

#[test]
fn c10_pg_npg_gap() {
    let inst = collapsed_instance(&desk90(1000), Variant::Base).unwrap();
    let mut cfg = PgConfig::new(default_npg_eta(0.9), 1_000_000);
    cfg.stop_mean_error = None;
    let npg = run(&inst, &cfg, Algorithm::Npg).unwrap();
    let npg_hit = npg.stop_reason == StopReason::SupThreshold;
    let budget = 100 * npg.iterations.max(1);
    let mut cfg = PgConfig::new(desk90_eta(), budget);
    cfg.stop_mean_error = None;
    let pg = run(&inst, &cfg, Algorithm::Pg).unwrap();
    let pg_hit = pg.stop_reason == StopReason::SupThreshold;
    let long = long_run();
    let pass = npg_hit && !pg_hit;
    report(
        10,
        "PG vs NPG gap",
        pass,
        &format!(
            "NPG reached sup error {:.4} after {} iterations; PG after {budget} iterations has sup error {:.4}; PG needs {} iterations to cross t_4",
            npg.final_sup_error, npg.iterations, pg.final_sup_error, long.iterations
        ),
    );
}

#[test]
fn c11_initial_stage_ordering() {
    let res = long_run();
    let reports = check_run_invariants(res);
    let rep = find(&reports, "initial-stage-ordering");
    let primaries = res
        .monitored
        .iter()
        .filter(|m| matches!(m.class, Some(StateClass::Primary(_))))
        .count();
    let pass = rep.passed() && primaries > 0;
    report(
        11,
        "initial-stage logit ordering",
        pass,
        &format!("{} over {primaries} primary states", summary(rep)),
    );
}
