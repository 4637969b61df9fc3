//! Executable structural checks over hard instances and recorded runs.
//!
//! Every check first tests its hypothesis and reports `skipped` with the
//! failing condition when it does not hold; it never passes vacuously.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{policy_evaluation, value_iteration};
use crate::hard::{closed_form_regime, closed_form_values, StateClass, StateLayout, A0, A1, A2};
use crate::instance::{HardInfo, Instance};
use crate::mdp::{ActionId, Policy, StateId, TabularMdp};
use crate::numeric::ls_slope;
use crate::pg::{pg_stepsize_limit, Algorithm, InvariantStat, RunResult, ASCENT_TOL, ORDERING_TOL, ZERO_SUM_TOL};
use crate::random::random_policy;

/// Tolerance of the value identities that hold exactly under exact evaluation.
pub const IDENTITY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status", content = "reason")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckWitness {
    pub state: Option<StateId>,
    pub action: Option<ActionId>,
    pub iteration: Option<u64>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    #[serde(rename = "check")]
    pub name: String,
    /// The property being checked, in words.
    pub anchor: String,
    #[serde(flatten)]
    pub status: CheckStatus,
    /// Worst-case slack; negative on failure.
    pub margin: Option<f64>,
    pub witness: Option<CheckWitness>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl CheckReport {
    fn new(name: &str, anchor: &str) -> Self {
        Self {
            name: name.to_string(),
            anchor: anchor.to_string(),
            status: CheckStatus::Pass,
            margin: None,
            witness: None,
            notes: Vec::new(),
        }
    }

    fn skipped(mut self, reason: impl Into<String>) -> Self {
        self.status = CheckStatus::Skipped(reason.into());
        self
    }

    fn note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }

    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Pass
    }

    pub fn failed(&self) -> bool {
        self.status == CheckStatus::Fail
    }

    pub fn is_skipped(&self) -> bool {
        matches!(self.status, CheckStatus::Skipped(_))
    }
}

/// Accumulates a worst margin and the first failing witness.
struct Tracker {
    report: CheckReport,
}

impl Tracker {
    fn new(name: &str, anchor: &str) -> Self {
        Self {
            report: CheckReport::new(name, anchor),
        }
    }

    fn observe(&mut self, margin: f64, witness: impl FnOnce() -> CheckWitness) {
        let worst = self.report.margin.map_or(margin, |m| m.min(margin));
        self.report.margin = Some(if margin.is_nan() { f64::NEG_INFINITY } else { worst });
        if !(margin >= 0.0) && self.report.witness.is_none() {
            self.report.status = CheckStatus::Fail;
            self.report.witness = Some(witness());
        }
    }

    fn finish(self) -> CheckReport {
        self.report
    }
}

fn witness(state: Option<StateId>, action: Option<ActionId>, iteration: Option<u64>, detail: String) -> CheckWitness {
    CheckWitness {
        state,
        action,
        iteration,
        detail,
    }
}

fn hard_info(instance: &Instance) -> Result<&HardInfo> {
    instance
        .hard
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("check requires a hard instance".into()))
}

/// Optimal values of the full hard instance against the closed form, greedy
/// action `a1` off the absorbing states, and `Q^pi >= -gamma^2` over 50
/// random policies. Skipped outside the regime where the closed form is
/// guaranteed.
pub fn check_optimal_values(mdp: &TabularMdp, layout: &StateLayout, gamma: f64) -> CheckReport {
    match closed_form_regime(layout.h, gamma) {
        Ok(()) => compare_optimal_values(mdp, layout, gamma),
        Err(e) => {
            CheckReport::new("optimal-values", "closed-form optimal values and greedy action a1").skipped(e.to_string())
        }
    }
}

/// The comparison behind [`check_optimal_values`] without the regime gate.
pub fn compare_optimal_values(mdp: &TabularMdp, layout: &StateLayout, gamma: f64) -> CheckReport {
    let mut tr = Tracker::new("optimal-values", "closed-form optimal values and greedy action a1");
    if mdp.num_states() != layout.target_size {
        return tr.finish().skipped("layout does not describe the supplied MDP");
    }
    let predicted = closed_form_values(layout, gamma);
    let sol = match value_iteration(mdp, 1e-12, 100_000) {
        Ok(sol) => sol,
        Err(e) => {
            tr.observe(f64::NEG_INFINITY, || witness(None, None, None, e.to_string()));
            return tr.finish();
        }
    };
    for block in layout.blocks() {
        if block.class == StateClass::Padding {
            continue;
        }
        for s in block.start..block.start + block.len {
            let err = (sol.v_star[s] - predicted[s]).abs();
            tr.observe(1e-9 - err, || {
                witness(
                    Some(s),
                    None,
                    None,
                    format!("V* = {} but closed form gives {}", sol.v_star[s], predicted[s]),
                )
            });
            if block.class != StateClass::Absorbing {
                let g = sol.greedy[s];
                tr.observe(if g == A1 { 1e-9 } else { -1.0 }, || {
                    witness(Some(s), Some(g), None, format!("greedy action a{g} at {}", block.class))
                });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mu = crate::mdp::StateDist::uniform(mdp.num_states());
    let floor = -gamma * gamma;
    for _ in 0..50 {
        let pi = random_policy(&mut rng, mdp, 2.0);
        match policy_evaluation(mdp, &pi, &mu, 1e-12) {
            Ok(ev) => {
                for s in 0..mdp.num_states() {
                    for k in mdp.pairs(s) {
                        tr.observe(ev.q[k] - floor + IDENTITY_TOL, || {
                            witness(
                                Some(s),
                                Some(mdp.action_of(k)),
                                None,
                                format!("Q = {} below -gamma^2", ev.q[k]),
                            )
                        });
                    }
                }
            }
            Err(e) => tr.observe(f64::NEG_INFINITY, || witness(None, None, None, e.to_string())),
        }
    }
    tr.finish()
}

/// Per-copy visitation under each policy, with `mu` uniform over the original states.
fn per_copy_visitation(instance: &Instance, pi: &Policy) -> Result<Vec<f64>> {
    let ev = policy_evaluation(&instance.mdp, pi, &instance.uniform_mu(), 1e-13)?;
    Ok(ev
        .visitation
        .as_slice()
        .iter()
        .zip(&instance.multiplicity)
        .map(|(d, &m)| d / m as f64)
        .collect())
}

/// Policy-independent lower bounds on the visitation of key states:
/// `c_m gamma (1-gamma)^2` for primary and adjoint states and
/// `c_m gamma (1-gamma)^2 / |S_i|` per copy of buffer class `S_i`.
/// Margins are relative to the bound.
pub fn check_visitation_lower(instance: &Instance, policies: &[Policy]) -> Result<CheckReport> {
    let info = hard_info(instance)?;
    let mut tr = Tracker::new("visitation-lower-bounds", "policy-independent visitation lower bounds");
    let p = &info.params;
    let base = p.c_m * p.gamma * (1.0 - p.gamma).powi(2);
    let bound_of = |class: StateClass| -> Option<f64> {
        match class {
            StateClass::Primary(_) | StateClass::Adjoint(_) => Some(base),
            StateClass::Buffer(1) => Some(base / info.layout.s1_size as f64),
            StateClass::Buffer(2) => Some(base / info.layout.s2_size as f64),
            _ => None,
        }
    };
    for (i, pi) in policies.iter().enumerate() {
        let d = per_copy_visitation(instance, pi)?;
        for (s, &class) in info.labels.iter().enumerate() {
            if let Some(bound) = bound_of(class) {
                tr.observe(d[s] / bound - 1.0, || {
                    witness(
                        Some(s),
                        None,
                        None,
                        format!("policy {i}: d = {:e} below bound {:e} at {class}", d[s], bound),
                    )
                });
            }
        }
    }
    Ok(tr.finish().note(format!("{} policies", policies.len())))
}

/// Pre-crossing visitation upper bounds along a recorded run. They are
/// established only for the constant regime of the construction, so the
/// check is skipped elsewhere.
pub fn check_visitation_upper(run: &RunResult) -> CheckReport {
    let mut tr = Tracker::new("visitation-upper-bounds", "pre-crossing visitation upper bounds");
    let Some(hard) = &run.hard else {
        return tr.finish().skipped("not a hard-instance run");
    };
    let p = &hard.params;
    if !p.in_paper_regime() {
        let failing: Vec<String> = p
            .regime_conditions()
            .into_iter()
            .filter(|c| !c.holds)
            .map(|c| c.name)
            .collect();
        return tr
            .finish()
            .skipped(format!("constant regime violated: {}", failing.join(", ")));
    }
    if run.algorithm != Algorithm::Pg || !run.zero_init {
        return tr.finish().skipped("requires a PG run from the uniform policy");
    }
    let gamma = p.gamma;
    let n = run.total_states as f64;
    let key_bound = 14.0 * p.c_m * (1.0 - gamma).powi(2);
    let t1 = run.crossings.t_chain(1);
    let t2 = run.crossings.t_chain(2);
    let mut checked = 0u64;
    for m in &run.monitored {
        let Some(class) = m.class else { continue };
        // (bound, last iteration covered)
        let spec: Option<(f64, Option<u64>)> = match class {
            StateClass::Primary(s) => Some((key_bound, run.crossings.t_chain(s))),
            StateClass::Adjoint(s) if s >= 2 => Some((key_bound, run.crossings.t_chain(s))),
            StateClass::Adjoint(1) => Some((key_bound, t2)),
            StateClass::Buffer(2) => Some(((1.0 - gamma) / n * (1.0 + 8.0 * p.c_m / p.c_b2), t2)),
            StateClass::Buffer(1) => Some((
                (1.0 - gamma) / n * (1.0 + 17.0 * p.c_m / p.c_b1),
                match (t1, t2) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                },
            )),
            _ => None,
        };
        let Some((bound, until)) = spec else { continue };
        for (iter, snap) in run.series(m.state) {
            if until.is_some_and(|u| iter > u) {
                break;
            }
            checked += 1;
            tr.observe(1.0 - snap.d / bound, || {
                witness(
                    Some(m.state),
                    None,
                    Some(iter),
                    format!("d = {:e} above bound {:e}", snap.d, bound),
                )
            });
        }
    }
    let report = tr.finish().note(format!("{checked} snapshot entries checked"));
    if checked == 0 {
        return report.skipped("no pre-crossing snapshots recorded");
    }
    report
}

/// Lower bounds for every supplied policy, plus the pre-crossing upper
/// bounds along `run` when one is given.
pub fn check_visitation_bounds(
    instance: &Instance,
    policies: &[Policy],
    run: Option<&RunResult>,
) -> Result<Vec<CheckReport>> {
    let mut reports = vec![check_visitation_lower(instance, policies)?];
    if let Some(run) = run {
        reports.push(check_visitation_upper(run));
    }
    Ok(reports)
}

/// Exact value identities of the hard instance for one policy, one report per family.
pub fn check_q_structure(instance: &Instance, policy: &Policy) -> Result<Vec<CheckReport>> {
    let info = hard_info(instance)?;
    let mdp = &instance.mdp;
    let ev = policy_evaluation(mdp, policy, &instance.uniform_mu(), 1e-13)?;
    let gamma = mdp.gamma();
    let key = &info.key;
    let p = key.p;
    let h = info.h();
    let q = |s: StateId, a: ActionId| mdp.find_pair(s, a).map(|k| ev.q[k]);
    // Value of chain state s as seen from its adjoint: the mean over the class for buffers.
    let class_value = |class: StateClass| -> f64 {
        let mut total = 0.0;
        let mut weight = 0.0;
        for (s, &c) in info.labels.iter().enumerate() {
            if c == class {
                total += ev.v[s] * instance.multiplicity[s] as f64;
                weight += instance.multiplicity[s] as f64;
            }
        }
        total / weight
    };
    let chain_value = |s: usize| {
        if s <= 2 {
            class_value(StateClass::Buffer(s))
        } else {
            ev.v[info.chain_state(s)]
        }
    };
    let adj_v = |s: usize| ev.v[info.adjoint_state(s)];
    let eq = |tr: &mut Tracker, got: Option<f64>, want: f64, s: StateId, a: ActionId, what: &str| {
        let got = got.unwrap_or(f64::NAN);
        tr.observe(IDENTITY_TOL - (got - want).abs(), || {
            witness(Some(s), Some(a), None, format!("{what}: {got} vs {want}"))
        });
    };
    let sandwich_regime = params_allow_sandwich(info);

    let mut a0 = Tracker::new("q-primary-a0", "Q(s,a0) = r_s + gamma^2 p tau_{s-2}");
    let mut a1 = Tracker::new("q-primary-a1", "Q(s,a1) = gamma V(adjoint of s-1)");
    let mut a2 = Tracker::new("q-primary-a2", "Q(s,a2) = r_s + gamma p V(adjoint of s-2)");
    let mut sandwich = Tracker::new(
        "q-primary-bounds",
        "gamma^1.5 tau_{s-1} <= Q(s,a0) <= gamma^0.5 tau_s and Q(s,a2) <= gamma^0.5 tau_s",
    );
    let mut gap = Tracker::new(
        "q-primary-gap",
        "Q(s,a0) - Q(s,a2) = gamma p (gamma tau_{s-2} - V(adjoint of s-2)) > 0 before s-2 crosses",
    );
    for s in 3..=h {
        let id = info.chain_state(s);
        let q0 = q(id, A0);
        let q2 = q(id, A2);
        eq(&mut a0, q0, key.primary_a0_reward(s), id, A0, "Q(s,a0)");
        eq(&mut a1, q(id, A1), gamma * adj_v(s - 1), id, A1, "Q(s,a1)");
        eq(&mut a2, q2, key.r(s) + gamma * p * adj_v(s - 2), id, A2, "Q(s,a2)");
        if sandwich_regime.is_ok() {
            let (q0, q2) = (q0.unwrap_or(f64::NAN), q2.unwrap_or(f64::NAN));
            let upper = gamma.sqrt() * key.tau(s);
            let lower = gamma.powf(1.5) * key.tau(s - 1);
            let m = (q0 - lower + IDENTITY_TOL)
                .min(upper - q0 + IDENTITY_TOL)
                .min(upper - q2 + IDENTITY_TOL);
            sandwich.observe(m, || {
                witness(Some(id), Some(A0), None, format!("Q(s,a0) = {q0}, Q(s,a2) = {q2}"))
            });
        }
        let (q0, q2) = (q0.unwrap_or(f64::NAN), q2.unwrap_or(f64::NAN));
        let predicted = gamma * p * (gamma * key.tau(s - 2) - adj_v(s - 2));
        gap.observe(IDENTITY_TOL - ((q0 - q2) - predicted).abs(), || {
            witness(Some(id), Some(A2), None, format!("gap {} vs {predicted}", q0 - q2))
        });
        if chain_value(s - 2) < key.tau(s - 2) {
            gap.observe(q0 - q2, || {
                witness(Some(id), Some(A2), None, format!("gap {} not positive", q0 - q2))
            });
        }
    }

    let mut adj = Tracker::new("q-adjoint", "Q(s_bar,a0) = gamma tau_s and Q(s_bar,a1) = gamma V(s)");
    for s in 1..=h {
        let id = info.adjoint_state(s);
        eq(&mut adj, q(id, A0), gamma * key.tau(s), id, A0, "Q(s_bar,a0)");
        eq(&mut adj, q(id, A1), gamma * chain_value(s), id, A1, "Q(s_bar,a1)");
    }

    let mut buf = Tracker::new(
        "q-buffer",
        "Q(1,a1) = gamma^2, Q(1,a0) = -gamma^2, Q(2,a1) = gamma^4, Q(2,a0) = -gamma^4",
    );
    for (s, &class) in info.labels.iter().enumerate() {
        if let StateClass::Buffer(i) = class {
            let r = gamma.powi(2 * i as i32);
            eq(&mut buf, q(s, A1), r, s, A1, "Q(buffer,a1)");
            eq(&mut buf, q(s, A0), -r, s, A0, "Q(buffer,a0)");
        }
    }

    let mut reports = vec![a0.finish(), a1.finish(), a2.finish()];
    let sandwich = sandwich.finish();
    reports.push(match sandwich_regime {
        Ok(()) => sandwich,
        Err(reason) => sandwich.skipped(reason),
    });
    reports.extend([gap.finish(), adj.finish(), buf.finish()]);
    Ok(reports)
}

fn params_allow_sandwich(info: &HardInfo) -> std::result::Result<(), String> {
    let p = &info.params;
    let g2h = p.gamma.powi(2 * info.h() as i32);
    if p.c_p > 1.0 / 6.0 {
        return Err(format!("c_p = {} exceeds 1/6", p.c_p));
    }
    if g2h < 0.5 {
        return Err(format!("gamma^(2H) = {g2h} below 1/2"));
    }
    Ok(())
}

fn stat_report(name: &str, anchor: &str, stat: &InvariantStat) -> CheckReport {
    let mut report = CheckReport::new(name, anchor);
    report.margin = stat.worst_margin;
    if let Some(w) = &stat.violation {
        report.status = CheckStatus::Fail;
        report.witness = Some(witness(w.state, w.action, Some(w.iter), w.detail.clone()));
    }
    if stat.checked == 0 {
        report = report.skipped("no iterations were checked");
    }
    report
}

/// Merges a snapshot-level re-check into an online statistic report.
fn merge(mut report: CheckReport, tr: Tracker) -> CheckReport {
    if report.is_skipped() {
        return report;
    }
    let other = tr.finish();
    if let Some(m) = other.margin {
        report.margin = Some(report.margin.map_or(m, |r| r.min(m)));
    }
    if other.failed() && !report.failed() {
        report.status = CheckStatus::Fail;
        report.witness = other.witness;
    }
    report
}

/// All run-level invariants: monotone improvement, non-negativity, zero-sum
/// logits, crossing order, adjoint crossing equivalence, the policy floor at
/// crossings, initial-stage logit ordering, threshold monotonicity and
/// snapshot consistency.
pub fn check_run_invariants(run: &RunResult) -> Vec<CheckReport> {
    let limit = pg_stepsize_limit(run.gamma);
    let pg_in_regime = run.algorithm == Algorithm::Pg && run.eta < limit;
    let regime_reason = if run.algorithm != Algorithm::Pg {
        format!("{} run; the guarantee covers PG only", run.algorithm)
    } else {
        format!("eta = {} is not below (1 - gamma)^2 / 5 = {limit}", run.eta)
    };
    let mut reports = Vec::new();

    // Monotone improvement, re-checked between consecutive snapshots.
    let mut snap_v = Tracker::new("", "");
    let mut snap_q = Tracker::new("", "");
    for pair in run.snapshots.windows(2) {
        for cur in &pair[1].states {
            if let Some(prev) = pair[0].state(cur.state) {
                snap_v.observe(cur.v - prev.v + ASCENT_TOL, || {
                    witness(
                        Some(cur.state),
                        None,
                        Some(pair[1].iter),
                        format!("V fell from {} to {}", prev.v, cur.v),
                    )
                });
                for (i, (&qa, &qb)) in prev.q.iter().zip(&cur.q).enumerate() {
                    snap_q.observe(qb - qa + ASCENT_TOL, || {
                        witness(
                            Some(cur.state),
                            Some(cur.actions[i]),
                            Some(pair[1].iter),
                            format!("Q fell from {qa} to {qb}"),
                        )
                    });
                }
            }
        }
    }
    let mut mono = stat_report(
        "monotone-improvement-v",
        "V^(t+1)(s) >= V^(t)(s) for small stepsizes",
        &run.invariants.ascent_v,
    );
    let mut mono_q = stat_report(
        "monotone-improvement-q",
        "Q^(t+1)(s,a) >= Q^(t)(s,a) for small stepsizes",
        &run.invariants.ascent_q,
    );
    if !pg_in_regime {
        mono = mono.skipped(regime_reason.clone());
        mono_q = mono_q.skipped(regime_reason.clone());
    }
    reports.push(merge(mono, snap_v));
    reports.push(merge(mono_q, snap_q));

    let mut snap_nonneg = Tracker::new("", "");
    let mut snap_zero = Tracker::new("", "");
    for snap in &run.snapshots {
        for st in &snap.states {
            snap_nonneg.observe(st.v + ASCENT_TOL, || {
                witness(Some(st.state), None, Some(snap.iter), format!("V = {}", st.v))
            });
            let total: f64 = st.theta.iter().sum();
            snap_zero.observe(ZERO_SUM_TOL - total.abs(), || {
                witness(
                    Some(st.state),
                    None,
                    Some(snap.iter),
                    format!("sum of logits {total:e}"),
                )
            });
        }
    }
    let mut nonneg = stat_report(
        "non-negativity",
        "V^(t)(s) >= 0 from the uniform policy",
        &run.invariants.nonnegativity,
    );
    if !pg_in_regime {
        nonneg = nonneg.skipped(regime_reason.clone());
    } else if !run.uniform_init {
        nonneg = nonneg.skipped("initial policy is not uniform");
    } else if run.hard.is_none() {
        nonneg = nonneg.skipped("not a hard-instance run");
    }
    reports.push(merge(nonneg, snap_nonneg));

    let mut zero = stat_report("zero-sum-logits", "sum_a theta^(t)(s,a) = 0", &run.invariants.zero_sum);
    if run.algorithm != Algorithm::Pg {
        zero = zero.skipped("NPG updates do not preserve logit sums");
    } else if !run.zero_init {
        zero = zero.skipped("initial logits are not zero");
    }
    reports.push(merge(zero, snap_zero));

    reports.extend(check_crossing_structure(run));

    let mut policy_floor = stat_report(
        "crossing-policy-floor",
        "pi(a1|s) >= (1-gamma)/2 once V(s) >= tau_s",
        &run.invariants.crossing_policy,
    );
    if run.hard.is_none() {
        policy_floor = policy_floor.skipped("not a hard-instance run");
    }
    reports.push(policy_floor);

    let mut ordering = stat_report(
        "initial-stage-ordering",
        "theta(s,a0) >= theta(s,a2) >= 0 >= theta(s,a1) until s-2 crosses",
        &run.invariants.initial_ordering,
    );
    let mut snap_order = Tracker::new("", "");
    for m in &run.monitored {
        let Some(StateClass::Primary(s)) = m.class else {
            continue;
        };
        let until = run.crossings.t_chain(s - 2);
        for (iter, st) in run.series(m.state) {
            if until.is_some_and(|u| iter > u) {
                break;
            }
            if let (Some(t0), Some(t1), Some(t2)) = (st.theta_of(A0), st.theta_of(A1), st.theta_of(A2)) {
                let margin = (t0 - t2).min(t2).min(-t1) + ORDERING_TOL;
                snap_order.observe(margin, || {
                    witness(Some(m.state), None, Some(iter), format!("theta = ({t0}, {t1}, {t2})"))
                });
            }
        }
    }
    if run.algorithm != Algorithm::Pg || !run.zero_init || !pg_in_regime {
        ordering = ordering.skipped("requires a PG run from zero logits with a small stepsize");
    }
    reports.push(merge(ordering, snap_order));

    let mut snap = Tracker::new(
        "snapshot-consistency",
        "rescaled policy in (0,1] with maximum 1; mean error <= sup error",
    );
    for s in &run.snapshots {
        snap.observe(s.sup_error - s.mean_error + 1e-15, || {
            witness(
                None,
                None,
                Some(s.iter),
                format!("mean error {} exceeds sup error {}", s.mean_error, s.sup_error),
            )
        });
        for st in &s.states {
            let max = st.pi_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = st.pi_hat.iter().copied().fold(f64::INFINITY, f64::min);
            let ok = max == 1.0 && min > 0.0;
            snap.observe(if ok { 0.0 } else { -1.0 }, || {
                witness(
                    Some(st.state),
                    None,
                    Some(s.iter),
                    format!("rescaled policy {:?}", st.pi_hat),
                )
            });
        }
    }
    reports.push(snap.finish());
    reports
}

/// Crossing-order chain, adjoint equivalence and per-state threshold monotonicity.
fn check_crossing_structure(run: &RunResult) -> Vec<CheckReport> {
    let mut order = Tracker::new("crossing-order", "t_2(tau_2) <= t_3(tau_3) <= ... <= t_H(tau_H)");
    let mut equiv = Tracker::new("adjoint-crossing-equivalence", "t_sbar(gamma tau_s) = t_s(tau_s)");
    let mut thresholds = Tracker::new("threshold-monotonicity", "t(tau) <= t(tau') whenever tau <= tau'");
    let table = &run.crossings;

    for (i, a) in table.records.iter().enumerate() {
        for b in &table.records[i + 1..] {
            if a.state != b.state {
                continue;
            }
            let (lo, hi) = if a.threshold <= b.threshold { (a, b) } else { (b, a) };
            match (lo.t, hi.t) {
                (Some(x), Some(y)) => thresholds.observe(y as f64 - x as f64, || {
                    witness(
                        Some(a.state),
                        None,
                        Some(y),
                        format!("{} crossed at {y} before {} at {x}", hi.name, lo.name),
                    )
                }),
                (None, Some(y)) => thresholds.observe(-1.0, || {
                    witness(
                        Some(a.state),
                        None,
                        Some(y),
                        format!("{} crossed but lower {} never did", hi.name, lo.name),
                    )
                }),
                _ => {}
            }
        }
    }

    let Some(hard) = &run.hard else {
        return vec![
            order.finish().skipped("not a hard-instance run"),
            equiv.finish().skipped("not a hard-instance run"),
            thresholds.finish(),
        ];
    };
    let mut pairs = 0;
    for s in 3..=hard.h {
        if let Some(ts) = table.t_chain(s) {
            pairs += 1;
            match table.t_chain(s - 1) {
                Some(prev) => order.observe(ts as f64 - prev as f64, || {
                    witness(
                        None,
                        None,
                        Some(ts),
                        format!("t_{s} = {ts} precedes t_{} = {prev}", s - 1),
                    )
                }),
                None => order.observe(-1.0, || {
                    witness(
                        None,
                        None,
                        Some(ts),
                        format!("t_{s} = {ts} determined while t_{} is not", s - 1),
                    )
                }),
            }
        }
    }
    let mut compared = 0;
    for s in 1..=hard.h {
        let chain = table.t_chain(s);
        let adj = table.t_adjoint(s);
        let monitored = run.monitored.iter().any(|m| m.class == Some(StateClass::Adjoint(s)));
        if !monitored {
            continue;
        }
        compared += 1;
        let ok = chain == adj;
        equiv.observe(if ok { 0.0 } else { -1.0 }, || {
            witness(
                None,
                None,
                chain.or(adj),
                format!("t_{s} = {chain:?} but adjoint crossing at {adj:?}"),
            )
        });
    }
    let mut order = order.finish();
    if pairs == 0 {
        order = order.skipped("no primary state crossed");
    }
    let mut equiv = equiv.finish();
    if compared == 0 {
        equiv = equiv.skipped("no adjoint state monitored");
    }
    let mut thresholds = thresholds.finish();
    if thresholds.margin.is_none() {
        thresholds = thresholds.skipped("no determined crossing pairs");
    }
    vec![order, equiv, thresholds]
}

/// Super-linear growth of the crossing times along the chain: ratios
/// `t_s(tau_s) / t_{s-2}(tau_{s-2})` above one and increasing in `s`, with
/// fitted exponent `alpha > 1` in `t_s ~ c t_{s-2}^alpha`.
pub fn check_blowup(run: &RunResult) -> CheckReport {
    let mut report = CheckReport::new("blow-up", "super-linear growth of crossing times along the chain");
    let Some(hard) = &run.hard else {
        return report.skipped("not a hard-instance run");
    };
    if run.algorithm == Algorithm::Npg {
        let crossed = (1..=hard.h).filter(|&s| run.crossings.t_chain(s).is_some()).count();
        let last = (1..=hard.h).filter_map(|s| run.crossings.t_chain(s)).max();
        return report.skipped(format!(
            "not applicable to NPG; comparator: {crossed} chain states crossed, last at {last:?}"
        ));
    }
    let pairs: Vec<(usize, u64, u64)> = (3..=hard.h)
        .filter_map(|s| match (run.crossings.t_chain(s), run.crossings.t_chain(s - 2)) {
            (Some(ts), Some(tp)) if tp > 0 => Some((s, ts, tp)),
            _ => None,
        })
        .collect();
    if pairs.len() < 2 {
        return report.skipped(format!("insufficient data: {} determined pairs", pairs.len()));
    }
    let ratios: Vec<f64> = pairs.iter().map(|&(_, ts, tp)| ts as f64 / tp as f64).collect();
    let xs: Vec<f64> = pairs.iter().map(|&(_, _, tp)| (tp as f64).ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|&(_, ts, _)| (ts as f64).ln()).collect();
    let alpha = ls_slope(&xs, &ys);
    let mut margin = ratios.iter().map(|r| r - 1.0).fold(f64::INFINITY, f64::min);
    let mut failure = ratios.iter().position(|&r| r <= 1.0).map(|i| {
        let (s, ts, tp) = pairs[i];
        format!("ratio t_{s}/t_{} = {ts}/{tp} is not above one", s - 2)
    });
    for (i, w) in ratios.windows(2).enumerate() {
        margin = margin.min(w[1] - w[0]);
        if w[1] <= w[0] && failure.is_none() {
            let s = pairs[i + 1].0;
            failure = Some(format!(
                "ratio at s = {s} ({}) does not exceed the previous ({})",
                w[1], w[0]
            ));
        }
    }
    match alpha {
        Some(a) => {
            margin = margin.min(a - 1.0);
            if a <= 1.0 && failure.is_none() {
                failure = Some(format!("fitted exponent {a} is not above one"));
            }
        }
        None => {
            failure.get_or_insert_with(|| "exponent fit is degenerate".to_string());
        }
    }
    report.margin = Some(margin);
    let listing: Vec<String> = pairs
        .iter()
        .zip(&ratios)
        .map(|(&(s, ts, tp), r)| format!("t_{s}/t_{} = {ts}/{tp} = {r:.4}", s - 2))
        .collect();
    report.notes.push(listing.join("; "));
    if let Some(a) = alpha {
        report.notes.push(format!(
            "fitted alpha = {a:.4}; the asymptotic regime predicts 1.5, desk-scale runs certify only alpha > 1"
        ));
    }
    if let Some(detail) = failure {
        report.status = CheckStatus::Fail;
        report.witness = Some(witness(None, None, None, detail));
    }
    report
}

/// One point of a scaling sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub size: usize,
    pub gamma: f64,
    pub eta: f64,
    pub t1: Option<u64>,
    pub t2: Option<u64>,
}

impl ScalingPoint {
    pub fn from_run(run: &RunResult) -> Self {
        Self {
            size: run.total_states,
            gamma: run.gamma,
            eta: run.eta,
            t1: run.crossings.t_chain(1),
            t2: run.crossings.t_chain(2),
        }
    }
}

const SLOPE_BAND: (f64, f64) = (0.8, 1.2);

fn band_margin(x: f64, (lo, hi): (f64, f64)) -> f64 {
    (x - lo).min(hi - x)
}

/// Linear growth of `t_1(tau_1)` (and `t_2(tau_2)` when determined
/// everywhere) in `|S|`: log-log slope within `[0.8, 1.2]`.
pub fn check_scaling_t1(points: &[ScalingPoint]) -> Result<CheckReport> {
    let mut sizes: Vec<usize> = points.iter().map(|p| p.size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if points.len() < 3 || sizes.len() != points.len() {
        return Err(Error::InvalidInput(
            "need at least three runs with distinct sizes".into(),
        ));
    }
    if points
        .iter()
        .any(|p| p.gamma != points[0].gamma || p.eta != points[0].eta)
    {
        return Err(Error::InvalidInput("runs differ in more than the state count".into()));
    }
    let mut report = CheckReport::new("t1-scaling", "t_1(tau_1) grows linearly in |S| / eta");
    let xs: Vec<f64> = points.iter().map(|p| (p.size as f64).ln()).collect();
    let Some(t1) = points
        .iter()
        .map(|p| p.t1.map(|t| (t.max(1) as f64).ln()))
        .collect::<Option<Vec<f64>>>()
    else {
        return Ok(report.skipped("t_1(tau_1) not determined for every size"));
    };
    let slope1 = ls_slope(&xs, &t1).unwrap_or(f64::NAN);
    let mut margin = band_margin(slope1, SLOPE_BAND);
    report.notes.push(format!("t_1 slope {slope1:.4}"));
    let mut failure = (!(margin >= 0.0)).then(|| format!("t_1 log-log slope {slope1:.4} outside [0.8, 1.2]"));
    if let Some(t2) = points
        .iter()
        .map(|p| p.t2.map(|t| (t.max(1) as f64).ln()))
        .collect::<Option<Vec<f64>>>()
    {
        let slope2 = ls_slope(&xs, &t2).unwrap_or(f64::NAN);
        let m2 = band_margin(slope2, SLOPE_BAND);
        margin = margin.min(m2);
        report.notes.push(format!("t_2 slope {slope2:.4}"));
        if !(m2 >= 0.0) && failure.is_none() {
            failure = Some(format!("t_2 log-log slope {slope2:.4} outside [0.8, 1.2]"));
        }
    } else {
        report
            .notes
            .push("t_2(tau_2) not determined for every size; only t_1 fitted".into());
    }
    report.margin = Some(margin);
    if let Some(detail) = failure {
        report.status = CheckStatus::Fail;
        report.witness = Some(witness(None, None, None, detail));
    }
    Ok(report)
}

/// Inverse proportionality of `t_1(tau_1)` to the stepsize at a fixed size:
/// each observed ratio of crossing times is within 25% of the stepsize ratio.
pub fn check_stepsize_scaling(points: &[ScalingPoint]) -> Result<CheckReport> {
    if points.len() < 2
        || points
            .iter()
            .any(|p| p.size != points[0].size || p.gamma != points[0].gamma)
    {
        return Err(Error::InvalidInput(
            "need at least two runs differing only in the stepsize".into(),
        ));
    }
    let mut sorted: Vec<&ScalingPoint> = points.iter().collect();
    sorted.sort_by(|a, b| b.eta.total_cmp(&a.eta));
    let mut report = CheckReport::new("t1-stepsize-scaling", "t_1(tau_1) grows like 1 / eta");
    let mut tr = Tracker::new("", "");
    for w in sorted.windows(2) {
        let (Some(a), Some(b)) = (w[0].t1, w[1].t1) else {
            return Ok(report.skipped("t_1(tau_1) not determined for every stepsize"));
        };
        let expected = w[0].eta / w[1].eta;
        let observed = b as f64 / a.max(1) as f64;
        let rel = observed / expected;
        report.notes.push(format!(
            "eta {} -> {}: t_1 {a} -> {b}, ratio {observed:.4} (expected {expected:.4})",
            w[0].eta, w[1].eta
        ));
        tr.observe(band_margin(rel, (0.75, 1.25)), || {
            witness(
                None,
                None,
                Some(b),
                format!("t_1 ratio {observed:.4} vs stepsize ratio {expected:.4}"),
            )
        });
    }
    let tr = tr.finish();
    report.margin = tr.margin;
    report.status = tr.status;
    report.witness = tr.witness;
    Ok(report)
}

/// Merges several runs of the same family of checks (for instance one per
/// policy) into one report per check name, keeping the worst margin and the
/// first failure.
pub fn combine(batches: Vec<Vec<CheckReport>>) -> Vec<CheckReport> {
    let mut merged: Vec<CheckReport> = Vec::new();
    for report in batches.into_iter().flatten() {
        let Some(acc) = merged.iter_mut().find(|r| r.name == report.name) else {
            merged.push(report);
            continue;
        };
        if report.is_skipped() {
            continue;
        }
        if acc.is_skipped() {
            *acc = report;
            continue;
        }
        if let Some(m) = report.margin {
            acc.margin = Some(acc.margin.map_or(m, |a| a.min(m)));
        }
        if report.failed() && !acc.failed() {
            acc.status = CheckStatus::Fail;
            acc.witness = report.witness;
        }
    }
    merged
}

pub fn any_failed(reports: &[CheckReport]) -> bool {
    reports.iter().any(CheckReport::failed)
}

pub fn reports_to_json(reports: &[CheckReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize")
}

/// Fixed-width table with one line per check.
pub fn reports_table(reports: &[CheckReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:<7}  {:>12}  detail\n", "check", "status", "margin");
    for r in reports {
        let status = match &r.status {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skipped(_) => "skipped",
        };
        let margin = r.margin.map_or("-".to_string(), |m| format!("{m:.3e}"));
        let detail = match (&r.status, &r.witness) {
            (CheckStatus::Skipped(reason), _) => reason.clone(),
            (_, Some(w)) => {
                let mut d = w.detail.clone();
                if let Some(s) = w.state {
                    let _ = write!(d, " [state {s}]");
                }
                if let Some(t) = w.iteration {
                    let _ = write!(d, " [iter {t}]");
                }
                d
            }
            _ => r.anchor.clone(),
        };
        let _ = writeln!(out, "{:<width$}  {:<7}  {:>12}  {}", r.name, status, margin, detail);
    }
    out
}
