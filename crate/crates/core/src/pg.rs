//! Softmax policy gradient and natural policy gradient with exact gradients.
//!
//! [`run`] iterates `theta <- theta + eta * direction` on an [`Instance`],
//! evaluating the current policy exactly at every step. It records sparse
//! snapshots of the monitored states, first-crossing times of value
//! thresholds, and online checks of the invariants every exact-gradient run
//! on the hard instance is expected to satisfy.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{value_iteration, Solver, Workspace};
use crate::hard::{HardMdpParams, StateClass, Variant, A0, A1, A2};
use crate::instance::Instance;
use crate::mdp::{softmax_rows, ActionId, PolicyLogits, StateDist, StateId, TabularMdp};

/// Slack allowed on monotone improvement and non-negativity.
pub const ASCENT_TOL: f64 = 1e-12;
/// Bound on `|sum_a theta(s, a)|`.
pub const ZERO_SUM_TOL: f64 = 1e-8;
/// Slack on the initial-stage ordering of logits.
pub const ORDERING_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Pg,
    Npg,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Pg => "pg",
            Algorithm::Npg => "npg",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pg" => Ok(Algorithm::Pg),
            "npg" => Ok(Algorithm::Npg),
            other => Err(Error::InvalidInput(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Largest stepsize covered by the monotone-improvement guarantee, `(1 - gamma)^2 / 5`.
pub fn pg_stepsize_limit(gamma: f64) -> f64 {
    (1.0 - gamma).powi(2) / 5.0
}

/// Default NPG stepsize, chosen equal to the PG stepsize limit for comparability.
pub fn default_npg_eta(gamma: f64) -> f64 {
    pg_stepsize_limit(gamma)
}

/// Which iterations get a snapshot: every `stride`-th one up to `dense_until`,
/// then geometrically spaced by `growth`. Crossing events and the final
/// iteration are always recorded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotPolicy {
    pub stride: u64,
    pub dense_until: u64,
    pub growth: f64,
}

impl Default for SnapshotPolicy {
    fn default() -> Self {
        Self {
            stride: 1,
            dense_until: 1000,
            growth: 1.2,
        }
    }
}

impl SnapshotPolicy {
    fn first_sparse(&self) -> u64 {
        self.dense_until + 1
    }

    fn next_sparse(&self, t: u64) -> u64 {
        ((t as f64 * self.growth).ceil() as u64).max(t + 1)
    }
}

#[derive(Clone, Debug)]
pub struct PgConfig {
    pub eta: f64,
    pub max_iter: u64,
    pub stop_sup_error: Option<f64>,
    pub stop_mean_error: Option<f64>,
    /// Stop once every threshold reachable under `V*` has been crossed.
    pub stop_when_crossed: bool,
    /// Monitored execution states; `None` selects the key states of a hard
    /// instance, or every state of a small generic MDP.
    pub monitor_states: Option<Vec<StateId>>,
    pub snapshots: SnapshotPolicy,
    pub eval_tol: f64,
    pub solver: Solver,
    /// Initial distribution; `None` means uniform over the original states.
    pub mu: Option<StateDist>,
    /// Initial logits; `None` means the uniform policy.
    pub theta0: Option<PolicyLogits>,
    pub enforce_paper_regime: bool,
    pub theta_limit: f64,
}

impl PgConfig {
    pub fn new(eta: f64, max_iter: u64) -> Self {
        Self {
            eta,
            max_iter,
            stop_sup_error: Some(0.15),
            stop_mean_error: Some(0.07),
            stop_when_crossed: false,
            monitor_states: None,
            snapshots: SnapshotPolicy::default(),
            eval_tol: 1e-12,
            solver: Solver::Auto,
            mu: None,
            theta0: None,
            enforce_paper_regime: false,
            theta_limit: 1e6,
        }
    }

    /// Disables both error-based stopping rules.
    pub fn without_error_stops(mut self) -> Self {
        self.stop_sup_error = None;
        self.stop_mean_error = None;
        self
    }

    pub fn validate(&self, instance: &Instance, algorithm: Algorithm) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::InvalidInput(format!(
                "stepsize must be positive, got {}",
                self.eta
            )));
        }
        if !(self.eval_tol > 0.0) {
            return Err(Error::InvalidInput(format!(
                "evaluation tolerance must be positive, got {}",
                self.eval_tol
            )));
        }
        let gamma = instance.mdp.gamma();
        if self.enforce_paper_regime && algorithm == Algorithm::Pg && self.eta >= pg_stepsize_limit(gamma) {
            return Err(Error::OutsideRegime(format!(
                "eta = {} is not below (1 - gamma)^2 / 5 = {}",
                self.eta,
                pg_stepsize_limit(gamma)
            )));
        }
        if let Some(mu) = &self.mu {
            if mu.len() != instance.mdp.num_states() {
                return Err(Error::DimensionMismatch("initial distribution length".into()));
            }
        }
        if let Some(theta) = &self.theta0 {
            if !theta.matches(&instance.mdp) {
                return Err(Error::DimensionMismatch("initial logits do not match the MDP".into()));
            }
        }
        if let Some(states) = &self.monitor_states {
            if let Some(&s) = states.iter().find(|&&s| s >= instance.mdp.num_states()) {
                return Err(Error::InvalidInput(format!("monitored state {s} out of range")));
            }
        }
        Ok(())
    }
}

/// Per-state part of a snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub state: StateId,
    pub actions: Vec<ActionId>,
    pub v: f64,
    pub q: Vec<f64>,
    pub theta: Vec<f64>,
    /// `exp(theta(s, .) - max_a theta(s, a))`.
    pub pi_hat: Vec<f64>,
    pub pi_a1: Option<f64>,
    /// Visitation of one copy of the state.
    pub d: f64,
}

impl StateSnapshot {
    pub fn theta_of(&self, a: ActionId) -> Option<f64> {
        self.actions.iter().position(|&b| b == a).map(|i| self.theta[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSnapshot {
    pub iter: u64,
    pub sup_error: f64,
    pub mean_error: f64,
    pub states: Vec<StateSnapshot>,
}

impl IterationSnapshot {
    pub fn state(&self, s: StateId) -> Option<&StateSnapshot> {
        self.states.iter().find(|x| x.state == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingRecord {
    pub state: StateId,
    pub label: String,
    pub class: Option<StateClass>,
    pub name: String,
    pub threshold: f64,
    /// First iteration with `V(state) >= threshold`, if reached.
    pub t: Option<u64>,
    /// `V - threshold` at the crossing.
    pub margin: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CrossingTimeTable {
    pub records: Vec<CrossingRecord>,
}

impl CrossingTimeTable {
    pub fn get(&self, state: StateId, name: &str) -> Option<&CrossingRecord> {
        self.records.iter().find(|r| r.state == state && r.name == name)
    }

    fn by_class(&self, class: StateClass, name: &str) -> Option<&CrossingRecord> {
        self.records.iter().find(|r| r.class == Some(class) && r.name == name)
    }

    /// `t_s(tau_s)` of chain state `s` (buffer class for `s = 1, 2`).
    pub fn t_chain(&self, s: usize) -> Option<u64> {
        let class = if s <= 2 {
            StateClass::Buffer(s)
        } else {
            StateClass::Primary(s)
        };
        self.by_class(class, "tau").and_then(|r| r.t)
    }

    /// `t_s̄(gamma tau_s)` of adjoint state `s̄`.
    pub fn t_adjoint(&self, s: usize) -> Option<u64> {
        self.by_class(StateClass::Adjoint(s), "gamma_tau").and_then(|r| r.t)
    }
}

/// Default crossing thresholds of a monitored state.
pub fn default_thresholds(instance: &Instance, state: StateId) -> Vec<(String, f64)> {
    let half = ("half".to_string(), 0.5);
    let Some(info) = &instance.hard else {
        return vec![half];
    };
    let gamma = info.params.gamma;
    match info.labels[state] {
        StateClass::Buffer(s) | StateClass::Primary(s) => vec![
            ("tau".into(), info.key.tau(s)),
            ("opt_minus_quarter".into(), gamma.powi(2 * s as i32) - 0.25),
            half,
        ],
        StateClass::Adjoint(s) => vec![
            ("gamma_tau".into(), gamma * info.key.tau(s)),
            ("opt_minus_quarter".into(), gamma.powi(2 * s as i32 + 1) - 0.25),
            half,
        ],
        _ => vec![half],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub iter: u64,
    pub state: Option<StateId>,
    pub action: Option<ActionId>,
    pub detail: String,
}

/// Running record of one invariant: how often it was evaluated, the smallest
/// margin seen (negative means violated) and the first violation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantStat {
    pub checked: u64,
    pub worst_margin: Option<f64>,
    pub violation: Option<Witness>,
}

impl InvariantStat {
    fn observe(&mut self, margin: f64, witness: impl FnOnce() -> Witness) {
        self.checked += 1;
        if self.worst_margin.map_or(true, |m| margin < m) {
            self.worst_margin = Some(margin);
        }
        if margin < 0.0 && self.violation.is_none() {
            self.violation = Some(witness());
        }
    }

    pub fn holds(&self) -> bool {
        self.violation.is_none()
    }
}

/// Invariants checked at every iteration over every execution state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantMonitor {
    /// `V^(t+1)(s) >= V^(t)(s) - 1e-12`.
    pub ascent_v: InvariantStat,
    /// `Q^(t+1)(s, a) >= Q^(t)(s, a) - 1e-12`.
    pub ascent_q: InvariantStat,
    /// `V^(t)(s) >= -1e-12`.
    pub nonnegativity: InvariantStat,
    /// `|sum_a theta^(t)(s, a)| <= 1e-8`.
    pub zero_sum: InvariantStat,
    /// `pi(a1|s) >= (1 - gamma) / 2` when a primary state crosses `tau_s`.
    pub crossing_policy: InvariantStat,
    /// `theta(s,a0) >= theta(s,a2) >= 0 >= theta(s,a1)` on monitored primary
    /// states up to the crossing of `s - 2`.
    pub initial_ordering: InvariantStat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    SupThreshold,
    MeanThreshold,
    MaxIter,
    AllCrossed,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::SupThreshold => "sup-threshold",
            StopReason::MeanThreshold => "mean-threshold",
            StopReason::MaxIter => "max-iter",
            StopReason::AllCrossed => "all-crossed",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitoredState {
    pub state: StateId,
    pub label: String,
    pub class: Option<StateClass>,
}

/// Hard-instance parameters of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInstance {
    pub params: HardMdpParams,
    pub variant: Variant,
    pub h: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub algorithm: Algorithm,
    pub eta: f64,
    pub gamma: f64,
    pub eval_tol: f64,
    pub max_iter: u64,
    pub total_states: usize,
    pub collapsed: bool,
    /// Every initial row of logits is constant (uniform initial policy).
    pub uniform_init: bool,
    /// Every initial logit is zero.
    pub zero_init: bool,
    pub hard: Option<RunInstance>,
    pub monitored: Vec<MonitoredState>,
    pub stop_reason: StopReason,
    /// Number of updates performed; the last evaluated iterate is `theta^(iterations)`.
    pub iterations: u64,
    pub final_sup_error: f64,
    pub final_mean_error: f64,
    pub crossings: CrossingTimeTable,
    pub invariants: InvariantMonitor,
    pub wall_time_secs: f64,
    #[serde(skip)]
    pub snapshots: Vec<IterationSnapshot>,
}

impl RunResult {
    pub fn final_snapshot(&self) -> Option<&IterationSnapshot> {
        self.snapshots.last()
    }

    /// `(iter, snapshot)` pairs for one monitored state.
    pub fn series(&self, state: StateId) -> Vec<(u64, &StateSnapshot)> {
        self.snapshots
            .iter()
            .filter_map(|snap| snap.state(state).map(|x| (snap.iter, x)))
            .collect()
    }
}

/// Per-copy PG direction `d(s) pi(a|s) A(s,a) / (1 - gamma)` from an evaluated workspace.
fn pg_direction(mdp: &TabularMdp, ws: &Workspace, multiplicity: &[usize], out: &mut [f64]) {
    let scale = 1.0 / (1.0 - mdp.gamma());
    for s in 0..mdp.num_states() {
        let w = ws.d[s] / multiplicity[s] as f64 * scale;
        for k in mdp.pairs(s) {
            out[k] = w * ws.pi[k] * (ws.q[k] - ws.v[s]);
        }
    }
}

fn npg_direction(mdp: &TabularMdp, ws: &Workspace, out: &mut [f64]) {
    let scale = 1.0 / (1.0 - mdp.gamma());
    for s in 0..mdp.num_states() {
        for k in mdp.pairs(s) {
            out[k] = scale * (ws.q[k] - ws.v[s]);
        }
    }
}

fn evaluated(mdp: &TabularMdp, theta: &PolicyLogits, mu: &StateDist, tol: f64, solver: Solver) -> Result<Workspace> {
    if !theta.matches(mdp) {
        return Err(Error::DimensionMismatch(
            "logits do not match the MDP action sets".into(),
        ));
    }
    let mut ws = Workspace::new(mdp);
    softmax_rows(&mdp.offsets()[..], theta.values(), &mut ws.pi)?;
    ws.evaluate(mdp, mu.as_slice(), tol, solver)?;
    Ok(ws)
}

/// Exact policy gradient `dV(mu)/dtheta(s,a) = d(s) pi(a|s) A(s,a) / (1 - gamma)`.
pub fn pg_gradient(mdp: &TabularMdp, theta: &PolicyLogits, mu: &StateDist, eval_tol: f64) -> Result<Vec<f64>> {
    pg_gradient_weighted(mdp, theta, mu, &vec![1; mdp.num_states()], eval_tol, Solver::Auto)
}

/// Gradient with respect to the logits of one copy of each class, for a
/// collapsed MDP whose state `s` stands for `multiplicity[s]` copies.
pub fn pg_gradient_weighted(
    mdp: &TabularMdp,
    theta: &PolicyLogits,
    mu: &StateDist,
    multiplicity: &[usize],
    eval_tol: f64,
    solver: Solver,
) -> Result<Vec<f64>> {
    if multiplicity.len() != mdp.num_states() {
        return Err(Error::DimensionMismatch("multiplicity length".into()));
    }
    let ws = evaluated(mdp, theta, mu, eval_tol, solver)?;
    let mut g = vec![0.0; mdp.num_pairs()];
    pg_direction(mdp, &ws, multiplicity, &mut g);
    Ok(g)
}

/// `theta + eta * gradient`, rejecting non-finite results.
pub fn pg_step(theta: &PolicyLogits, gradient: &[f64], eta: f64) -> Result<PolicyLogits> {
    if gradient.len() != theta.values().len() {
        return Err(Error::DimensionMismatch(format!(
            "gradient has {} entries for {} logits",
            gradient.len(),
            theta.values().len()
        )));
    }
    let mut next = theta.clone();
    let offsets = theta.offsets().clone();
    for s in 0..theta.num_states() {
        for k in offsets[s]..offsets[s + 1] {
            let x = theta.values()[k] + eta * gradient[k];
            if !x.is_finite() {
                return Err(Error::NonFiniteLogit {
                    state: s,
                    slot: k - offsets[s],
                });
            }
            next.values_mut()[k] = x;
        }
    }
    Ok(next)
}

/// Softmax NPG step `theta + eta / (1 - gamma) * A^pi`.
pub fn npg_step(mdp: &TabularMdp, theta: &PolicyLogits, eta_npg: f64, eval_tol: f64) -> Result<PolicyLogits> {
    let mu = StateDist::uniform(mdp.num_states());
    let ws = evaluated(mdp, theta, &mu, eval_tol, Solver::Auto)?;
    let mut dir = vec![0.0; mdp.num_pairs()];
    npg_direction(mdp, &ws, &mut dir);
    pg_step(theta, &dir, eta_npg)
}

/// `V^pi_theta(mu)` evaluated with a direct solver.
pub fn objective(mdp: &TabularMdp, theta: &PolicyLogits, mu: &StateDist) -> Result<f64> {
    let solver = if mdp.topological_order().is_some() {
        Solver::Topological
    } else {
        Solver::Dense
    };
    let ws = evaluated(mdp, theta, mu, 1e-14, solver)?;
    Ok(ws.v.iter().zip(mu.as_slice()).map(|(v, m)| v * m).sum())
}

/// Central finite differences of `V^pi_theta(mu)` in every logit coordinate.
pub fn finite_difference_value(mdp: &TabularMdp, theta: &PolicyLogits, mu: &StateDist, h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("step must be positive, got {h}")));
    }
    (0..theta.values().len())
        .map(|k| finite_difference_coordinate(mdp, theta, mu, h, k))
        .collect()
}

/// Central difference in a single coordinate.
pub fn finite_difference_coordinate(
    mdp: &TabularMdp,
    theta: &PolicyLogits,
    mu: &StateDist,
    h: f64,
    k: usize,
) -> Result<f64> {
    let mut probe = theta.clone();
    probe.values_mut()[k] += h;
    let plus = objective(mdp, &probe, mu)?;
    probe.values_mut()[k] = theta.values()[k] - h;
    let minus = objective(mdp, &probe, mu)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Runs PG or NPG to a stopping condition.
pub fn run(instance: &Instance, config: &PgConfig, algorithm: Algorithm) -> Result<RunResult> {
    run_with_hook(instance, config, algorithm, &mut |_, _| {})
}

struct Tracked {
    state: StateId,
    threshold: f64,
    reachable: bool,
    class: Option<StateClass>,
    name: String,
}

/// As [`run`], with `hook(t, direction)` applied to every update direction
/// before the step; used to inject faults in tests.
pub fn run_with_hook(
    instance: &Instance,
    config: &PgConfig,
    algorithm: Algorithm,
    hook: &mut dyn FnMut(u64, &mut [f64]),
) -> Result<RunResult> {
    config.validate(instance, algorithm)?;
    let started = Instant::now();
    let mdp = &instance.mdp;
    let n = mdp.num_states();
    let gamma = mdp.gamma();
    let offsets = mdp.offsets().clone();
    let mu = config.mu.clone().unwrap_or_else(|| instance.uniform_mu());
    let mut theta = config.theta0.clone().unwrap_or_else(|| PolicyLogits::zeros(mdp));
    let uniform_init = (0..n).all(|s| {
        let row = theta.row(s);
        row.iter().all(|&x| x == row[0])
    });
    let zero_init = theta.values().iter().all(|&x| x == 0.0);
    let v_star = value_iteration(mdp, config.eval_tol.min(1e-12), 1_000_000)?.v_star;
    let weights: Vec<f64> = instance
        .multiplicity
        .iter()
        .map(|&m| m as f64 / instance.total_states as f64)
        .collect();

    let monitored: Vec<StateId> = match (&config.monitor_states, &instance.hard) {
        (Some(states), _) => states.clone(),
        (None, Some(info)) => info.key_states(),
        (None, None) if n <= 64 => (0..n).collect(),
        (None, None) => Vec::new(),
    };
    let class_of = |s: StateId| instance.hard.as_ref().map(|h| h.labels[s]);
    let mut tracked: Vec<Tracked> = Vec::new();
    for &s in &monitored {
        for (name, threshold) in default_thresholds(instance, s) {
            tracked.push(Tracked {
                state: s,
                threshold,
                reachable: threshold < v_star[s] - 1e-9,
                class: class_of(s),
                name,
            });
        }
    }
    let mut crossings: Vec<CrossingRecord> = tracked
        .iter()
        .map(|tr| CrossingRecord {
            state: tr.state,
            label: instance.label(tr.state),
            class: tr.class,
            name: tr.name.clone(),
            threshold: tr.threshold,
            t: None,
            margin: None,
        })
        .collect();
    // Crossing record of the chain state two steps before each monitored primary state.
    let ordering_guard: Vec<(StateId, Option<usize>)> = monitored
        .iter()
        .filter_map(|&s| match class_of(s) {
            Some(StateClass::Primary(i)) => {
                let info = instance.hard.as_ref().unwrap();
                let earlier = info.chain_state(i - 2);
                let idx = crossings.iter().position(|r| r.state == earlier && r.name == "tau");
                Some((s, idx))
            }
            _ => None,
        })
        .collect();

    let mut ws = Workspace::new(mdp);
    let mut direction = vec![0.0; mdp.num_pairs()];
    let mut prev_v = vec![0.0; n];
    let mut prev_q = vec![0.0; mdp.num_pairs()];
    let mut monitor = InvariantMonitor::default();
    let mut snapshots = Vec::new();
    let mut next_sparse = config.snapshots.first_sparse();
    let policy_floor = (1.0 - gamma) / 2.0;
    let tol = config.eval_tol;
    let mut t: u64 = 0;

    let (stop_reason, sup, mean) = loop {
        softmax_rows(&offsets[..], theta.values(), &mut ws.pi).map_err(|e| Error::RunAborted {
            iteration: t,
            reason: e.to_string(),
        })?;
        ws.evaluate(mdp, mu.as_slice(), tol, config.solver)?;

        let mut sup = 0.0f64;
        let mut mean = 0.0;
        for s in 0..n {
            let gap = v_star[s] - ws.v[s];
            sup = sup.max(gap.abs());
            mean += weights[s] * gap;
        }

        for s in 0..n {
            let v = ws.v[s];
            monitor.nonnegativity.observe(v + ASCENT_TOL, || Witness {
                iter: t,
                state: Some(s),
                action: None,
                detail: format!("V = {v:e}"),
            });
            let row = theta.row(s);
            let total: f64 = row.iter().sum();
            monitor.zero_sum.observe(ZERO_SUM_TOL - total.abs(), || Witness {
                iter: t,
                state: Some(s),
                action: None,
                detail: format!("sum of logits = {total:e}"),
            });
            if t > 0 {
                let dv = v - prev_v[s];
                monitor.ascent_v.observe(dv + ASCENT_TOL, || Witness {
                    iter: t,
                    state: Some(s),
                    action: None,
                    detail: format!("V decreased by {:e}", -dv),
                });
                for k in mdp.pairs(s) {
                    let dq = ws.q[k] - prev_q[k];
                    monitor.ascent_q.observe(dq + ASCENT_TOL, || Witness {
                        iter: t,
                        state: Some(s),
                        action: Some(mdp.action_of(k)),
                        detail: format!("Q decreased by {:e}", -dq),
                    });
                }
            }
        }

        let mut crossed_now = false;
        for (tr, rec) in tracked.iter().zip(crossings.iter_mut()) {
            if rec.t.is_some() {
                continue;
            }
            let v = ws.v[tr.state];
            if v >= tr.threshold - 10.0 * tol {
                rec.t = Some(t);
                rec.margin = Some(v - tr.threshold);
                crossed_now = true;
                if tr.name == "tau" && matches!(tr.class, Some(StateClass::Primary(_))) {
                    let p1 = mdp.find_pair(tr.state, A1).map_or(0.0, |k| ws.pi[k]);
                    monitor.crossing_policy.observe(p1 - policy_floor, || Witness {
                        iter: t,
                        state: Some(tr.state),
                        action: Some(A1),
                        detail: format!("pi(a1|s) = {p1:e} at the crossing"),
                    });
                }
            }
        }

        for &(s, guard) in &ordering_guard {
            let active = match guard.and_then(|i| crossings[i].t) {
                None => true,
                Some(tc) => t <= tc,
            };
            if !active {
                continue;
            }
            let th = |a| mdp.find_pair(s, a).map(|k| theta.values()[k]);
            if let (Some(t0), Some(t1), Some(t2)) = (th(A0), th(A1), th(A2)) {
                let margin = (t0 - t2).min(t2).min(-t1) + ORDERING_TOL;
                monitor.initial_ordering.observe(margin, || Witness {
                    iter: t,
                    state: Some(s),
                    action: None,
                    detail: format!("theta = ({t0:e}, {t1:e}, {t2:e})"),
                });
            }
        }

        let stop = if config.stop_sup_error.is_some_and(|x| sup <= x) {
            Some(StopReason::SupThreshold)
        } else if config.stop_mean_error.is_some_and(|x| mean <= x) {
            Some(StopReason::MeanThreshold)
        } else if config.stop_when_crossed
            && tracked
                .iter()
                .zip(&crossings)
                .all(|(tr, rec)| !tr.reachable || rec.t.is_some())
        {
            Some(StopReason::AllCrossed)
        } else if t >= config.max_iter {
            Some(StopReason::MaxIter)
        } else {
            None
        };

        let policy = &config.snapshots;
        let dense = t <= policy.dense_until && t % policy.stride.max(1) == 0;
        let sparse = t == next_sparse;
        if sparse {
            next_sparse = policy.next_sparse(t);
        }
        if dense || sparse || crossed_now || stop.is_some() {
            snapshots.push(take_snapshot(instance, &ws, &theta, &monitored, t, sup, mean));
        }
        if let Some(reason) = stop {
            break (reason, sup, mean);
        }

        match algorithm {
            Algorithm::Pg => pg_direction(mdp, &ws, &instance.multiplicity, &mut direction),
            Algorithm::Npg => npg_direction(mdp, &ws, &mut direction),
        }
        hook(t, &mut direction);
        for (x, g) in theta.values_mut().iter_mut().zip(&direction) {
            *x += config.eta * g;
        }
        if let Some(k) = theta
            .values()
            .iter()
            .position(|x| !x.is_finite() || x.abs() > config.theta_limit)
        {
            return Err(Error::RunAborted {
                iteration: t + 1,
                reason: format!(
                    "logit {k} = {} exceeds the limit {}",
                    theta.values()[k],
                    config.theta_limit
                ),
            });
        }
        prev_v.copy_from_slice(&ws.v);
        prev_q.copy_from_slice(&ws.q);
        t += 1;
    };

    Ok(RunResult {
        algorithm,
        eta: config.eta,
        gamma,
        eval_tol: tol,
        max_iter: config.max_iter,
        total_states: instance.total_states,
        collapsed: instance.is_collapsed(),
        uniform_init,
        zero_init,
        hard: instance.hard.as_ref().map(|h| RunInstance {
            params: h.params.clone(),
            variant: h.variant,
            h: h.h(),
        }),
        monitored: monitored
            .iter()
            .map(|&s| MonitoredState {
                state: s,
                label: instance.label(s),
                class: class_of(s),
            })
            .collect(),
        stop_reason,
        iterations: t,
        final_sup_error: sup,
        final_mean_error: mean,
        crossings: CrossingTimeTable { records: crossings },
        invariants: monitor,
        wall_time_secs: started.elapsed().as_secs_f64(),
        snapshots,
    })
}

fn take_snapshot(
    instance: &Instance,
    ws: &Workspace,
    theta: &PolicyLogits,
    monitored: &[StateId],
    t: u64,
    sup: f64,
    mean: f64,
) -> IterationSnapshot {
    let mdp = &instance.mdp;
    let states = monitored
        .iter()
        .map(|&s| {
            let row = theta.row(s);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            StateSnapshot {
                state: s,
                actions: mdp.actions(s).to_vec(),
                v: ws.v[s],
                q: mdp.pairs(s).map(|k| ws.q[k]).collect(),
                theta: row.to_vec(),
                pi_hat: row.iter().map(|x| (x - max).exp()).collect(),
                pi_a1: mdp.find_pair(s, A1).map(|k| ws.pi[k]),
                d: ws.d[s] / instance.multiplicity[s] as f64,
            }
        })
        .collect();
    IterationSnapshot {
        iter: t,
        sup_error: sup,
        mean_error: mean,
        states,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hard::{collapsed_instance, HardMdpParams};
    use crate::mdp::ActionSpec;
    use crate::random::{random_logits, random_mdp, RandomMdpConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bandit() -> TabularMdp {
        // One decision state with two arms feeding an absorbing state.
        TabularMdp::new(
            0.9,
            vec![
                vec![
                    ActionSpec::new(0, 0.2, vec![(1, 1.0)]),
                    ActionSpec::new(1, 1.0, vec![(1, 1.0)]),
                ],
                vec![ActionSpec::new(0, 0.0, vec![(1, 1.0)])],
            ],
        )
        .unwrap()
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mdp = random_mdp(&mut rng, &RandomMdpConfig::default());
            let theta = random_logits(&mut rng, &mdp, 1.0);
            let g = pg_gradient(&mdp, &theta, &StateDist::uniform(mdp.num_states()), 1e-12).unwrap();
            for s in 0..mdp.num_states() {
                let total: f64 = mdp.pairs(s).map(|k| g[k]).sum();
                assert!(total.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn buffer_gradient_at_uniform_logits() {
        let inst = crate::hard::build_hard_mdp(&HardMdpParams::desk(0.9, 300, 4)).unwrap();
        let mdp = &inst.mdp;
        let mu = StateDist::uniform(mdp.num_states());
        let theta = PolicyLogits::zeros(mdp);
        let g = pg_gradient(mdp, &theta, &mu, 1e-13).unwrap();
        let pi = crate::mdp::softmax_policy(&theta).unwrap();
        let d = crate::eval::policy_evaluation(mdp, &pi, &mu, 1e-13).unwrap().visitation;
        let gamma: f64 = 0.9;
        let s1 = inst.layout.block(crate::hard::StateClass::Buffer(1)).unwrap().start;
        let k = mdp.find_pair(s1, crate::hard::A1).unwrap();
        let expected = 2.0 * gamma * gamma / (1.0 - gamma) * d.as_slice()[s1] * 0.25;
        assert!(g[k] > 0.0);
        assert!((g[k] - expected).abs() <= 1e-12 * expected.abs().max(1e-3));
        // single-action padding states have a zero coordinate
        let pad = inst.layout.block(crate::hard::StateClass::Padding).unwrap();
        for s in pad.start..pad.start + pad.len {
            assert_eq!(g[mdp.pairs(s).start], 0.0);
            assert_eq!(
                finite_difference_coordinate(mdp, &theta, &mu, 1e-6, mdp.pairs(s).start).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn finite_differences_converge_as_the_step_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mdp = random_mdp(&mut rng, &RandomMdpConfig::default());
        let theta = random_logits(&mut rng, &mdp, 1.0);
        let mu = StateDist::uniform(mdp.num_states());
        let g = pg_gradient(&mdp, &theta, &mu, 1e-14).unwrap();
        let err = |h: f64| {
            let fd = finite_difference_value(&mdp, &theta, &mu, h).unwrap();
            fd.iter().zip(&g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let (e4, e5, e6) = (err(1e-4), err(1e-5), err(1e-6));
        assert!(e5 < e4 && e6 < 1e-8, "{e4} {e5} {e6}");
    }

    #[test]
    fn zero_gradient_and_zero_advantage_are_fixed_points() {
        let mdp = bandit();
        let theta = PolicyLogits::from_flat(&mdp, vec![0.4, -0.4, 0.0]).unwrap();
        assert_eq!(pg_step(&theta, &[0.0; 3], 0.5).unwrap(), theta);
        // two identical arms have zero advantage everywhere
        let flat = TabularMdp::new(
            0.9,
            vec![
                vec![
                    ActionSpec::new(0, 0.5, vec![(1, 1.0)]),
                    ActionSpec::new(1, 0.5, vec![(1, 1.0)]),
                ],
                vec![ActionSpec::new(0, 0.0, vec![(1, 1.0)])],
            ],
        )
        .unwrap();
        let theta = PolicyLogits::from_flat(&flat, vec![1.0, -2.0, 0.0]).unwrap();
        let next = npg_step(&flat, &theta, 0.3, 1e-13).unwrap();
        for (a, b) in next.values().iter().zip(theta.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_bandit() {
        let mdp = bandit();
        let theta = PolicyLogits::from_flat(&mdp, vec![0.3, -0.1, 0.0]).unwrap();
        let mu = StateDist::uniform(2);
        let g = pg_gradient(&mdp, &theta, &mu, 1e-12).unwrap();
        let fd = finite_difference_value(&mdp, &theta, &mu, 1e-6).unwrap();
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        assert_eq!(fd[2], 0.0);
    }

    #[test]
    fn step_is_linear_and_keeps_row_sums() {
        let mdp = bandit();
        let theta = PolicyLogits::from_flat(&mdp, vec![0.5, -0.5, 0.0]).unwrap();
        let g = vec![0.25, -0.25, 0.0];
        assert_eq!(pg_step(&theta, &[0.0; 3], 0.7).unwrap(), theta);
        let one = pg_step(&theta, &g, 0.1).unwrap();
        let two = pg_step(&theta, &g, 0.2).unwrap();
        for k in 0..3 {
            let d1 = one.values()[k] - theta.values()[k];
            let d2 = two.values()[k] - theta.values()[k];
            assert_eq!(d2, 2.0 * d1);
        }
        assert!((one.row(0).iter().sum::<f64>()).abs() < 1e-12);
        assert!(matches!(
            pg_step(&theta, &[f64::INFINITY, 0.0, 0.0], 1.0),
            Err(Error::NonFiniteLogit { state: 0, slot: 0 })
        ));
    }

    #[test]
    fn npg_increases_the_better_arm_and_ignores_shifts() {
        let mdp = bandit();
        let mut theta = PolicyLogits::zeros(&mdp);
        let mut last = 0.5;
        for _ in 0..20 {
            theta = npg_step(&mdp, &theta, 0.05, 1e-12).unwrap();
            let pi = crate::mdp::softmax_policy(&theta).unwrap();
            assert!(pi.row(0)[1] > last);
            last = pi.row(0)[1];
        }
        let mut shifted = theta.clone();
        shifted.row_mut(0).iter_mut().for_each(|x| *x += 3.0);
        let a = crate::mdp::softmax_policy(&npg_step(&mdp, &theta, 0.05, 1e-12).unwrap()).unwrap();
        let b = crate::mdp::softmax_policy(&npg_step(&mdp, &shifted, 0.05, 1e-12).unwrap()).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn tiny_run_respects_max_iter() {
        let inst = collapsed_instance(&HardMdpParams::desk(0.9, 500, 4), Variant::Base).unwrap();
        let cfg = PgConfig::new(1e-3, 10);
        let res = run(&inst, &cfg, Algorithm::Pg).unwrap();
        assert_eq!(res.stop_reason, StopReason::MaxIter);
        assert_eq!(res.iterations, 10);
        assert_eq!(res.snapshots.len(), 11);
        assert!(res.invariants.ascent_v.holds());
    }

    #[test]
    fn crossing_at_time_zero_when_already_above() {
        let inst = collapsed_instance(&HardMdpParams::desk(0.9, 500, 4), Variant::Base).unwrap();
        let mut theta = PolicyLogits::zeros(&inst.mdp);
        let s1 = inst.hard.as_ref().unwrap().chain_state(1);
        theta.row_mut(s1).copy_from_slice(&[-10.0, 10.0]);
        let mut cfg = PgConfig::new(1e-3, 3);
        cfg.theta0 = Some(theta);
        let res = run(&inst, &cfg, Algorithm::Pg).unwrap();
        assert_eq!(res.crossings.t_chain(1), Some(0));
        assert!(!res.uniform_init);
    }

    #[test]
    fn regime_gate_on_stepsize() {
        let inst = collapsed_instance(&HardMdpParams::desk(0.9, 500, 4), Variant::Base).unwrap();
        let mut cfg = PgConfig::new(0.1, 3);
        cfg.enforce_paper_regime = true;
        assert!(matches!(run(&inst, &cfg, Algorithm::Pg), Err(Error::OutsideRegime(_))));
    }

    #[test]
    fn snapshot_schedule_is_dense_then_geometric() {
        let inst = collapsed_instance(&HardMdpParams::desk(0.9, 500, 4), Variant::Base).unwrap();
        let mut cfg = PgConfig::new(1e-3, 40).without_error_stops();
        cfg.snapshots = SnapshotPolicy {
            stride: 1,
            dense_until: 5,
            growth: 2.0,
        };
        cfg.monitor_states = Some(vec![0]);
        let res = run(&inst, &cfg, Algorithm::Pg).unwrap();
        let iters: Vec<u64> = res.snapshots.iter().map(|s| s.iter).collect();
        assert_eq!(iters, vec![0, 1, 2, 3, 4, 5, 6, 12, 24, 40]);
    }
}
