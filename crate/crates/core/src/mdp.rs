//! Finite discounted MDPs with sparse per-(state, action) transitions.
//!
//! Storage is flattened: every (state, action) pair gets a global *pair index*
//! `k`, with the pairs of state `s` occupying `offsets[s]..offsets[s + 1]`.
//! Logits, policies, Q-values and gradients all use the same pair indexing, so
//! they can be shared across the evaluator and the iteration engine without
//! per-step allocation.

use std::fmt;
use std::ops::Range;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::neumaier_sum;

pub type StateId = usize;
pub type ActionId = usize;

/// Row-sum tolerance used by every stochasticity check in the crate.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// One action available in a state: its label, reward and sparse successor list.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSpec {
    pub action: ActionId,
    pub reward: f64,
    pub transitions: Vec<(StateId, f64)>,
}

impl ActionSpec {
    pub fn new(action: ActionId, reward: f64, transitions: Vec<(StateId, f64)>) -> Self {
        Self {
            action,
            reward,
            transitions,
        }
    }
}

/// A finite MDP `(S, {A_s}, P, r, gamma)`. Immutable after construction.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    gamma: f64,
    offsets: Arc<[usize]>,
    actions: Vec<ActionId>,
    rewards: Vec<f64>,
    trans_offsets: Vec<usize>,
    trans_next: Vec<StateId>,
    trans_prob: Vec<f64>,
    topo: OnceLock<Option<Arc<[StateId]>>>,
}

impl TabularMdp {
    /// Builds an MDP from per-state action lists.
    ///
    /// Only structural errors (successor ids out of range, non-finite gamma)
    /// are rejected here; the modelling invariants are reported by
    /// [`validate_mdp`] so that malformed inputs can still be inspected.
    pub fn new(gamma: f64, states: Vec<Vec<ActionSpec>>) -> Result<Self> {
        if !gamma.is_finite() {
            return Err(Error::InvalidInput(format!("gamma {gamma} is not finite")));
        }
        let n = states.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        let mut trans_offsets = vec![0];
        let mut trans_next = Vec::new();
        let mut trans_prob = Vec::new();
        offsets.push(0);
        for (s, specs) in states.into_iter().enumerate() {
            for spec in specs {
                actions.push(spec.action);
                rewards.push(spec.reward);
                for (next, p) in spec.transitions {
                    if next >= n {
                        return Err(Error::InvalidInput(format!(
                            "state {s} action {} transitions to state {next}, but only {n} states exist",
                            spec.action
                        )));
                    }
                    trans_next.push(next);
                    trans_prob.push(p);
                }
                trans_offsets.push(trans_next.len());
            }
            offsets.push(actions.len());
        }
        Ok(Self {
            gamma,
            offsets: offsets.into(),
            actions,
            rewards,
            trans_offsets,
            trans_next,
            trans_prob,
            topo: OnceLock::new(),
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn num_states(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Total number of (state, action) pairs.
    pub fn num_pairs(&self) -> usize {
        self.actions.len()
    }

    pub(crate) fn offsets(&self) -> &Arc<[usize]> {
        &self.offsets
    }

    /// Pair indices belonging to state `s`.
    #[inline]
    pub fn pairs(&self, s: StateId) -> Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    pub fn actions(&self, s: StateId) -> &[ActionId] {
        &self.actions[self.pairs(s)]
    }

    #[inline]
    pub fn action_of(&self, k: usize) -> ActionId {
        self.actions[k]
    }

    #[inline]
    pub fn reward(&self, k: usize) -> f64 {
        self.rewards[k]
    }

    /// Successor states and probabilities of pair `k`.
    #[inline]
    pub fn successors(&self, k: usize) -> (&[StateId], &[f64]) {
        let range = self.trans_offsets[k]..self.trans_offsets[k + 1];
        (&self.trans_next[range.clone()], &self.trans_prob[range])
    }

    /// Pair index of action `a` in state `s`, if available.
    pub fn find_pair(&self, s: StateId, a: ActionId) -> Option<usize> {
        self.pairs(s).find(|&k| self.actions[k] == a)
    }

    /// Reconstructs the per-state action lists.
    pub fn to_specs(&self) -> Vec<Vec<ActionSpec>> {
        (0..self.num_states())
            .map(|s| {
                self.pairs(s)
                    .map(|k| {
                        let (next, prob) = self.successors(k);
                        ActionSpec::new(
                            self.actions[k],
                            self.rewards[k],
                            next.iter().copied().zip(prob.iter().copied()).collect(),
                        )
                    })
                    .collect()
            })
            .collect()
    }

    /// Copy of this MDP with the reward of `(s, a)` replaced.
    pub fn with_reward(&self, s: StateId, a: ActionId, reward: f64) -> Result<Self> {
        let k = self
            .find_pair(s, a)
            .ok_or_else(|| Error::InvalidInput(format!("state {s} has no action {a}")))?;
        let mut out = self.clone();
        out.rewards[k] = reward;
        Ok(out)
    }

    /// A topological order of the states (sources first) of the graph that has
    /// an edge `s -> s'` whenever some action of `s` reaches `s' != s` with
    /// positive probability. Self-loops are allowed anywhere. `None` when the
    /// graph has a cycle of length two or more. Computed once and cached.
    pub fn topological_order(&self) -> Option<&[StateId]> {
        self.topo
            .get_or_init(|| self.compute_topological_order().map(Arc::from))
            .as_deref()
    }

    fn compute_topological_order(&self) -> Option<Vec<StateId>> {
        let n = self.num_states();
        let mut indegree = vec![0usize; n];
        let mut edges: Vec<Vec<StateId>> = vec![Vec::new(); n];
        for s in 0..n {
            for k in self.pairs(s) {
                let (next, prob) = self.successors(k);
                for (&t, &p) in next.iter().zip(prob) {
                    if t != s && p > 0.0 && !edges[s].contains(&t) {
                        edges[s].push(t);
                        indegree[t] += 1;
                    }
                }
            }
        }
        let mut order = Vec::with_capacity(n);
        let mut stack: Vec<StateId> = (0..n).rev().filter(|&s| indegree[s] == 0).collect();
        while let Some(s) = stack.pop() {
            order.push(s);
            for &t in &edges[s] {
                indegree[t] -= 1;
                if indegree[t] == 0 {
                    stack.push(t);
                }
            }
        }
        (order.len() == n).then_some(order)
    }
}

/// Which invariant a [`Violation`] breaks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Discount,
    EmptyActionSet,
    DuplicateAction,
    NonFinite,
    NegativeProbability,
    RowSum,
    RewardRange,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Rule::Discount => "discount",
            Rule::EmptyActionSet => "empty-action-set",
            Rule::DuplicateAction => "duplicate-action",
            Rule::NonFinite => "non-finite",
            Rule::NegativeProbability => "negative-probability",
            Rule::RowSum => "row-sum",
            Rule::RewardRange => "reward-range",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub state: Option<StateId>,
    pub action: Option<ActionId>,
    pub rule: Rule,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, rule: Rule) -> usize {
        self.violations.iter().filter(|v| v.rule == rule).count()
    }
}

/// Checks every modelling invariant of [`TabularMdp`] and lists the failures.
pub fn validate_mdp(mdp: &TabularMdp) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |state, action, rule, detail: String| {
        violations.push(Violation {
            state,
            action,
            rule,
            detail,
        })
    };
    let gamma = mdp.gamma();
    if !(gamma > 0.0 && gamma < 1.0) {
        push(None, None, Rule::Discount, format!("gamma {gamma} not in (0, 1)"));
    }
    for s in 0..mdp.num_states() {
        let acts = mdp.actions(s);
        if acts.is_empty() {
            push(Some(s), None, Rule::EmptyActionSet, "no actions".into());
        }
        for (i, a) in acts.iter().enumerate() {
            if acts[..i].contains(a) {
                push(Some(s), Some(*a), Rule::DuplicateAction, "repeated action id".into());
            }
        }
        for k in mdp.pairs(s) {
            let a = mdp.action_of(k);
            let r = mdp.reward(k);
            if !r.is_finite() {
                push(Some(s), Some(a), Rule::NonFinite, format!("reward {r}"));
            } else if !(-1.0..=1.0).contains(&r) {
                push(
                    Some(s),
                    Some(a),
                    Rule::RewardRange,
                    format!("reward {r} outside [-1, 1]"),
                );
            }
            let (_, prob) = mdp.successors(k);
            if prob.iter().any(|p| !p.is_finite()) {
                push(Some(s), Some(a), Rule::NonFinite, "non-finite probability".into());
                continue;
            }
            if let Some(p) = prob.iter().find(|&&p| p < 0.0) {
                push(Some(s), Some(a), Rule::NegativeProbability, format!("probability {p}"));
            }
            let total = neumaier_sum(prob.iter().copied());
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                push(Some(s), Some(a), Rule::RowSum, format!("row sums to {total}"));
            }
        }
    }
    ValidationReport { violations }
}

/// Softmax logits `theta(s, .)`, one entry per available action.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyLogits {
    offsets: Arc<[usize]>,
    values: Vec<f64>,
}

impl PolicyLogits {
    pub fn zeros(mdp: &TabularMdp) -> Self {
        Self {
            offsets: mdp.offsets().clone(),
            values: vec![0.0; mdp.num_pairs()],
        }
    }

    /// Logits laid out in pair order.
    pub fn from_flat(mdp: &TabularMdp, values: Vec<f64>) -> Result<Self> {
        if values.len() != mdp.num_pairs() {
            return Err(Error::DimensionMismatch(format!(
                "{} logits for {} state-action pairs",
                values.len(),
                mdp.num_pairs()
            )));
        }
        Ok(Self {
            offsets: mdp.offsets().clone(),
            values,
        })
    }

    pub fn from_rows(mdp: &TabularMdp, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != mdp.num_states() {
            return Err(Error::DimensionMismatch(format!(
                "{} logit rows for {} states",
                rows.len(),
                mdp.num_states()
            )));
        }
        for (s, row) in rows.iter().enumerate() {
            if row.len() != mdp.actions(s).len() {
                return Err(Error::DimensionMismatch(format!(
                    "state {s}: {} logits for {} actions",
                    row.len(),
                    mdp.actions(s).len()
                )));
            }
        }
        Self::from_flat(mdp, rows.concat())
    }

    pub fn num_states(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, s: StateId) -> &[f64] {
        &self.values[self.offsets[s]..self.offsets[s + 1]]
    }

    pub fn row_mut(&mut self, s: StateId) -> &mut [f64] {
        &mut self.values[self.offsets[s]..self.offsets[s + 1]]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn matches(&self, mdp: &TabularMdp) -> bool {
        self.offsets[..] == mdp.offsets()[..]
    }

    pub(crate) fn offsets(&self) -> &Arc<[usize]> {
        &self.offsets
    }
}

/// Action probabilities `pi(. | s)` for every state.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    offsets: Arc<[usize]>,
    probs: Vec<f64>,
}

impl Policy {
    pub fn uniform(mdp: &TabularMdp) -> Self {
        let mut probs = vec![0.0; mdp.num_pairs()];
        for s in 0..mdp.num_states() {
            let range = mdp.pairs(s);
            let w = 1.0 / range.len() as f64;
            probs[range].iter_mut().for_each(|p| *p = w);
        }
        Self {
            offsets: mdp.offsets().clone(),
            probs,
        }
    }

    /// Deterministic policy picking action `choice[s]` (an action id) in each state.
    pub fn deterministic(mdp: &TabularMdp, choice: &[ActionId]) -> Result<Self> {
        if choice.len() != mdp.num_states() {
            return Err(Error::DimensionMismatch("one action per state required".into()));
        }
        let mut probs = vec![0.0; mdp.num_pairs()];
        for (s, &a) in choice.iter().enumerate() {
            let k = mdp
                .find_pair(s, a)
                .ok_or_else(|| Error::InvalidInput(format!("state {s} has no action {a}")))?;
            probs[k] = 1.0;
        }
        Ok(Self {
            offsets: mdp.offsets().clone(),
            probs,
        })
    }

    pub fn from_rows(mdp: &TabularMdp, rows: &[Vec<f64>]) -> Result<Self> {
        let logits = PolicyLogits::from_rows(mdp, rows)?;
        let policy = Self {
            offsets: logits.offsets,
            probs: logits.values,
        };
        for s in 0..policy.num_states() {
            let row = policy.row(s);
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "state {s}: negative or non-finite probability"
                )));
            }
            let total = neumaier_sum(row.iter().copied());
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidInput(format!("state {s}: probabilities sum to {total}")));
            }
        }
        Ok(policy)
    }

    pub fn num_states(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, s: StateId) -> &[f64] {
        &self.probs[self.offsets[s]..self.offsets[s + 1]]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn matches(&self, mdp: &TabularMdp) -> bool {
        self.offsets[..] == mdp.offsets()[..]
    }
}

/// Writes the max-shifted softmax of every row of `logits` into `out`.
pub(crate) fn softmax_rows(offsets: &[usize], logits: &[f64], out: &mut [f64]) -> Result<()> {
    for s in 0..offsets.len() - 1 {
        let range = offsets[s]..offsets[s + 1];
        let row = &logits[range.clone()];
        let dst = &mut out[range];
        let mut max = f64::NEG_INFINITY;
        for (slot, &x) in row.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFiniteLogit { state: s, slot });
            }
            max = max.max(x);
        }
        let mut total = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    Ok(())
}

/// `pi(a|s) = exp(theta(s,a)) / sum_a' exp(theta(s,a'))`, max-shifted per row.
pub fn softmax_policy(theta: &PolicyLogits) -> Result<Policy> {
    let mut probs = vec![0.0; theta.values.len()];
    softmax_rows(&theta.offsets, &theta.values, &mut probs)?;
    Ok(Policy {
        offsets: theta.offsets.clone(),
        probs,
    })
}

/// A probability vector over states (initial distributions and visitation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateDist(Vec<f64>);

impl StateDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput(
                "distribution has a negative or non-finite entry".into(),
            ));
        }
        let total = neumaier_sum(probs.iter().copied());
        if (total - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidInput(format!("distribution sums to {total}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn point(n: usize, s: StateId) -> Self {
        let mut probs = vec![0.0; n];
        probs[s] = 1.0;
        Self(probs)
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total = neumaier_sum(weights.iter().copied());
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidInput("weights must have positive finite mass".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}
