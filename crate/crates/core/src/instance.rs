//! Execution instances and lumping of exchangeable states.
//!
//! An [`Instance`] is the MDP an algorithm actually iterates on, together with
//! the number of original states each of its states stands for. A fully
//! replicated hard instance has multiplicity one everywhere; its collapsed form
//! keeps one representative per class and carries the class size instead.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hard::{optimal_value_of, HardMdpParams, KeyParams, StateClass, StateLayout, Variant};
use crate::mdp::{ActionSpec, PolicyLogits, StateDist, StateId, TabularMdp};
use crate::numeric::neumaier_sum;

/// Hard-instance metadata attached to an execution instance.
#[derive(Clone, Debug)]
pub struct HardInfo {
    pub params: HardMdpParams,
    pub variant: Variant,
    pub layout: StateLayout,
    pub key: KeyParams,
    /// Class label of each execution state.
    pub labels: Vec<StateClass>,
    pub index_in_class: Vec<usize>,
    /// Execution id of chain state `s` (1-based): the first `S1`/`S2` copy
    /// for `s = 1, 2`, the primary state otherwise.
    pub chain: Vec<StateId>,
    /// Execution id of adjoint state `s̄` (1-based).
    pub adjoint: Vec<StateId>,
    pub collapsed: bool,
}

impl HardInfo {
    pub fn h(&self) -> usize {
        self.layout.h
    }

    pub fn chain_state(&self, s: usize) -> StateId {
        self.chain[s - 1]
    }

    pub fn adjoint_state(&self, s: usize) -> StateId {
        self.adjoint[s - 1]
    }

    /// Human-readable label such as `primary_3` or `buffer_1[4]`.
    pub fn label(&self, id: StateId) -> String {
        let class = self.labels[id];
        let size = self.layout.block(class).map_or(1, |b| b.len);
        if self.collapsed || size == 1 {
            class.to_string()
        } else {
            format!("{class}[{}]", self.index_in_class[id])
        }
    }

    /// Key states in chain order: `1, 2, 3, ..., H` then `1̄, ..., H̄`.
    pub fn key_states(&self) -> Vec<StateId> {
        self.chain.iter().chain(&self.adjoint).copied().collect()
    }

    /// Closed-form `V*` of every execution state (meaningful in the regime
    /// `gamma^(2H) >= 2/3`; no check is made here).
    pub fn predicted_optimal(&self) -> Vec<f64> {
        self.labels
            .iter()
            .map(|&c| optimal_value_of(c, self.params.gamma))
            .collect()
    }
}

/// The MDP an algorithm runs on, with per-state multiplicities.
#[derive(Clone, Debug)]
pub struct Instance {
    pub mdp: TabularMdp,
    pub multiplicity: Vec<usize>,
    /// Number of original states, `sum(multiplicity)`.
    pub total_states: usize,
    pub hard: Option<HardInfo>,
}

impl Instance {
    /// Wraps an arbitrary MDP: every state stands for itself.
    pub fn generic(mdp: TabularMdp) -> Self {
        let n = mdp.num_states();
        Self {
            mdp,
            multiplicity: vec![1; n],
            total_states: n,
            hard: None,
        }
    }

    /// The uniform distribution over original states, expressed on the
    /// execution states (`multiplicity / total_states`).
    pub fn uniform_mu(&self) -> StateDist {
        let total = self.total_states as f64;
        StateDist::from_raw(self.multiplicity.iter().map(|&m| m as f64 / total).collect())
    }

    pub fn is_collapsed(&self) -> bool {
        self.multiplicity.iter().any(|&m| m != 1)
    }

    pub fn label(&self, id: StateId) -> String {
        match &self.hard {
            Some(h) => h.label(id),
            None => format!("s{id}"),
        }
    }
}

/// Full-state to representative mapping produced by [`collapse`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapsedMap {
    pub rep_of: Vec<StateId>,
    pub weight: Vec<usize>,
}

impl CollapsedMap {
    pub fn num_full(&self) -> usize {
        self.rep_of.len()
    }

    /// Copies a per-representative quantity onto every full state.
    pub fn expand_states(&self, per_rep: &[f64]) -> Vec<f64> {
        self.rep_of.iter().map(|&r| per_rep[r]).collect()
    }

    /// Per-copy share of a class-level quantity (e.g. visitation).
    pub fn per_copy(&self, per_rep: &[f64]) -> Vec<f64> {
        per_rep.iter().zip(&self.weight).map(|(x, &w)| x / w as f64).collect()
    }

    /// Logits on the full MDP with every copy carrying its representative's row.
    pub fn expand_logits(&self, full: &TabularMdp, collapsed: &PolicyLogits) -> Result<PolicyLogits> {
        let rows: Vec<Vec<f64>> = self.rep_of.iter().map(|&r| collapsed.row(r).to_vec()).collect();
        PolicyLogits::from_rows(full, &rows)
    }

    /// Logits on the collapsed MDP, refusing when copies of one class differ.
    pub fn collapse_logits(&self, collapsed: &TabularMdp, full: &PolicyLogits) -> Result<PolicyLogits> {
        let mut rows: Vec<Option<&[f64]>> = vec![None; self.weight.len()];
        for (s, &r) in self.rep_of.iter().enumerate() {
            match rows[r] {
                None => rows[r] = Some(full.row(s)),
                Some(row) if row == full.row(s) => {}
                Some(_) => {
                    return Err(Error::Collapse(format!(
                        "state {s} has logits differing from its class representative"
                    )))
                }
            }
        }
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r.unwrap_or_default().to_vec()).collect();
        PolicyLogits::from_rows(collapsed, &rows)
    }
}

/// Result of lumping a fully replicated hard instance.
#[derive(Clone, Debug)]
pub struct Collapsed {
    pub instance: Instance,
    pub map: CollapsedMap,
    /// Class weights over the total state count.
    pub mu: StateDist,
    pub theta0: PolicyLogits,
}

/// Lumps every class of a fully replicated hard instance into one
/// representative, after checking that the copies are exchangeable.
pub fn collapse(full: &Instance, theta0: &PolicyLogits) -> Result<Collapsed> {
    let hard = full
        .hard
        .as_ref()
        .ok_or_else(|| Error::Collapse("only hard instances carry class labels".into()))?;
    if hard.collapsed {
        return Err(Error::Collapse("instance is already collapsed".into()));
    }
    if !theta0.matches(&full.mdp) {
        return Err(Error::DimensionMismatch("initial logits do not match the MDP".into()));
    }
    let mut class_rep: BTreeMap<StateClass, StateId> = BTreeMap::new();
    let mut order = Vec::new();
    let rep_of: Vec<StateId> = hard
        .labels
        .iter()
        .map(|&c| {
            let next = class_rep.len();
            *class_rep.entry(c).or_insert_with(|| {
                order.push(c);
                next
            })
        })
        .collect();
    let mut members: Vec<Vec<StateId>> = vec![Vec::new(); class_rep.len()];
    for (s, &r) in rep_of.iter().enumerate() {
        members[r].push(s);
    }
    let weight: Vec<usize> = members.iter().map(Vec::len).collect();
    let map = CollapsedMap { rep_of, weight };

    let lumped_row = |s: StateId| -> Vec<ActionSpec> {
        full.mdp
            .pairs(s)
            .map(|k| {
                let mut merged: BTreeMap<StateId, Vec<f64>> = BTreeMap::new();
                let (next, prob) = full.mdp.successors(k);
                for (&t, &p) in next.iter().zip(prob) {
                    merged.entry(map.rep_of[t]).or_default().push(p);
                }
                let mut transitions: Vec<(StateId, f64)> =
                    merged.into_iter().map(|(t, ps)| (t, neumaier_sum(ps))).collect();
                let total = neumaier_sum(transitions.iter().map(|&(_, p)| p));
                for (_, p) in &mut transitions {
                    *p /= total;
                }
                ActionSpec::new(full.mdp.action_of(k), full.mdp.reward(k), transitions)
            })
            .collect()
    };
    let mut states = Vec::with_capacity(members.len());
    for group in &members {
        let rep_row = lumped_row(group[0]);
        for &s in &group[1..] {
            if !rows_match(&rep_row, &lumped_row(s)) {
                return Err(Error::Collapse(format!(
                    "state {s} is not exchangeable with state {}",
                    group[0]
                )));
            }
        }
        states.push(rep_row);
    }
    let mdp = TabularMdp::new(full.mdp.gamma(), states)?;
    let theta = map.collapse_logits(&mdp, theta0)?;

    let rep = |class: StateClass| class_rep[&class];
    let chain = (1..=hard.h()).map(|s| rep(hard.labels[hard.chain_state(s)])).collect();
    let adjoint = (1..=hard.h())
        .map(|s| rep(hard.labels[hard.adjoint_state(s)]))
        .collect();
    let instance = Instance {
        mdp,
        multiplicity: map.weight.clone(),
        total_states: full.total_states,
        hard: Some(HardInfo {
            params: hard.params.clone(),
            variant: hard.variant,
            layout: hard.layout.clone(),
            key: hard.key.clone(),
            labels: order,
            index_in_class: vec![0; map.weight.len()],
            chain,
            adjoint,
            collapsed: true,
        }),
    };
    let mu = instance.uniform_mu();
    Ok(Collapsed {
        instance,
        map,
        mu,
        theta0: theta,
    })
}

fn rows_match(a: &[ActionSpec], b: &[ActionSpec]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.action == y.action
                && x.reward.to_bits() == y.reward.to_bits()
                && x.transitions.len() == y.transitions.len()
                && x.transitions
                    .iter()
                    .zip(&y.transitions)
                    .all(|(&(s, p), &(t, q))| s == t && (p - q).abs() <= 1e-12)
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hard::{build_variant, collapsed_instance};

    fn small() -> HardMdpParams {
        let mut p = HardMdpParams::desk(0.9, 1000, 5);
        p.c_b1 = 0.05;
        p
    }

    #[test]
    fn collapse_matches_direct_collapsed_build() {
        for variant in [Variant::Base, Variant::Modified] {
            let hard = build_variant(&small(), variant).unwrap();
            let full = hard.full();
            let lumped = collapse(&full, &PolicyLogits::zeros(&full.mdp)).unwrap();
            let direct = collapsed_instance(&small(), variant).unwrap();
            assert_eq!(lumped.instance.multiplicity, direct.multiplicity);
            assert_eq!(
                lumped.instance.hard.as_ref().unwrap().labels,
                direct.hard.as_ref().unwrap().labels
            );
            let a = lumped.instance.mdp.to_specs();
            let b = direct.mdp.to_specs();
            for (ra, rb) in a.iter().zip(&b) {
                assert!(rows_match(ra, rb));
            }
            assert_eq!(lumped.map.weight.iter().sum::<usize>(), 1000);
            let mass = neumaier_sum(lumped.mu.as_slice().iter().copied());
            assert!((mass - 1.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn buffer_class_weight_and_per_copy_share() {
        let mut p = small();
        p.c_b1 = 5.0 / (0.1 * 1000.0);
        let hard = build_variant(&p, Variant::Base).unwrap();
        assert_eq!(hard.layout.s1_size, 5);
        let lumped = collapse(&hard.full(), &PolicyLogits::zeros(&hard.mdp)).unwrap();
        let info = lumped.instance.hard.as_ref().unwrap();
        let s1 = info.chain_state(1);
        assert_eq!(lumped.map.weight[s1], 5);
        let mut d = vec![0.0; lumped.map.weight.len()];
        d[s1] = 0.5;
        assert_eq!(lumped.map.per_copy(&d)[s1], 0.1);
        let pad = info.labels.iter().position(|c| *c == StateClass::Padding).unwrap();
        assert_eq!(lumped.map.weight[pad], hard.layout.padding);
        assert_eq!(
            lumped.instance.mdp.successors(lumped.instance.mdp.pairs(pad).start).0,
            &[pad]
        );
    }

    #[test]
    fn differing_logits_within_a_class_are_refused() {
        let hard = build_variant(&small(), Variant::Base).unwrap();
        let mut theta = PolicyLogits::zeros(&hard.mdp);
        let s1 = hard.layout.block(StateClass::Buffer(1)).unwrap();
        assert!(s1.len >= 2);
        theta.row_mut(s1.start + 1)[0] = 0.25;
        assert!(matches!(collapse(&hard.full(), &theta), Err(Error::Collapse(_))));
    }

    #[test]
    fn expand_then_collapse_is_identity() {
        let hard = build_variant(&small(), Variant::Modified).unwrap();
        let full = hard.full();
        let lumped = collapse(&full, &PolicyLogits::zeros(&full.mdp)).unwrap();
        let mut theta = PolicyLogits::zeros(&lumped.instance.mdp);
        for (i, x) in theta.values_mut().iter_mut().enumerate() {
            *x = (i as f64).sin();
        }
        let expanded = lumped.map.expand_logits(&full.mdp, &theta).unwrap();
        let back = lumped.map.collapse_logits(&lumped.instance.mdp, &expanded).unwrap();
        assert_eq!(back.values(), theta.values());
        let relabeled: Vec<StateClass> = lumped
            .map
            .rep_of
            .iter()
            .map(|&r| lumped.instance.hard.as_ref().unwrap().labels[r])
            .collect();
        assert_eq!(relabeled, full.hard.as_ref().unwrap().labels);
    }
}
