//! Seeded random MDPs, logits and policies for oracle tests and spot checks.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::mdp::{softmax_policy, ActionSpec, Policy, PolicyLogits, TabularMdp};

#[derive(Clone, Debug)]
pub struct RandomMdpConfig {
    pub states: usize,
    pub min_actions: usize,
    pub max_actions: usize,
    /// Successors per (state, action), capped at the number of states.
    pub successors: usize,
    pub gamma: f64,
}

impl Default for RandomMdpConfig {
    fn default() -> Self {
        Self {
            states: 5,
            min_actions: 1,
            max_actions: 3,
            successors: 3,
            gamma: 0.9,
        }
    }
}

/// Random MDP with rewards uniform in `[-1, 1]` and Dirichlet(1) transition rows.
pub fn random_mdp<R: Rng + ?Sized>(rng: &mut R, cfg: &RandomMdpConfig) -> TabularMdp {
    let n = cfg.states;
    let states = (0..n)
        .map(|_| {
            let count = rng.gen_range(cfg.min_actions..=cfg.max_actions);
            (0..count)
                .map(|a| {
                    let k = cfg.successors.clamp(1, n);
                    let targets = sample(rng, n, k).into_vec();
                    let weights: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
                    let total: f64 = weights.iter().sum();
                    let transitions = targets.into_iter().zip(weights.iter().map(|w| w / total)).collect();
                    ActionSpec::new(a, rng.gen_range(-1.0..=1.0), transitions)
                })
                .collect()
        })
        .collect();
    TabularMdp::new(cfg.gamma, states).expect("successors are in range by construction")
}

/// Logits with i.i.d. `N(0, scale^2)` entries.
pub fn random_logits<R: Rng + ?Sized>(rng: &mut R, mdp: &TabularMdp, scale: f64) -> PolicyLogits {
    let values = (0..mdp.num_pairs())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    PolicyLogits::from_flat(mdp, values).expect("length matches by construction")
}

pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, mdp: &TabularMdp, scale: f64) -> Policy {
    softmax_policy(&random_logits(rng, mdp, scale)).expect("finite logits")
}
