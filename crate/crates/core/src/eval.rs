//! Exact policy evaluation, discounted visitation and value iteration.
//!
//! Three interchangeable solvers back [`policy_evaluation_with`]:
//!
//! * `Topological`: direct substitution along the cached topological order.
//!   Valid whenever the only cycles are self-loops; costs one pass over the
//!   transition lists. This is the path the iteration engine uses on the hard
//!   instance.
//! * `Iterative`: Jacobi sweeps of the Bellman and visitation equations until
//!   the sup-norm change drops below the tolerance. Works on any MDP.
//! * `Dense`: LU solve of `(I - gamma P_pi)`; intended for small MDPs and as
//!   a near machine-precision oracle.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{ActionId, Policy, StateDist, TabularMdp};

const MAX_SWEEPS: usize = 5_000_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    /// Topological when the MDP admits it, iterative otherwise.
    #[default]
    Auto,
    Iterative,
    Topological,
    Dense,
}

/// `V^pi`, `Q^pi`, `A^pi` and `d_mu^pi` for one policy.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub v: Vec<f64>,
    /// Indexed by pair (see [`TabularMdp::pairs`]).
    pub q: Vec<f64>,
    pub adv: Vec<f64>,
    pub visitation: StateDist,
    /// Largest Bellman / visitation-equation residual of the returned solution.
    pub residual: f64,
}

/// Evaluates `pi` exactly (up to `tol`) with the automatically chosen solver.
pub fn policy_evaluation(mdp: &TabularMdp, pi: &Policy, mu: &StateDist, tol: f64) -> Result<EvalResult> {
    policy_evaluation_with(mdp, pi, mu, tol, Solver::Auto)
}

pub fn policy_evaluation_with(
    mdp: &TabularMdp,
    pi: &Policy,
    mu: &StateDist,
    tol: f64,
    solver: Solver,
) -> Result<EvalResult> {
    if !pi.matches(mdp) {
        return Err(Error::DimensionMismatch(
            "policy does not match the MDP action sets".into(),
        ));
    }
    let mut ws = Workspace::new(mdp);
    ws.pi.copy_from_slice(pi.probs());
    ws.evaluate(mdp, mu.as_slice(), tol, solver)?;
    let residual = ws.value_residual(mdp).max(ws.visitation_residual(mdp, mu.as_slice()));
    let adv = ws.advantages(mdp);
    Ok(EvalResult {
        v: ws.v,
        q: ws.q,
        adv,
        visitation: StateDist::from_raw(ws.d),
        residual,
    })
}

/// Reusable buffers for repeated evaluation of policies on one MDP.
#[derive(Clone, Debug)]
pub(crate) struct Workspace {
    pub pi: Vec<f64>,
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub d: Vec<f64>,
    scratch: Vec<f64>,
}

impl Workspace {
    pub fn new(mdp: &TabularMdp) -> Self {
        let n = mdp.num_states();
        Self {
            pi: vec![0.0; mdp.num_pairs()],
            v: vec![0.0; n],
            q: vec![0.0; mdp.num_pairs()],
            d: vec![0.0; n],
            scratch: vec![0.0; n],
        }
    }

    /// Fills `v`, `q` and `d` for the policy currently held in `pi`.
    pub fn evaluate(&mut self, mdp: &TabularMdp, mu: &[f64], tol: f64, solver: Solver) -> Result<()> {
        if !(tol > 0.0) {
            return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
        }
        if mu.len() != mdp.num_states() {
            return Err(Error::DimensionMismatch(format!(
                "initial distribution over {} states for an MDP with {}",
                mu.len(),
                mdp.num_states()
            )));
        }
        let solver = match solver {
            Solver::Auto if mdp.topological_order().is_some() => Solver::Topological,
            Solver::Auto => Solver::Iterative,
            other => other,
        };
        match solver {
            Solver::Topological => {
                let order = mdp.topological_order().ok_or_else(|| {
                    Error::InvalidInput("MDP has cycles beyond self-loops; topological solver unavailable".into())
                })?;
                self.values_topological(mdp, order);
                self.visitation_topological(mdp, order, mu);
            }
            Solver::Iterative => {
                self.values_iterative(mdp, tol)?;
                self.visitation_iterative(mdp, mu, tol)?;
            }
            Solver::Dense => self.solve_dense(mdp, mu)?,
            Solver::Auto => unreachable!(),
        }
        self.fill_q(mdp);
        Ok(())
    }

    fn values_topological(&mut self, mdp: &TabularMdp, order: &[usize]) {
        let gamma = mdp.gamma();
        for &s in order.iter().rev() {
            let mut num = 0.0;
            let mut self_mass = 0.0;
            for k in mdp.pairs(s) {
                let w = self.pi[k];
                let (next, prob) = mdp.successors(k);
                let mut future = 0.0;
                for (&t, &p) in next.iter().zip(prob) {
                    if t == s {
                        self_mass += w * p;
                    } else {
                        future += p * self.v[t];
                    }
                }
                num += w * (mdp.reward(k) + gamma * future);
            }
            self.v[s] = num / (1.0 - gamma * self_mass);
        }
    }

    fn visitation_topological(&mut self, mdp: &TabularMdp, order: &[usize], mu: &[f64]) {
        let gamma = mdp.gamma();
        let acc = &mut self.scratch;
        for (a, &m) in acc.iter_mut().zip(mu) {
            *a = (1.0 - gamma) * m;
        }
        for &s in order {
            let mut self_mass = 0.0;
            for k in mdp.pairs(s) {
                let (next, prob) = mdp.successors(k);
                for (&t, &p) in next.iter().zip(prob) {
                    if t == s {
                        self_mass += self.pi[k] * p;
                    }
                }
            }
            let ds = acc[s] / (1.0 - gamma * self_mass);
            self.d[s] = ds;
            if ds == 0.0 {
                continue;
            }
            for k in mdp.pairs(s) {
                let w = gamma * ds * self.pi[k];
                if w == 0.0 {
                    continue;
                }
                let (next, prob) = mdp.successors(k);
                for (&t, &p) in next.iter().zip(prob) {
                    if t != s {
                        acc[t] += w * p;
                    }
                }
            }
        }
    }

    fn values_iterative(&mut self, mdp: &TabularMdp, tol: f64) -> Result<()> {
        let gamma = mdp.gamma();
        self.v.iter_mut().for_each(|x| *x = 0.0);
        let mut residual = f64::INFINITY;
        for _ in 0..MAX_SWEEPS {
            residual = 0.0f64;
            for s in 0..mdp.num_states() {
                let mut acc = 0.0;
                for k in mdp.pairs(s) {
                    let (next, prob) = mdp.successors(k);
                    let future: f64 = next.iter().zip(prob).map(|(&t, &p)| p * self.v[t]).sum();
                    acc += self.pi[k] * (mdp.reward(k) + gamma * future);
                }
                self.scratch[s] = acc;
                residual = residual.max((acc - self.v[s]).abs());
            }
            std::mem::swap(&mut self.v, &mut self.scratch);
            if residual <= tol {
                return Ok(());
            }
        }
        Err(Error::NotConverged {
            iterations: MAX_SWEEPS,
            residual,
        })
    }

    fn visitation_iterative(&mut self, mdp: &TabularMdp, mu: &[f64], tol: f64) -> Result<()> {
        let gamma = mdp.gamma();
        self.d.copy_from_slice(mu);
        let mut residual = f64::INFINITY;
        for _ in 0..MAX_SWEEPS {
            for (x, &m) in self.scratch.iter_mut().zip(mu) {
                *x = (1.0 - gamma) * m;
            }
            for s in 0..mdp.num_states() {
                let ds = self.d[s];
                if ds == 0.0 {
                    continue;
                }
                for k in mdp.pairs(s) {
                    let w = gamma * ds * self.pi[k];
                    let (next, prob) = mdp.successors(k);
                    for (&t, &p) in next.iter().zip(prob) {
                        self.scratch[t] += w * p;
                    }
                }
            }
            residual = self
                .scratch
                .iter()
                .zip(&self.d)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            std::mem::swap(&mut self.d, &mut self.scratch);
            if residual <= tol {
                return Ok(());
            }
        }
        Err(Error::NotConverged {
            iterations: MAX_SWEEPS,
            residual,
        })
    }

    fn solve_dense(&mut self, mdp: &TabularMdp, mu: &[f64]) -> Result<()> {
        let n = mdp.num_states();
        let gamma = mdp.gamma();
        let mut a = DMatrix::<f64>::identity(n, n);
        let mut r = DVector::<f64>::zeros(n);
        for s in 0..n {
            for k in mdp.pairs(s) {
                let w = self.pi[k];
                r[s] += w * mdp.reward(k);
                let (next, prob) = mdp.successors(k);
                for (&t, &p) in next.iter().zip(prob) {
                    a[(s, t)] -= gamma * w * p;
                }
            }
        }
        let b = DVector::from_iterator(n, mu.iter().map(|m| (1.0 - gamma) * m));
        let at = a.transpose();
        let v = a
            .lu()
            .solve(&r)
            .ok_or_else(|| Error::InvalidInput("singular Bellman system".into()))?;
        let d = at
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::InvalidInput("singular visitation system".into()))?;
        self.v.copy_from_slice(v.as_slice());
        self.d.copy_from_slice(d.as_slice());
        Ok(())
    }

    fn fill_q(&mut self, mdp: &TabularMdp) {
        let gamma = mdp.gamma();
        for k in 0..mdp.num_pairs() {
            let (next, prob) = mdp.successors(k);
            let future: f64 = next.iter().zip(prob).map(|(&t, &p)| p * self.v[t]).sum();
            self.q[k] = mdp.reward(k) + gamma * future;
        }
    }

    pub fn advantages(&self, mdp: &TabularMdp) -> Vec<f64> {
        let mut adv = vec![0.0; mdp.num_pairs()];
        for s in 0..mdp.num_states() {
            for k in mdp.pairs(s) {
                adv[k] = self.q[k] - self.v[s];
            }
        }
        adv
    }

    /// `max_s |V(s) - sum_a pi(a|s) Q(s,a)|`, which equals the Bellman residual.
    pub fn value_residual(&self, mdp: &TabularMdp) -> f64 {
        (0..mdp.num_states())
            .map(|s| {
                let backup: f64 = mdp.pairs(s).map(|k| self.pi[k] * self.q[k]).sum();
                (backup - self.v[s]).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn visitation_residual(&self, mdp: &TabularMdp, mu: &[f64]) -> f64 {
        let gamma = mdp.gamma();
        let mut rhs: Vec<f64> = mu.iter().map(|m| (1.0 - gamma) * m).collect();
        for s in 0..mdp.num_states() {
            for k in mdp.pairs(s) {
                let w = gamma * self.d[s] * self.pi[k];
                let (next, prob) = mdp.successors(k);
                for (&t, &p) in next.iter().zip(prob) {
                    rhs[t] += w * p;
                }
            }
        }
        rhs.iter().zip(&self.d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// `V*`, `Q*` and the greedy policy (lowest action id among exact ties).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimalSolution {
    pub v_star: Vec<f64>,
    pub q_star: Vec<f64>,
    pub greedy: Vec<ActionId>,
    pub residual: f64,
    pub sweeps: usize,
}

/// Jacobi value iteration until the sup-norm Bellman-optimality residual is
/// at most `tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64, max_iter: usize) -> Result<OptimalSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    let n = mdp.num_states();
    let gamma = mdp.gamma();
    let mut v = vec![0.0; n];
    let mut q = vec![0.0; mdp.num_pairs()];
    let mut next_v = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for sweep in 1..=max_iter {
        residual = 0.0f64;
        for s in 0..n {
            let mut best = f64::NEG_INFINITY;
            for k in mdp.pairs(s) {
                let (next, prob) = mdp.successors(k);
                let future: f64 = next.iter().zip(prob).map(|(&t, &p)| p * v[t]).sum();
                q[k] = mdp.reward(k) + gamma * future;
                best = best.max(q[k]);
            }
            next_v[s] = best;
            residual = residual.max((best - v[s]).abs());
        }
        std::mem::swap(&mut v, &mut next_v);
        if residual <= tol {
            let greedy = (0..n)
                .map(|s| {
                    let mut pick: Option<(ActionId, f64)> = None;
                    for k in mdp.pairs(s) {
                        let a = mdp.action_of(k);
                        pick = match pick {
                            Some((ba, bq)) if bq > q[k] || (bq == q[k] && ba < a) => Some((ba, bq)),
                            _ => Some((a, q[k])),
                        };
                    }
                    pick.map(|(a, _)| a).unwrap_or(0)
                })
                .collect();
            return Ok(OptimalSolution {
                v_star: v,
                q_star: q,
                greedy,
                residual,
                sweeps: sweep,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{softmax_policy, ActionSpec, PolicyLogits};
    use crate::random::{random_logits, random_mdp, RandomMdpConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn absorbing() -> TabularMdp {
        TabularMdp::new(0.9, vec![vec![ActionSpec::new(0, 0.0, vec![(0, 1.0)])]]).unwrap()
    }

    #[test]
    fn absorbing_state_has_zero_value_and_full_visitation() {
        let mdp = absorbing();
        for solver in [Solver::Topological, Solver::Iterative, Solver::Dense] {
            let eval =
                policy_evaluation_with(&mdp, &Policy::uniform(&mdp), &StateDist::point(1, 0), 1e-12, solver).unwrap();
            assert_eq!(eval.v, vec![0.0]);
            assert!((eval.visitation.as_slice()[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nonpositive_tolerance_is_rejected() {
        let mdp = absorbing();
        let res = policy_evaluation(&mdp, &Policy::uniform(&mdp), &StateDist::point(1, 0), 0.0);
        assert!(matches!(res, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn policy_dimension_mismatch_is_rejected() {
        let mdp = absorbing();
        let other = TabularMdp::new(
            0.9,
            vec![vec![
                ActionSpec::new(0, 0.0, vec![(0, 1.0)]),
                ActionSpec::new(1, 0.0, vec![(0, 1.0)]),
            ]],
        )
        .unwrap();
        let res = policy_evaluation(&mdp, &Policy::uniform(&other), &StateDist::point(1, 0), 1e-9);
        assert!(matches!(res, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn topological_on_cyclic_mdp_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = random_mdp(&mut rng, &RandomMdpConfig::default());
        assert!(mdp.topological_order().is_none());
        let res = policy_evaluation_with(
            &mdp,
            &Policy::uniform(&mdp),
            &StateDist::uniform(mdp.num_states()),
            1e-10,
            Solver::Topological,
        );
        assert!(res.is_err());
    }

    #[test]
    fn iterative_and_dense_agree_on_random_mdps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mdp = random_mdp(&mut rng, &RandomMdpConfig::default());
            let pi = softmax_policy(&random_logits(&mut rng, &mdp, 1.5)).unwrap();
            let mu = StateDist::uniform(mdp.num_states());
            let a = policy_evaluation_with(&mdp, &pi, &mu, 1e-12, Solver::Iterative).unwrap();
            let b = policy_evaluation_with(&mdp, &pi, &mu, 1e-12, Solver::Dense).unwrap();
            assert!(a.residual <= 1e-11);
            for (x, y) in a.v.iter().zip(&b.v) {
                assert!((x - y).abs() < 1e-10);
            }
            let total: f64 = a.visitation.as_slice().iter().sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn value_iteration_reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mdp = random_mdp(&mut rng, &RandomMdpConfig::default());
        match value_iteration(&mdp, 1e-12, 3) {
            Err(Error::NotConverged { iterations, residual }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 1e-12);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn single_absorbing_state_has_zero_optimum() {
        let sol = value_iteration(&absorbing(), 1e-12, 10).unwrap();
        assert_eq!(sol.v_star, vec![0.0]);
        assert_eq!(sol.greedy, vec![0]);
    }

    #[test]
    fn greedy_ties_break_to_lowest_action() {
        let mdp = TabularMdp::new(
            0.9,
            vec![
                vec![
                    ActionSpec::new(2, 0.5, vec![(1, 1.0)]),
                    ActionSpec::new(1, 0.5, vec![(1, 1.0)]),
                ],
                vec![ActionSpec::new(0, 0.0, vec![(1, 1.0)])],
            ],
        )
        .unwrap();
        let sol = value_iteration(&mdp, 1e-12, 100).unwrap();
        assert_eq!(sol.greedy[0], 1);
    }

    #[test]
    fn value_iteration_matches_policy_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let cfg = RandomMdpConfig {
                states: 3,
                ..RandomMdpConfig::default()
            };
            let mdp = random_mdp(&mut rng, &cfg);
            let sol = value_iteration(&mdp, 1e-13, 100_000).unwrap();
            // Brute force: the optimum is attained by some deterministic policy.
            let n = mdp.num_states();
            let mut best = vec![f64::NEG_INFINITY; n];
            let mut choice = vec![0usize; n];
            loop {
                let actions: Vec<_> = (0..n).map(|s| mdp.actions(s)[choice[s]]).collect();
                let pi = Policy::deterministic(&mdp, &actions).unwrap();
                let eval = policy_evaluation_with(&mdp, &pi, &StateDist::uniform(n), 1e-12, Solver::Dense).unwrap();
                for s in 0..n {
                    best[s] = best[s].max(eval.v[s]);
                }
                let mut i = 0;
                while i < n {
                    choice[i] += 1;
                    if choice[i] < mdp.actions(i).len() {
                        break;
                    }
                    choice[i] = 0;
                    i += 1;
                }
                if i == n {
                    break;
                }
            }
            for s in 0..n {
                assert!((sol.v_star[s] - best[s]).abs() < 1e-10, "state {s}");
                let max_q = mdp.pairs(s).map(|k| sol.q_star[k]).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(sol.v_star[s], max_q);
            }
        }
    }

    #[test]
    fn zero_logits_give_uniform_policy_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mdp = random_mdp(&mut rng, &RandomMdpConfig::default());
        let pi = softmax_policy(&PolicyLogits::zeros(&mdp)).unwrap();
        assert_eq!(pi, Policy::uniform(&mdp));
    }
}
