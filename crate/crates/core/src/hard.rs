//! The chain-like hard MDP and its modified variant.
//!
//! State ids follow a fixed block order: the absorbing state `0`, primary
//! states `3..=H`, adjoint states `1̄..=H̄`, buffer classes `S1` and `S2`,
//! booster classes `Ŝ_1..Ŝ_H` then `Ŝ_1̄..Ŝ_H̄`, and finally padding copies of
//! the absorbing state that bring the total to exactly the requested size.
//!
//! Actions are labelled `a0 = 0`, `a1 = 1`, `a2 = 2`; `a1` is the optimal
//! action everywhere outside the absorbing states.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{HardInfo, Instance};
use crate::mdp::{ActionSpec, StateId, TabularMdp};
use crate::numeric::round_size;

pub const A0: usize = 0;
pub const A1: usize = 1;
pub const A2: usize = 2;

/// Slack added before flooring `c_h / (1 - gamma)` so that products such as
/// `0.18 / 0.01` are not pushed below an integer by rounding.
const HORIZON_FLOOR_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Base,
    /// Boosters of primary and adjoint states gain a suboptimal action `a0`.
    Modified,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Base => "base",
            Variant::Modified => "modified",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "modified" => Ok(Variant::Modified),
            other => Err(Error::InvalidInput(format!("unknown variant `{other}`"))),
        }
    }
}

/// Construction constants of the hard instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardMdpParams {
    pub gamma: f64,
    pub target_size: usize,
    pub c_h: f64,
    pub c_b1: f64,
    pub c_b2: f64,
    pub c_m: f64,
    pub c_p: f64,
    pub enforce_paper_regime: bool,
}

/// One condition of the constant regime under which the lower-bound analysis holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeCondition {
    pub name: String,
    pub holds: bool,
}

impl HardMdpParams {
    /// Desk-scale constants with the horizon pinned to `h`.
    pub fn desk(gamma: f64, target_size: usize, h: usize) -> Self {
        Self {
            gamma,
            target_size,
            c_h: (h as f64 + 0.5) * (1.0 - gamma),
            c_b1: 0.05,
            c_b2: 0.8,
            c_m: 0.1,
            c_p: 0.1,
            enforce_paper_regime: false,
        }
    }

    /// `p = c_p (1 - gamma)`.
    pub fn p(&self) -> f64 {
        self.c_p * (1.0 - self.gamma)
    }

    pub fn horizon(&self) -> usize {
        let raw = (self.c_h / (1.0 - self.gamma) + HORIZON_FLOOR_SLACK).floor();
        (raw.max(0.0) as usize).max(3)
    }

    /// Status of each constant condition of the lower-bound regime (the
    /// stepsize condition lives on the run configuration).
    pub fn regime_conditions(&self) -> Vec<RegimeCondition> {
        let ratio2 = self.c_b2 / self.c_m;
        [
            ("gamma > 0.96", self.gamma > 0.96),
            ("c_m < 1", self.c_m < 1.0),
            ("c_h < 0.19", self.c_h < 0.19),
            ("c_b1 / c_m <= 1/79776", self.c_b1 / self.c_m <= 1.0 / 79776.0),
            ("8 <= c_b2 / c_m <= 15", (8.0..=15.0).contains(&ratio2)),
            ("c_p < 1/2016", self.c_p < 1.0 / 2016.0),
        ]
        .into_iter()
        .map(|(name, holds)| RegimeCondition {
            name: name.to_string(),
            holds,
        })
        .collect()
    }

    pub fn in_paper_regime(&self) -> bool {
        self.regime_conditions().iter().all(|c| c.holds)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidInput(format!("gamma {} not in (0, 1)", self.gamma)));
        }
        for (name, v) in [
            ("c_h", self.c_h),
            ("c_b1", self.c_b1),
            ("c_b2", self.c_b2),
            ("c_m", self.c_m),
            ("c_p", self.c_p),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        let p = self.p();
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidInput(format!("p = c_p (1 - gamma) = {p} not in (0, 1)")));
        }
        if self.enforce_paper_regime {
            let failing: Vec<String> = self
                .regime_conditions()
                .into_iter()
                .filter(|c| !c.holds)
                .map(|c| c.name)
                .collect();
            if !failing.is_empty() {
                return Err(Error::OutsideRegime(failing.join(", ")));
            }
        }
        Ok(())
    }
}

/// Target of a booster class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BoosterTarget {
    /// `Ŝ_s`: feeds buffer class `S_s` for `s = 1, 2`, primary state `s` otherwise.
    Chain(usize),
    /// `Ŝ_s̄`: feeds adjoint state `s̄`.
    Adjoint(usize),
}

/// Class label of a state of the hard instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StateClass {
    Absorbing,
    Primary(usize),
    Adjoint(usize),
    /// Buffer class `S1` or `S2`.
    Buffer(usize),
    Booster(BoosterTarget),
    Padding,
}

impl StateClass {
    /// Chain position `s` for buffer classes (`1`, `2`) and primary states.
    pub fn chain_index(&self) -> Option<usize> {
        match *self {
            StateClass::Buffer(s) | StateClass::Primary(s) => Some(s),
            _ => None,
        }
    }

    pub fn is_key_state(&self) -> bool {
        matches!(
            self,
            StateClass::Primary(_) | StateClass::Adjoint(_) | StateClass::Buffer(_)
        )
    }
}

impl fmt::Display for StateClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateClass::Absorbing => write!(f, "absorbing"),
            StateClass::Primary(s) => write!(f, "primary_{s}"),
            StateClass::Adjoint(s) => write!(f, "adjoint_{s}"),
            StateClass::Buffer(s) => write!(f, "buffer_{s}"),
            StateClass::Booster(BoosterTarget::Chain(s)) => write!(f, "booster_{s}"),
            StateClass::Booster(BoosterTarget::Adjoint(s)) => write!(f, "booster_adj_{s}"),
            StateClass::Padding => write!(f, "padding"),
        }
    }
}

impl FromStr for StateClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("unknown state class `{s}`"));
        let num = |rest: &str| rest.parse::<usize>().map_err(|_| bad());
        Ok(match s {
            "absorbing" => StateClass::Absorbing,
            "padding" => StateClass::Padding,
            _ => {
                if let Some(rest) = s.strip_prefix("booster_adj_") {
                    StateClass::Booster(BoosterTarget::Adjoint(num(rest)?))
                } else if let Some(rest) = s.strip_prefix("booster_") {
                    StateClass::Booster(BoosterTarget::Chain(num(rest)?))
                } else if let Some(rest) = s.strip_prefix("primary_") {
                    StateClass::Primary(num(rest)?)
                } else if let Some(rest) = s.strip_prefix("adjoint_") {
                    StateClass::Adjoint(num(rest)?)
                } else if let Some(rest) = s.strip_prefix("buffer_") {
                    StateClass::Buffer(num(rest)?)
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

/// A contiguous run of state ids sharing one class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassBlock {
    pub class: StateClass,
    pub start: StateId,
    pub len: usize,
}

/// Sizes and id assignment of every state class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateLayout {
    pub h: usize,
    pub target_size: usize,
    pub s1_size: usize,
    pub s2_size: usize,
    pub booster_size: usize,
    pub padding: usize,
    blocks: Vec<ClassBlock>,
}

impl StateLayout {
    pub fn blocks(&self) -> &[ClassBlock] {
        &self.blocks
    }

    pub fn block(&self, class: StateClass) -> Option<&ClassBlock> {
        self.blocks.iter().find(|b| b.class == class)
    }

    pub fn primary(&self, s: usize) -> StateId {
        assert!((3..=self.h).contains(&s), "primary state {s} outside 3..={}", self.h);
        1 + (s - 3)
    }

    pub fn adjoint(&self, s: usize) -> StateId {
        assert!((1..=self.h).contains(&s), "adjoint state {s} outside 1..={}", self.h);
        1 + (self.h - 2) + (s - 1)
    }

    /// Class label and index within the class of a state id.
    pub fn class_of(&self, id: StateId) -> Option<(StateClass, usize)> {
        let i = self.blocks.partition_point(|b| b.start + b.len <= id);
        self.blocks
            .get(i)
            .filter(|b| b.start <= id)
            .map(|b| (b.class, id - b.start))
    }

    /// Number of states outside the padding block.
    pub fn core_size(&self) -> usize {
        self.target_size - self.padding
    }
}

fn component_sizes(params: &HardMdpParams) -> (usize, usize, usize, usize, usize) {
    let h = params.horizon();
    let scale = (1.0 - params.gamma) * params.target_size as f64;
    let s1 = round_size(params.c_b1 * scale);
    let s2 = round_size(params.c_b2 * scale);
    let b = round_size(params.c_m * scale);
    let required = 1 + (h - 2) + h + s1 + s2 + 2 * h * b;
    (h, s1, s2, b, required)
}

/// Smallest state count at or above the requested one for which the class
/// sizes fit, if one exists below `1 << 40`.
pub fn minimum_feasible_size(params: &HardMdpParams) -> Option<usize> {
    let fits = |n: usize| {
        let p = HardMdpParams {
            target_size: n,
            ..params.clone()
        };
        component_sizes(&p).4 <= n
    };
    let mut hi = params.target_size.max(1);
    while !fits(hi) {
        hi = hi.checked_mul(2)?;
        if hi > 1 << 40 {
            return None;
        }
    }
    let mut lo = params.target_size.max(1);
    if fits(lo) {
        return Some(lo);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Class sizes and id assignment for the requested state count.
pub fn derive_layout(params: &HardMdpParams) -> Result<StateLayout> {
    params.validate()?;
    let (h, s1, s2, b, required) = component_sizes(params);
    if required > params.target_size {
        return Err(Error::Sizing {
            required: minimum_feasible_size(params).unwrap_or(required),
            requested: params.target_size,
        });
    }
    let mut blocks = Vec::with_capacity(4 * h + 4);
    let mut next = 0;
    let mut push = |class, len| {
        blocks.push(ClassBlock {
            class,
            start: next,
            len,
        });
        next += len;
    };
    push(StateClass::Absorbing, 1);
    for s in 3..=h {
        push(StateClass::Primary(s), 1);
    }
    for s in 1..=h {
        push(StateClass::Adjoint(s), 1);
    }
    push(StateClass::Buffer(1), s1);
    push(StateClass::Buffer(2), s2);
    for s in 1..=h {
        push(StateClass::Booster(BoosterTarget::Chain(s)), b);
    }
    for s in 1..=h {
        push(StateClass::Booster(BoosterTarget::Adjoint(s)), b);
    }
    let padding = params.target_size - required;
    if padding > 0 {
        push(StateClass::Padding, padding);
    }
    Ok(StateLayout {
        h,
        target_size: params.target_size,
        s1_size: s1,
        s2_size: s2,
        booster_size: b,
        padding,
        blocks,
    })
}

/// `tau_s = 0.5 gamma^(2s/3)`, `r_s = 0.5 gamma^(2s/3 + 5/6)` for `s = 1..=H`,
/// and `p = c_p (1 - gamma)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyParams {
    pub gamma: f64,
    pub p: f64,
    tau: Vec<f64>,
    r: Vec<f64>,
}

impl KeyParams {
    pub fn new(gamma: f64, p: f64, h: usize) -> Self {
        let tau = (1..=h).map(|s| 0.5 * gamma.powf(2.0 * s as f64 / 3.0)).collect();
        let r = (1..=h)
            .map(|s| 0.5 * gamma.powf(2.0 * s as f64 / 3.0 + 5.0 / 6.0))
            .collect();
        Self { gamma, p, tau, r }
    }

    pub fn h(&self) -> usize {
        self.tau.len()
    }

    /// `tau_s`, 1-based.
    pub fn tau(&self, s: usize) -> f64 {
        self.tau[s - 1]
    }

    /// `r_s`, 1-based.
    pub fn r(&self, s: usize) -> f64 {
        self.r[s - 1]
    }

    /// Reward of `(s, a0)` for a primary state: `r_s + gamma^2 p tau_{s-2}`.
    pub fn primary_a0_reward(&self, s: usize) -> f64 {
        self.r(s) + self.gamma * self.gamma * self.p * self.tau(s - 2)
    }

    /// Checks `0 < tau_s < 0.5` and `r_s < tau_s < tau_{s-1}`; returns the
    /// first offending `s`.
    pub fn check_ordering(&self) -> std::result::Result<(), usize> {
        for s in 1..=self.h() {
            let ok = self.tau(s) > 0.0
                && self.tau(s) < 0.5
                && self.r(s) < self.tau(s)
                && (s == 1 || self.tau(s) < self.tau(s - 1));
            if !ok {
                return Err(s);
            }
        }
        Ok(())
    }

    /// Slack of `gamma^(3/2) tau_{s-1} <= r_s + gamma^2 p tau_{s-2} <= gamma^(1/2) tau_s`
    /// for a primary state `s`, as `(lower slack, upper slack)`.
    pub fn a0_sandwich_slack(&self, s: usize) -> (f64, f64) {
        let q = self.primary_a0_reward(s);
        (
            q - self.gamma.powf(1.5) * self.tau(s - 1),
            self.gamma.sqrt() * self.tau(s) - q,
        )
    }
}

/// Granularity of the generated MDP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Granularity {
    Full,
    Collapsed,
}

/// The constructed MDP together with its layout and key parameters.
#[derive(Clone, Debug)]
pub struct HardInstance {
    pub params: HardMdpParams,
    pub variant: Variant,
    pub layout: StateLayout,
    pub key: KeyParams,
    pub mdp: TabularMdp,
}

/// Builds the base hard instance with one state per element of `S`.
pub fn build_hard_mdp(params: &HardMdpParams) -> Result<HardInstance> {
    build_variant(params, Variant::Base)
}

/// Builds the modified instance whose primary and adjoint boosters have two actions.
pub fn build_modified_mdp(params: &HardMdpParams) -> Result<HardInstance> {
    build_variant(params, Variant::Modified)
}

pub fn build_variant(params: &HardMdpParams, variant: Variant) -> Result<HardInstance> {
    let layout = derive_layout(params)?;
    let key = KeyParams::new(params.gamma, params.p(), layout.h);
    let mdp = generate(&layout, &key, variant, Granularity::Full)?;
    Ok(HardInstance {
        params: params.clone(),
        variant,
        layout,
        key,
        mdp,
    })
}

impl HardInstance {
    /// Execution view with one state per element of `S`.
    pub fn full(&self) -> Instance {
        let n = self.layout.target_size;
        let mut labels = Vec::with_capacity(n);
        let mut index_in_class = Vec::with_capacity(n);
        for block in self.layout.blocks() {
            for i in 0..block.len {
                labels.push(block.class);
                index_in_class.push(i);
            }
        }
        let chain = (1..=self.layout.h)
            .map(|s| match s {
                1 | 2 => self.layout.block(StateClass::Buffer(s)).unwrap().start,
                _ => self.layout.primary(s),
            })
            .collect();
        let adjoint = (1..=self.layout.h).map(|s| self.layout.adjoint(s)).collect();
        Instance {
            mdp: self.mdp.clone(),
            multiplicity: vec![1; n],
            total_states: n,
            hard: Some(HardInfo {
                params: self.params.clone(),
                variant: self.variant,
                layout: self.layout.clone(),
                key: self.key.clone(),
                labels,
                index_in_class,
                chain,
                adjoint,
                collapsed: false,
            }),
        }
    }

    /// Execution view with one representative per exchangeable class, built
    /// directly from the layout (no full-size MDP is materialised).
    pub fn collapsed(&self) -> Result<Instance> {
        collapsed_instance(&self.params, self.variant)
    }
}

/// Collapsed execution view built straight from the parameters; usable for
/// state counts whose full MDP would not fit in memory.
pub fn collapsed_instance(params: &HardMdpParams, variant: Variant) -> Result<Instance> {
    let layout = derive_layout(params)?;
    let key = KeyParams::new(params.gamma, params.p(), layout.h);
    let mdp = generate(&layout, &key, variant, Granularity::Collapsed)?;
    let labels: Vec<StateClass> = layout.blocks().iter().map(|b| b.class).collect();
    let multiplicity = layout.blocks().iter().map(|b| b.len).collect();
    let rep = |class| labels.iter().position(|c| *c == class).unwrap();
    let chain = (1..=layout.h)
        .map(|s| match s {
            1 | 2 => rep(StateClass::Buffer(s)),
            _ => rep(StateClass::Primary(s)),
        })
        .collect();
    let adjoint = (1..=layout.h).map(|s| rep(StateClass::Adjoint(s))).collect();
    Ok(Instance {
        mdp,
        multiplicity,
        total_states: layout.target_size,
        hard: Some(HardInfo {
            params: params.clone(),
            variant,
            labels: labels.clone(),
            index_in_class: vec![0; labels.len()],
            layout,
            key,
            chain,
            adjoint,
            collapsed: true,
        }),
    })
}

/// Emits the MDP either state-by-state or class-by-class.
fn generate(layout: &StateLayout, key: &KeyParams, variant: Variant, granularity: Granularity) -> Result<TabularMdp> {
    let gamma = key.gamma;
    let p = key.p;
    let h = layout.h;
    let blocks = layout.blocks();
    let width = |b: &ClassBlock| match granularity {
        Granularity::Full => b.len,
        Granularity::Collapsed => 1,
    };
    // First emitted id of each block.
    let mut first = Vec::with_capacity(blocks.len());
    let mut n = 0;
    for b in blocks {
        first.push(n);
        n += width(b);
    }
    let block_index = |class: StateClass| blocks.iter().position(|b| b.class == class).unwrap();
    let single = |class: StateClass| first[block_index(class)];
    // Uniform distribution over a class (a single representative when collapsed).
    let uniform = |class: StateClass| -> Vec<(StateId, f64)> {
        let i = block_index(class);
        let w = width(&blocks[i]);
        let prob = 1.0 / w as f64;
        (first[i]..first[i] + w).map(|t| (t, prob)).collect()
    };
    let absorbing = single(StateClass::Absorbing);
    let chain_target = |s: usize| -> Vec<(StateId, f64)> {
        match s {
            1 | 2 => uniform(StateClass::Buffer(s)),
            _ => vec![(single(StateClass::Primary(s)), 1.0)],
        }
    };
    let adjoint_id = |s: usize| single(StateClass::Adjoint(s));

    let mut states: Vec<Vec<ActionSpec>> = Vec::with_capacity(n);
    for (bi, block) in blocks.iter().enumerate() {
        for copy in 0..width(block) {
            let id = first[bi] + copy;
            let specs = match block.class {
                StateClass::Absorbing => vec![ActionSpec::new(A0, 0.0, vec![(absorbing, 1.0)])],
                StateClass::Padding => vec![ActionSpec::new(A0, 0.0, vec![(id, 1.0)])],
                StateClass::Primary(s) => vec![
                    ActionSpec::new(A0, key.primary_a0_reward(s), vec![(absorbing, 1.0)]),
                    ActionSpec::new(A1, 0.0, vec![(adjoint_id(s - 1), 1.0)]),
                    ActionSpec::new(A2, key.r(s), vec![(absorbing, 1.0 - p), (adjoint_id(s - 2), p)]),
                ],
                StateClass::Adjoint(s) => vec![
                    ActionSpec::new(A0, gamma * key.tau(s), vec![(absorbing, 1.0)]),
                    ActionSpec::new(A1, 0.0, chain_target(s)),
                ],
                StateClass::Buffer(s) => {
                    let r = gamma.powi(2 * s as i32);
                    vec![
                        ActionSpec::new(A0, -r, vec![(absorbing, 1.0)]),
                        ActionSpec::new(A1, r, vec![(absorbing, 1.0)]),
                    ]
                }
                StateClass::Booster(target) => {
                    let (dest, modified_a0) = match target {
                        BoosterTarget::Chain(s) => (chain_target(s), (s >= 3).then(|| (s, gamma * key.tau(s)))),
                        BoosterTarget::Adjoint(s) => {
                            (vec![(adjoint_id(s), 1.0)], Some((s, gamma * gamma * key.tau(s))))
                        }
                    };
                    match (variant, modified_a0) {
                        (Variant::Modified, Some((_, scale))) => {
                            let target_id = dest[0].0;
                            vec![
                                ActionSpec::new(A0, 0.9 * scale, vec![(absorbing, 0.9), (target_id, 0.1)]),
                                ActionSpec::new(A1, 0.0, dest),
                            ]
                        }
                        _ => vec![ActionSpec::new(A1, 0.0, dest)],
                    }
                }
            };
            states.push(specs);
        }
    }
    debug_assert_eq!(states.len(), n);
    debug_assert!(h >= 3);
    TabularMdp::new(gamma, states)
}

/// Closed-form `V*` of a class under the hypothesis `gamma^(2H) >= 2/3`:
/// `gamma^(2s)` on chain states, `gamma^(2s+1)` on adjoints, one extra factor
/// of `gamma` on their boosters, and `0` on absorbing and padding states.
pub fn optimal_value_of(class: StateClass, gamma: f64) -> f64 {
    let g = |e: usize| gamma.powi(e as i32);
    match class {
        StateClass::Absorbing | StateClass::Padding => 0.0,
        StateClass::Primary(s) | StateClass::Buffer(s) => g(2 * s),
        StateClass::Adjoint(s) => g(2 * s + 1),
        StateClass::Booster(BoosterTarget::Chain(s)) => g(2 * s + 1),
        StateClass::Booster(BoosterTarget::Adjoint(s)) => g(2 * s + 2),
    }
}

/// Checks the hypothesis of the closed-form optimum.
pub fn closed_form_regime(h: usize, gamma: f64) -> Result<()> {
    let lhs = gamma.powi(2 * h as i32);
    if h < 2 || lhs < 2.0 / 3.0 {
        return Err(Error::OutsideRegime(format!(
            "gamma^(2H) = {lhs:.6} with H = {h}; need gamma^(2H) >= 2/3 and H >= 2"
        )));
    }
    Ok(())
}

/// Predicted `V*` for every state id of the full layout, within the regime
/// where the closed form is guaranteed.
pub fn closed_form_optimal(layout: &StateLayout, gamma: f64) -> Result<Vec<f64>> {
    closed_form_regime(layout.h, gamma)?;
    Ok(closed_form_values(layout, gamma))
}

/// The closed-form values without the regime check.
pub fn closed_form_values(layout: &StateLayout, gamma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(layout.target_size);
    for block in layout.blocks() {
        let v = optimal_value_of(block.class, gamma);
        out.extend(std::iter::repeat(v).take(block.len));
    }
    out
}

/// Layout CSV with columns `state_id,class,index_within_class,actions`; the
/// last column lists the available actions as `a0|a1|...`.
pub fn layout_csv(instance: &HardInstance) -> String {
    let mut out = String::from("state_id,class,index_within_class,actions\n");
    for block in instance.layout.blocks() {
        for i in 0..block.len {
            let id = block.start + i;
            let actions: Vec<String> = instance.mdp.actions(id).iter().map(|a| format!("a{a}")).collect();
            out.push_str(&format!("{id},{},{i},{}\n", block.class, actions.join("|")));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::value_iteration;
    use crate::mdp::validate_mdp;

    fn desk(gamma: f64, n: usize, h: usize) -> HardMdpParams {
        HardMdpParams::desk(gamma, n, h)
    }

    #[test]
    fn horizon_floor() {
        let mut p = desk(0.99, 100_000, 3);
        p.c_h = 0.18;
        assert_eq!(p.horizon(), 18);
        p.c_h = 0.01;
        assert_eq!(p.horizon(), 3);
    }

    #[test]
    fn tiny_booster_rounds_up_to_one() {
        let mut p = desk(0.9, 200, 3);
        p.c_m = 0.02; // c_m (1 - gamma) |S| = 0.4
        p.c_b1 = 0.02;
        p.c_b2 = 0.02;
        let layout = derive_layout(&p).unwrap();
        assert_eq!(layout.booster_size, 1);
        assert_eq!(layout.s1_size, 1);
    }

    #[test]
    fn regime_sized_layout_resums() {
        let p = HardMdpParams {
            gamma: 0.96,
            target_size: 50_000,
            c_h: 0.18,
            c_b1: 1e-5 * 0.9,
            c_b2: 8.0 * 0.9,
            c_m: 0.9,
            c_p: 1e-4,
            enforce_paper_regime: true,
        };
        assert!(p.in_paper_regime() == false, "gamma must exceed 0.96 strictly");
        let p = HardMdpParams {
            enforce_paper_regime: false,
            ..p
        };
        let layout = derive_layout(&p).unwrap();
        assert_eq!(layout.h, 4);
        // Independent re-summation from the block list.
        let total: usize = layout.blocks().iter().map(|b| b.len).sum();
        assert_eq!(total, 50_000);
        assert_eq!(layout.s1_size, 1);
        assert_eq!(layout.s2_size, 14_400);
        assert_eq!(layout.booster_size, 1_800);
        assert_eq!(
            1 + 2 + 4 + layout.s1_size + layout.s2_size + 8 * layout.booster_size + layout.padding,
            50_000
        );
    }

    #[test]
    fn undersized_request_reports_minimum() {
        let p = desk(0.9, 15, 4);
        match derive_layout(&p) {
            Err(Error::Sizing { required, requested }) => {
                assert_eq!(requested, 15);
                assert!(required > 15);
                assert!(derive_layout(&HardMdpParams {
                    target_size: required,
                    ..p.clone()
                })
                .is_ok());
                assert!(derive_layout(&HardMdpParams {
                    target_size: required - 1,
                    ..p
                })
                .is_err());
            }
            other => panic!("expected sizing error, got {other:?}"),
        }
    }

    #[test]
    fn enforced_regime_rejects_desk_constants() {
        let mut p = desk(0.97, 5000, 3);
        p.enforce_paper_regime = true;
        assert!(matches!(p.validate(), Err(Error::OutsideRegime(_))));
    }

    #[test]
    fn class_lookup_and_ids() {
        let inst = build_hard_mdp(&desk(0.96, 2000, 6)).unwrap();
        let l = &inst.layout;
        assert_eq!(l.class_of(0), Some((StateClass::Absorbing, 0)));
        assert_eq!(l.class_of(l.primary(3)), Some((StateClass::Primary(3), 0)));
        assert_eq!(l.class_of(l.adjoint(6)), Some((StateClass::Adjoint(6), 0)));
        let s2 = l.block(StateClass::Buffer(2)).unwrap();
        assert_eq!(l.class_of(s2.start + 3), Some((StateClass::Buffer(2), 3)));
        assert_eq!(l.class_of(l.target_size - 1).unwrap().0, StateClass::Padding);
        assert_eq!(l.class_of(l.target_size), None);
        for class in [
            "absorbing",
            "primary_4",
            "adjoint_1",
            "buffer_2",
            "booster_3",
            "booster_adj_5",
            "padding",
        ] {
            assert_eq!(class.parse::<StateClass>().unwrap().to_string(), class);
        }
    }

    #[test]
    fn construction_validates_and_has_one_negative_pair_of_classes() {
        for variant in [Variant::Base, Variant::Modified] {
            let inst = build_variant(&desk(0.96, 2000, 6), variant).unwrap();
            assert!(validate_mdp(&inst.mdp).is_empty());
            let mut negative = std::collections::BTreeSet::new();
            for s in 0..inst.mdp.num_states() {
                for k in inst.mdp.pairs(s) {
                    if inst.mdp.reward(k) < 0.0 {
                        negative.insert((inst.layout.class_of(s).unwrap().0.to_string(), inst.mdp.action_of(k)));
                    }
                }
            }
            let expected: std::collections::BTreeSet<_> =
                [("buffer_1".to_string(), A0), ("buffer_2".to_string(), A0)].into();
            assert_eq!(negative, expected);
            assert!(inst.mdp.topological_order().is_some());
        }
    }

    #[test]
    fn value_iteration_recovers_closed_form() {
        let p = desk(0.98, 3000, 6);
        let inst = build_hard_mdp(&p).unwrap();
        let predicted = closed_form_optimal(&inst.layout, p.gamma).unwrap();
        let sol = value_iteration(&inst.mdp, 1e-12, 1000).unwrap();
        for (s, (&v, &w)) in sol.v_star.iter().zip(&predicted).enumerate() {
            assert!((v - w).abs() < 1e-9, "state {s}: {v} vs {w}");
        }
        let v3 = sol.v_star[inst.layout.primary(3)];
        assert!((v3 - 0.885_842_380_864).abs() < 1e-9);
    }

    #[test]
    fn closed_form_examples() {
        assert!((optimal_value_of(StateClass::Buffer(1), 0.96) - 0.9216).abs() < 1e-15);
        assert_eq!(optimal_value_of(StateClass::Absorbing, 0.96), 0.0);
        assert!(matches!(closed_form_regime(10, 0.8), Err(Error::OutsideRegime(_))));
        assert!(closed_form_regime(4, 0.96).is_ok());
    }

    #[test]
    fn key_parameters_are_ordered_and_sandwiched() {
        for gamma in [0.9, 0.96, 0.99] {
            let key = KeyParams::new(gamma, (1.0 / 6.0) * (1.0 - gamma), 12);
            assert_eq!(key.check_ordering(), Ok(()));
            for s in 3..=12 {
                let (lo, hi) = key.a0_sandwich_slack(s);
                assert!(lo >= 0.0 && hi >= 0.0, "gamma {gamma} s {s}: {lo} {hi}");
            }
        }
    }

    #[test]
    fn modified_boosters_have_two_actions() {
        let p = desk(0.96, 2000, 6);
        let base = build_hard_mdp(&p).unwrap();
        let modified = build_modified_mdp(&p).unwrap();
        for block in modified.layout.blocks() {
            if let StateClass::Booster(target) = block.class {
                let expected = match target {
                    BoosterTarget::Chain(1) | BoosterTarget::Chain(2) => 1,
                    _ => 2,
                };
                assert_eq!(modified.mdp.actions(block.start).len(), expected, "{}", block.class);
                assert_eq!(base.mdp.actions(block.start).len(), 1);
            }
        }
        let csv = layout_csv(&modified);
        assert!(csv.lines().any(|l| l.contains(",booster_adj_3,0,a0|a1")));
    }
}
