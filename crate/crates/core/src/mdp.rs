//! Finite tabular MDPs, benchmark constructors, and rollout generation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{sample_index, seeded};
use crate::table::Table;

/// Upper bound on |reward| accepted by [`validate`]; keeps `exp()` in the
/// soft solver well away from overflow.
pub const REWARD_BOUND: f64 = 1e6;

/// Tolerance for probability rows summing to one.
pub const PROB_TOL: f64 = 1e-9;

/// A finite MDP with dense transition and reward tables.
///
/// The reward table is the hidden task reward used by the labeling oracle
/// and by evaluation; learners never read it directly.
#[derive(Debug, Clone)]
pub struct TabularMDP {
    pub num_states: usize,
    pub num_actions: usize,
    /// Flat `[S][A][S']` transition probabilities.
    transition: Vec<f64>,
    /// `[S][A]` reward table.
    pub reward: Table,
    /// Discount factor, strictly below 1 for the oracle solver.
    pub discount: f64,
    /// Initial state distribution, length `S`.
    pub initial_dist: Vec<f64>,
    /// Absorbing-state markers, length `S`.
    pub terminal_mask: Vec<bool>,
}

impl TabularMDP {
    /// Builds an MDP from parts, checking shapes (content checks live in
    /// [`validate`]).
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Table,
        discount: f64,
        initial_dist: Vec<f64>,
        terminal_mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::Parameter("MDP needs at least one state and action".into()));
        }
        if transition.len() != num_states * num_actions * num_states {
            return Err(Error::Parameter(format!(
                "transition tensor has {} entries, expected {}",
                transition.len(),
                num_states * num_actions * num_states
            )));
        }
        if reward.rows() != num_states || reward.cols() != num_actions {
            return Err(Error::Parameter("reward table shape mismatch".into()));
        }
        if initial_dist.len() != num_states {
            return Err(Error::Parameter("initial_dist length mismatch".into()));
        }
        let terminal_mask = terminal_mask.unwrap_or_else(|| vec![false; num_states]);
        if terminal_mask.len() != num_states {
            return Err(Error::Parameter("terminal_mask length mismatch".into()));
        }
        Ok(TabularMDP {
            num_states,
            num_actions,
            transition,
            reward,
            discount,
            initial_dist,
            terminal_mask,
        })
    }

    #[inline]
    pub fn transition(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.num_actions + a) * self.num_states + s2]
    }

    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.num_actions + a) * self.num_states;
        &self.transition[base..base + self.num_states]
    }

    pub fn transition_row_mut(&mut self, s: usize, a: usize) -> &mut [f64] {
        let base = (s * self.num_actions + a) * self.num_states;
        &mut self.transition[base..base + self.num_states]
    }

    /// Serializes to the canonical JSON document.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MdpFile::from(self))?)
    }

    /// Parses the canonical JSON document, checking shapes.
    pub fn from_json(s: &str) -> Result<Self> {
        let file: MdpFile = serde_json::from_str(s)?;
        file.try_into()
    }
}

/// Wire format: one JSON object with nested probability arrays.
#[derive(Serialize, Deserialize)]
struct MdpFile {
    num_states: usize,
    num_actions: usize,
    discount: f64,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Table,
    initial_dist: Vec<f64>,
    terminal_mask: Vec<bool>,
}

impl From<&TabularMDP> for MdpFile {
    fn from(m: &TabularMDP) -> Self {
        let transition = (0..m.num_states)
            .map(|s| (0..m.num_actions).map(|a| m.transition_row(s, a).to_vec()).collect())
            .collect();
        MdpFile {
            num_states: m.num_states,
            num_actions: m.num_actions,
            discount: m.discount,
            transition,
            reward: m.reward.clone(),
            initial_dist: m.initial_dist.clone(),
            terminal_mask: m.terminal_mask.clone(),
        }
    }
}

impl TryFrom<MdpFile> for TabularMDP {
    type Error = Error;

    fn try_from(f: MdpFile) -> Result<Self> {
        let mut flat = Vec::with_capacity(f.num_states * f.num_actions * f.num_states);
        if f.transition.len() != f.num_states {
            return Err(Error::Parameter("transition outer dimension mismatch".into()));
        }
        for per_state in &f.transition {
            if per_state.len() != f.num_actions {
                return Err(Error::Parameter("transition action dimension mismatch".into()));
            }
            for row in per_state {
                if row.len() != f.num_states {
                    return Err(Error::Parameter("transition row length mismatch".into()));
                }
                flat.extend_from_slice(row);
            }
        }
        TabularMDP::new(
            f.num_states,
            f.num_actions,
            flat,
            f.reward,
            f.discount,
            f.initial_dist,
            Some(f.terminal_mask),
        )
    }
}

/// A rollout: `H+1` states, `H` actions, `H` true-reward annotations.
/// Rewards are visible only to oracle and evaluation code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// Checks length consistency and that every step has positive
    /// transition probability.
    pub fn is_consistent_with(&self, mdp: &TabularMDP) -> bool {
        if self.states.len() != self.actions.len() + 1 || self.rewards.len() != self.actions.len()
        {
            return false;
        }
        self.actions.iter().enumerate().all(|(t, &a)| {
            let (s, s2) = (self.states[t], self.states[t + 1]);
            s < mdp.num_states && a < mdp.num_actions && mdp.transition(s, a, s2) > 0.0
        })
    }
}

/// A contiguous window of `(state, action)` steps cut from a trajectory.
///
/// `successor` is the state observed after the final step when the segment
/// was cut from a rollout; the telescoped advantage estimator needs it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Segment {
    pub pairs: Vec<(usize, usize)>,
    pub source_offset: usize,
    pub successor: Option<usize>,
}

impl Segment {
    pub fn new(pairs: Vec<(usize, usize)>) -> Self {
        Segment { pairs, source_offset: 0, successor: None }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn in_range(&self, mdp: &TabularMDP) -> bool {
        !self.pairs.is_empty()
            && self.pairs.iter().all(|&(s, a)| s < mdp.num_states && a < mdp.num_actions)
    }
}

/// Builds a `width x height` gridworld with four movement actions
/// (0=up, 1=down, 2=left, 3=right), row-major state indexing
/// `s = y * width + x`.
///
/// With probability `slip_prob` the chosen action is replaced by a
/// uniformly random one. Moving off-grid stays in place. Entering the goal
/// pays `goal_reward` (in expectation over the slip for stochastic
/// instances), every other transition pays `step_reward`. The goal itself
/// is absorbing with zero reward.
pub fn build_gridworld(
    width: usize,
    height: usize,
    goal: (usize, usize),
    step_reward: f64,
    goal_reward: f64,
    slip_prob: f64,
    gamma: f64,
) -> Result<TabularMDP> {
    if width < 2 || height < 2 {
        return Err(Error::Parameter("gridworld must be at least 2x2".into()));
    }
    if !(0.0..1.0).contains(&slip_prob) {
        return Err(Error::Parameter(format!("slip_prob {slip_prob} outside [0, 1)")));
    }
    if goal.0 >= width || goal.1 >= height {
        return Err(Error::Parameter("goal cell out of bounds".into()));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Parameter(format!("discount {gamma} outside [0, 1)")));
    }

    let num_states = width * height;
    let num_actions = 4;
    let goal_state = goal.1 * width + goal.0;

    let dest = |s: usize, a: usize| -> usize {
        let (x, y) = (s % width, s / width);
        let (nx, ny) = match a {
            0 => (x, y.saturating_sub(1)),
            1 => (x, (y + 1).min(height - 1)),
            2 => (x.saturating_sub(1), y),
            _ => ((x + 1).min(width - 1), y),
        };
        ny * width + nx
    };

    let mut transition = vec![0.0; num_states * num_actions * num_states];
    let mut reward = Table::zeros(num_states, num_actions);
    for s in 0..num_states {
        for a in 0..num_actions {
            let base = (s * num_actions + a) * num_states;
            if s == goal_state {
                transition[base + s] = 1.0;
                continue;
            }
            transition[base + dest(s, a)] += 1.0 - slip_prob;
            for b in 0..num_actions {
                transition[base + dest(s, b)] += slip_prob / num_actions as f64;
            }
            let goal_prob = transition[base + goal_state];
            reward.set(s, a, step_reward + (goal_reward - step_reward) * goal_prob);
        }
    }

    let initial_dist = vec![1.0 / num_states as f64; num_states];
    let mut terminal_mask = vec![false; num_states];
    terminal_mask[goal_state] = true;
    TabularMDP::new(
        num_states,
        num_actions,
        transition,
        reward,
        gamma,
        initial_dist,
        Some(terminal_mask),
    )
}

/// Single-state bandit: every action self-loops and pays its fixed reward.
pub fn build_single_state_bandit(action_rewards: &[f64], gamma: f64) -> Result<TabularMDP> {
    if action_rewards.len() < 2 {
        return Err(Error::Parameter("bandit needs at least 2 actions".into()));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Parameter(format!("discount {gamma} outside [0, 1)")));
    }
    let num_actions = action_rewards.len();
    let transition = vec![1.0; num_actions];
    let reward = Table::from_fn(1, num_actions, |_, a| action_rewards[a]);
    TabularMDP::new(1, num_actions, transition, reward, gamma, vec![1.0], None)
}

/// Random dense MDP for property and stress tests: uniform-simplex
/// transition rows, rewards uniform in `[-1, 1]`, uniform initial state.
pub fn random_mdp(num_states: usize, num_actions: usize, gamma: f64, seed: u64) -> TabularMDP {
    use rand::Rng;
    let mut rng = seeded(seed);
    let mut transition = vec![0.0; num_states * num_actions * num_states];
    for chunk in transition.chunks_mut(num_states) {
        // -ln(U) draws normalized: uniform over the simplex.
        let mut total = 0.0;
        for p in chunk.iter_mut() {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            *p = -u.ln();
            total += *p;
        }
        for p in chunk.iter_mut() {
            *p /= total;
        }
    }
    let reward = Table::from_fn(num_states, num_actions, |_, _| rng.gen_range(-1.0..1.0));
    let initial_dist = vec![1.0 / num_states as f64; num_states];
    TabularMDP::new(num_states, num_actions, transition, reward, gamma, initial_dist, None)
        .expect("shape is valid by construction")
}

/// Checks all structural invariants and returns one description per
/// violation. Reports, never fails.
pub fn validate(mdp: &TabularMDP) -> Vec<String> {
    let mut violations = Vec::new();
    if !(0.0..1.0).contains(&mdp.discount) {
        violations.push(format!("discount {} outside [0, 1)", mdp.discount));
    }
    for s in 0..mdp.num_states {
        for a in 0..mdp.num_actions {
            let row = mdp.transition_row(s, a);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                violations.push(format!("transition row (s={s}, a={a}) sums to {sum}"));
            }
            if let Some(p) = row.iter().find(|&&p| !(0.0..=1.0).contains(&p) || !p.is_finite()) {
                violations.push(format!("transition row (s={s}, a={a}) has invalid entry {p}"));
            }
            let r = mdp.reward.get(s, a);
            if !r.is_finite() || r.abs() > REWARD_BOUND {
                violations.push(format!("reward (s={s}, a={a}) = {r} is out of bounds"));
            }
        }
    }
    let init_sum: f64 = mdp.initial_dist.iter().sum();
    if (init_sum - 1.0).abs() > PROB_TOL {
        violations.push(format!("initial_dist sums to {init_sum}"));
    }
    for (s, &p) in mdp.initial_dist.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            violations.push(format!("initial_dist[{s}] = {p} is invalid"));
        }
    }
    violations
}

/// Checks that `policy` is a row-stochastic `[S][A]` table for `mdp`.
pub fn check_policy(mdp: &TabularMDP, policy: &Table) -> Result<()> {
    if policy.rows() != mdp.num_states || policy.cols() != mdp.num_actions {
        return Err(Error::Parameter(format!(
            "policy shape {}x{} does not match MDP {}x{}",
            policy.rows(),
            policy.cols(),
            mdp.num_states,
            mdp.num_actions
        )));
    }
    for s in 0..policy.rows() {
        let sum: f64 = policy.row(s).iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(Error::Parameter(format!("policy row {s} sums to {sum}")));
        }
        if policy.row(s).iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Parameter(format!("policy row {s} has a negative entry")));
        }
    }
    Ok(())
}

/// Samples one trajectory of length `horizon` under `policy`.
/// Deterministic given `rng_seed`.
pub fn sample_rollout(
    mdp: &TabularMDP,
    policy: &Table,
    horizon: usize,
    rng_seed: u64,
) -> Result<Trajectory> {
    check_policy(mdp, policy)?;
    if horizon == 0 {
        return Err(Error::Parameter("horizon must be at least 1".into()));
    }
    let mut rng = seeded(rng_seed);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut s = sample_index(&mut rng, &mdp.initial_dist);
    states.push(s);
    for _ in 0..horizon {
        let a = sample_index(&mut rng, policy.row(s));
        rewards.push(mdp.reward.get(s, a));
        let s2 = sample_index(&mut rng, mdp.transition_row(s, a));
        actions.push(a);
        states.push(s2);
        s = s2;
    }
    Ok(Trajectory { states, actions, rewards })
}

/// Discounted sum of true rewards over a segment, `sum_t gamma^t r(s_t, a_t)`
/// with `t = 0` at the segment's first step.
pub fn partial_return(segment: &Segment, mdp: &TabularMDP, gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut disc = 1.0;
    for &(s, a) in &segment.pairs {
        total += disc * mdp.reward.get(s, a);
        disc *= gamma;
    }
    total
}
