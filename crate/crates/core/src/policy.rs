//! Tabular Q-learning and the delayed-reward relabeling baselines.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composite::{CompositeError, CompositeSpec, DelayedEnv};
use crate::envs::{Action, EnvSpec, Policy, State, TabularEnv};
use crate::harness::score::normalized_score;
use crate::trainer::ReplayBuffer;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("non-finite Q-learning target {target} for (s={state}, a={action})")]
    NonFinite { state: State, action: Action, target: f64 },
    #[error("index out of range: state {state}, action {action}")]
    Index { state: State, action: Action },
    #[error("relabeling needs a nonempty buffer")]
    EmptyBuffer,
    #[error(transparent)]
    Composite(#[from] CompositeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QLearningConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the total step budget over which ε decays linearly.
    pub epsilon_decay_fraction: f64,
    /// Q updates per collected environment step.
    pub updates_per_step: usize,
}

impl Default for QLearningConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            updates_per_step: 1,
        }
    }
}

/// Linear ε decay from `start` to `end` over `decay_steps`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: usize,
}

impl EpsilonSchedule {
    pub fn new(config: &QLearningConfig, total_steps: usize) -> Self {
        Self {
            start: config.epsilon_start.clamp(0.0, 1.0),
            end: config.epsilon_end.clamp(0.0, 1.0),
            decay_steps: (total_steps as f64 * config.epsilon_decay_fraction).round() as usize,
        }
    }

    pub fn value(&self, step: usize) -> f64 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            return self.end;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
    pub alpha: f64,
    pub gamma: f64,
}

impl QTable {
    pub fn new(num_states: usize, num_actions: usize, alpha: f64, gamma: f64) -> Self {
        Self {
            num_states,
            num_actions,
            values: vec![0.0; num_states * num_actions],
            alpha,
            gamma,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn get(&self, s: State, a: Action) -> f64 {
        self.values[s * self.num_actions + a]
    }

    pub fn set(&mut self, s: State, a: Action, v: f64) {
        self.values[s * self.num_actions + a] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, s: State) -> &[f64] {
        &self.values[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn max_value(&self, s: State) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action; ties are broken uniformly at random.
    pub fn greedy(&self, s: State, rng: &mut ChaCha8Rng) -> Action {
        let best = self.max_value(s);
        let ties: Vec<Action> = (0..self.num_actions).filter(|&a| self.get(s, a) == best).collect();
        if ties.len() == 1 {
            ties[0]
        } else {
            *ties.choose(rng).expect("at least one action")
        }
    }

    pub fn epsilon_greedy(&self, s: State, epsilon: f64, rng: &mut ChaCha8Rng) -> Action {
        if rng.gen::<f64>() < epsilon {
            rng.gen_range(0..self.num_actions)
        } else {
            self.greedy(s, rng)
        }
    }

    /// One-step Q-learning toward `r + γ max_a' Q(s', a')`, without the
    /// bootstrap term when `terminal`. Non-finite targets are rejected and
    /// leave the table untouched.
    pub fn q_update(
        &mut self,
        s: State,
        a: Action,
        reward: f64,
        next: State,
        terminal: bool,
    ) -> Result<(), PolicyError> {
        if s >= self.num_states || next >= self.num_states || a >= self.num_actions {
            return Err(PolicyError::Index { state: s, action: a });
        }
        let bootstrap = if terminal { 0.0 } else { self.gamma * self.max_value(next) };
        let target = reward + bootstrap;
        let current = self.get(s, a);
        let updated = current + self.alpha * (target - current);
        if !updated.is_finite() {
            return Err(PolicyError::NonFinite {
                state: s,
                action: a,
                target,
            });
        }
        self.set(s, a, updated);
        Ok(())
    }
}

/// Greedy policy view of a table.
pub struct Greedy<'a>(pub &'a QTable);

impl Policy for Greedy<'_> {
    fn act(&mut self, state: State, rng: &mut ChaCha8Rng) -> Action {
        self.0.greedy(state, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Observed rewards as-is: zero except at segment ends.
    RawDelayed,
    /// Every step of a segment receives `R_co / n`.
    UniformSplit,
    /// Every step of a segment receives its min-max normalised `R_co`, with
    /// min and max over the segments currently in the buffer.
    Ircr,
}

/// Per-step rewards for every trajectory in the buffer, in buffer order.
pub fn baseline_relabel(kind: BaselineKind, buffer: &ReplayBuffer) -> Result<Vec<Vec<f64>>, PolicyError> {
    if buffer.is_empty() {
        return Err(PolicyError::EmptyBuffer);
    }
    let (lo, hi) = buffer
        .trajectories()
        .flat_map(|t| t.segments.iter().map(|s| s.composite))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)));
    Ok(buffer
        .trajectories()
        .map(|traj| match kind {
            BaselineKind::RawDelayed => traj.steps.iter().map(|s| s.observed_reward).collect(),
            BaselineKind::UniformSplit => traj
                .segments
                .iter()
                .flat_map(|seg| std::iter::repeat(seg.composite / seg.len() as f64).take(seg.len()))
                .collect(),
            BaselineKind::Ircr => traj
                .segments
                .iter()
                .flat_map(|seg| {
                    let v = if hi > lo { (seg.composite - lo) / (hi - lo) } else { 0.5 };
                    std::iter::repeat(v).take(seg.len())
                })
                .collect(),
        })
        .collect())
}

/// Greedy evaluation on the true hidden rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean_return: f64,
    pub returns: Vec<f64>,
    /// Mean per-episode sum of observed composite rewards.
    pub mean_observed: f64,
    pub normalized_score: f64,
}

/// Runs `episodes` greedy episodes through a delayed wrapper of `spec`.
pub fn evaluate_policy(
    spec: &EnvSpec,
    table: &QTable,
    composite: &CompositeSpec,
    delay: usize,
    episodes: usize,
    seed: u64,
) -> Result<Evaluation, PolicyError> {
    assert!(episodes >= 1, "evaluation needs at least one episode");
    let mut env = DelayedEnv::new(TabularEnv::new(spec.clone(), seed), delay, *composite)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED));
    let mut returns = Vec::with_capacity(episodes);
    let mut observed = 0.0;
    for _ in 0..episodes {
        let mut s = env.reset();
        let mut ret = 0.0;
        loop {
            let a = table.greedy(s, &mut rng);
            let step = env.step(a)?;
            ret += step.hidden_reward;
            observed += step.observed_reward;
            s = step.next_state;
            if step.done {
                break;
            }
        }
        returns.push(ret);
    }
    let mean_observed = observed / episodes as f64;
    let score = normalized_score(composite, delay, spec.max_steps, spec.r_max, mean_observed)
        .unwrap_or(f64::NAN);
    Ok(Evaluation {
        mean_return: returns.iter().sum::<f64>() / episodes as f64,
        returns,
        mean_observed,
        normalized_score: score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_spec, EnvParams};

    #[test]
    fn zero_alpha_leaves_table_unchanged() {
        let mut q = QTable::new(3, 2, 0.0, 0.99);
        q.set(1, 1, 0.25);
        let before = q.clone();
        q.q_update(1, 1, 5.0, 2, false).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn terminal_update_closed_form() {
        let mut q = QTable::new(2, 2, 0.5, 0.99);
        q.set(1, 0, 100.0);
        q.q_update(0, 1, 1.0, 1, true).unwrap();
        assert_eq!(q.get(0, 1), 0.5);
        q.q_update(0, 0, 0.0, 1, false).unwrap();
        assert_eq!(q.get(0, 0), 0.5 * 0.99 * 100.0);
    }

    #[test]
    fn non_finite_targets_never_enter_the_table() {
        let mut q = QTable::new(2, 2, 0.5, 0.99);
        let before = q.clone();
        assert!(q.q_update(0, 0, f64::NAN, 1, false).is_err());
        assert!(q.q_update(0, 0, f64::INFINITY, 1, true).is_err());
        assert_eq!(q, before);
        assert!(q.q_update(0, 5, 1.0, 1, true).is_err());
    }

    #[test]
    fn epsilon_schedule_is_linear_then_flat() {
        let cfg = QLearningConfig::default();
        let s = EpsilonSchedule::new(&cfg, 1000);
        assert_eq!(s.value(0), 1.0);
        assert!((s.value(250) - 0.525).abs() < 1e-12);
        assert_eq!(s.value(500), 0.05);
        assert_eq!(s.value(10_000), 0.05);
    }

    #[test]
    fn greedy_breaks_ties_randomly() {
        let q = QTable::new(1, 4, 0.1, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = [false; 4];
        for _ in 0..200 {
            seen[q.greedy(0, &mut rng)] = true;
        }
        assert!(seen.iter().all(|&b| b));
        let mut q = q;
        q.set(0, 2, 1.0);
        assert!((0..50).all(|_| q.greedy(0, &mut rng) == 2));
    }

    #[test]
    fn greedy_evaluation_on_deterministic_env_has_no_variance() {
        let spec = make_spec("chain_walk", &EnvParams::default()).unwrap();
        let mut q = QTable::new(spec.num_states, 2, 0.1, 0.99);
        for s in 0..spec.num_states {
            q.set(s, 1, 1.0);
        }
        let ev = evaluate_policy(&spec, &q, &CompositeSpec::Sum, 5, 7, 3).unwrap();
        assert!(ev.returns.iter().all(|&r| r == ev.returns[0]));
        assert!((ev.mean_return - 1.0).abs() < 1e-12);
        assert!((ev.mean_observed - 1.0).abs() < 1e-12);
    }
}
