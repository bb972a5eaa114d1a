//! Small tabular environments with known Markovian step rewards.
//!
//! Every environment is described by an [`EnvSpec`] (transition table, reward
//! table, terminal set, start distribution) and executed by [`TabularEnv`].
//! Because the full model is available, exact oracles (value iteration,
//! random-policy expectation) can be computed for any of them.

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type State = usize;
pub type Action = usize;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("unknown environment `{0}` (expected chain_walk, peaked_chain or cliff_grid)")]
    UnknownEnv(String),
    #[error("invalid parameter `{field}`: {msg}")]
    BadParam { field: &'static str, msg: String },
    #[error("step called on a finished episode")]
    EpisodeFinished,
    #[error("action {action} out of range for {num_actions} actions")]
    BadAction { action: Action, num_actions: usize },
    #[error("inconsistent environment table: {0}")]
    BadSpec(String),
}

/// Optional environment knobs. Unset fields take per-environment defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvParams {
    /// Chain length `L` (chain_walk, peaked_chain).
    pub length: Option<usize>,
    /// Episode step limit `T`.
    pub max_steps: Option<usize>,
    /// Bell width (peaked_chain).
    pub width: Option<f64>,
    /// Per-step penalty (peaked_chain).
    pub penalty: Option<f64>,
    /// Start uniformly over non-terminal cells instead of at cell 0 (peaked_chain).
    pub random_start: Option<bool>,
    pub rows: Option<usize>,
    pub cols: Option<usize>,
}

/// Full tabular description of an MDP with a step limit.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub num_states: usize,
    pub num_actions: usize,
    /// Outcome distribution for each `(s, a)`, indexed `s * num_actions + a`.
    pub transitions: Vec<Vec<(State, f64)>>,
    /// Hidden reward `r(s, a)`, same indexing.
    pub rewards: Vec<f64>,
    pub terminal: Vec<bool>,
    /// Start distribution μ.
    pub initial: Vec<f64>,
    pub max_steps: usize,
    pub r_max: f64,
}

impl EnvSpec {
    pub fn idx(&self, s: State, a: Action) -> usize {
        s * self.num_actions + a
    }

    pub fn reward(&self, s: State, a: Action) -> f64 {
        self.rewards[self.idx(s, a)]
    }

    pub fn outcomes(&self, s: State, a: Action) -> &[(State, f64)] {
        &self.transitions[self.idx(s, a)]
    }

    /// Checks that every row of P and μ is a distribution and that `r_max`
    /// is the largest entry of the reward table.
    pub fn validate(&self) -> Result<(), EnvError> {
        let n = self.num_states * self.num_actions;
        if self.transitions.len() != n || self.rewards.len() != n {
            return Err(EnvError::BadSpec("table sizes".into()));
        }
        if self.terminal.len() != self.num_states || self.initial.len() != self.num_states {
            return Err(EnvError::BadSpec("state vector sizes".into()));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            let total: f64 = row.iter().map(|&(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-12 || row.iter().any(|&(s, _)| s >= self.num_states) {
                return Err(EnvError::BadSpec(format!("transition row {i} sums to {total}")));
            }
        }
        let mu: f64 = self.initial.iter().sum();
        if (mu - 1.0).abs() > 1e-12 {
            return Err(EnvError::BadSpec(format!("initial distribution sums to {mu}")));
        }
        let max = self.rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max != self.r_max {
            return Err(EnvError::BadSpec(format!(
                "r_max {} differs from table maximum {max}",
                self.r_max
            )));
        }
        Ok(())
    }
}

pub const ENV_NAMES: [&str; 3] = ["chain_walk", "peaked_chain", "cliff_grid"];

/// Builds the tabular description of a named environment.
pub fn make_spec(name: &str, params: &EnvParams) -> Result<EnvSpec, EnvError> {
    let spec = match name {
        "chain_walk" => chain_walk(params)?,
        "peaked_chain" => peaked_chain(params)?,
        "cliff_grid" => cliff_grid(params)?,
        other => return Err(EnvError::UnknownEnv(other.to_string())),
    };
    spec.validate()?;
    Ok(spec)
}

pub fn make_env(name: &str, params: &EnvParams, seed: u64) -> Result<TabularEnv, EnvError> {
    Ok(TabularEnv::new(make_spec(name, params)?, seed))
}

fn positive(field: &'static str, v: usize) -> Result<usize, EnvError> {
    if v == 0 {
        return Err(EnvError::BadParam {
            field,
            msg: "must be positive".into(),
        });
    }
    Ok(v)
}

fn chain_layout(
    length: usize,
    max_steps: usize,
    start: Vec<f64>,
    reward: impl Fn(State, State) -> f64,
) -> EnvSpec {
    let num_states = length + 1;
    let mut transitions = Vec::with_capacity(num_states * 2);
    let mut rewards = Vec::with_capacity(num_states * 2);
    for s in 0..num_states {
        for a in 0..2 {
            let next = match (s, a) {
                (s, _) if s == length => s,
                (0, 0) => 0,
                (s, 0) => s - 1,
                (s, _) => s + 1,
            };
            transitions.push(vec![(next, 1.0)]);
            rewards.push(if s == length { 0.0 } else { reward(s, next) });
        }
    }
    let mut terminal = vec![false; num_states];
    terminal[length] = true;
    let r_max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    EnvSpec {
        name: String::new(),
        num_states,
        num_actions: 2,
        transitions,
        rewards,
        terminal,
        initial: start,
        max_steps,
        r_max,
    }
}

/// Chain of cells `0..=L`; action 0 moves left (reflecting at 0), action 1
/// moves right. Reward is progress `Δposition / L`; cell `L` is terminal.
fn chain_walk(p: &EnvParams) -> Result<EnvSpec, EnvError> {
    let length = positive("length", p.length.unwrap_or(10))?;
    let max_steps = positive("max_steps", p.max_steps.unwrap_or(4 * length))?;
    let mut start = vec![0.0; length + 1];
    start[0] = 1.0;
    let mut spec = chain_layout(length, max_steps, start, |s, next| {
        (next as f64 - s as f64) / length as f64
    });
    // Closed form: one step right anywhere on the chain.
    spec.r_max = 1.0 / length as f64;
    spec.name = "chain_walk".into();
    Ok(spec)
}

/// Same chain dynamics as `chain_walk`, but the reward is a Gaussian bump
/// centred on the chain midpoint (evaluated at the cell the move lands on)
/// minus a constant step penalty.
fn peaked_chain(p: &EnvParams) -> Result<EnvSpec, EnvError> {
    let length = positive("length", p.length.unwrap_or(10))?;
    if length < 2 {
        return Err(EnvError::BadParam {
            field: "length",
            msg: "peaked_chain needs length >= 2".into(),
        });
    }
    let max_steps = positive("max_steps", p.max_steps.unwrap_or(4 * length))?;
    let width = p.width.unwrap_or(1.0);
    let penalty = p.penalty.unwrap_or(0.01);
    if !(width > 0.0) {
        return Err(EnvError::BadParam {
            field: "width",
            msg: format!("must be > 0, got {width}"),
        });
    }
    if !(0.0..0.5).contains(&penalty) {
        return Err(EnvError::BadParam {
            field: "penalty",
            msg: format!("must lie in [0, 0.5), got {penalty}"),
        });
    }
    let mid = length as f64 / 2.0;
    let bell = move |cell: State| {
        let z = cell as f64 - mid;
        (-z * z / (2.0 * width * width)).exp()
    };
    let start = if p.random_start.unwrap_or(false) {
        let mut mu = vec![1.0 / length as f64; length + 1];
        mu[length] = 0.0;
        mu
    } else {
        let mut mu = vec![0.0; length + 1];
        mu[0] = 1.0;
        mu
    };
    let mut spec = chain_layout(length, max_steps, start, |_, next| bell(next) - penalty);
    // Closed form: the bump peaks at the midpoint cell(s).
    spec.r_max = bell(length / 2).max(bell(length.div_ceil(2))) - penalty;
    spec.name = "peaked_chain".into();
    Ok(spec)
}

pub const UP: Action = 0;
pub const RIGHT: Action = 1;
pub const DOWN: Action = 2;
pub const LEFT: Action = 3;

/// Grid with a cliff along the bottom edge between start (bottom-left) and
/// goal (bottom-right). Step −0.01; cliff −1 and terminate; goal +1 and terminate.
fn cliff_grid(p: &EnvParams) -> Result<EnvSpec, EnvError> {
    let rows = p.rows.unwrap_or(4);
    let cols = p.cols.unwrap_or(12);
    if rows < 2 || cols < 3 {
        return Err(EnvError::BadParam {
            field: "rows/cols",
            msg: format!("cliff_grid needs at least 2x3 cells, got {rows}x{cols}"),
        });
    }
    let max_steps = positive("max_steps", p.max_steps.unwrap_or(100))?;
    let num_states = rows * cols;
    let cell = |r: usize, c: usize| r * cols + c;
    let start = cell(rows - 1, 0);
    let goal = cell(rows - 1, cols - 1);
    let is_cliff = |s: State| s / cols == rows - 1 && s % cols != 0 && s % cols != cols - 1;

    let mut terminal = vec![false; num_states];
    let mut transitions = Vec::with_capacity(num_states * 4);
    let mut rewards = Vec::with_capacity(num_states * 4);
    for s in 0..num_states {
        terminal[s] = s == goal || is_cliff(s);
        let (r, c) = (s / cols, s % cols);
        for a in 0..4 {
            if terminal[s] {
                transitions.push(vec![(s, 1.0)]);
                rewards.push(0.0);
                continue;
            }
            let next = match a {
                UP => cell(r.saturating_sub(1), c),
                RIGHT => cell(r, (c + 1).min(cols - 1)),
                DOWN => cell((r + 1).min(rows - 1), c),
                _ => cell(r, c.saturating_sub(1)),
            };
            transitions.push(vec![(next, 1.0)]);
            rewards.push(if next == goal {
                1.0
            } else if is_cliff(next) {
                -1.0
            } else {
                -0.01
            });
        }
    }
    let mut initial = vec![0.0; num_states];
    initial[start] = 1.0;
    Ok(EnvSpec {
        name: "cliff_grid".into(),
        num_states,
        num_actions: 4,
        transitions,
        rewards,
        terminal,
        initial,
        max_steps,
        r_max: 1.0,
    })
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub next_state: State,
    pub reward: f64,
    /// Entered a terminal state (no bootstrapping past this step).
    pub terminal: bool,
    /// Episode over: terminal or step limit reached.
    pub done: bool,
}

/// Seeded executor for an [`EnvSpec`].
#[derive(Debug, Clone)]
pub struct TabularEnv {
    spec: EnvSpec,
    rng: ChaCha8Rng,
    state: State,
    t: usize,
    done: bool,
}

impl TabularEnv {
    pub fn new(spec: EnvSpec, seed: u64) -> Self {
        let mut env = Self {
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: 0,
            t: 0,
            done: true,
        };
        env.reset();
        env
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn state(&self) -> State {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn reset(&mut self) -> State {
        self.state = sample(&mut self.rng, self.spec.initial.iter().copied().enumerate());
        self.t = 0;
        self.done = false;
        self.state
    }

    pub fn step(&mut self, action: Action) -> Result<Step, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        if action >= self.spec.num_actions {
            return Err(EnvError::BadAction {
                action,
                num_actions: self.spec.num_actions,
            });
        }
        let reward = self.spec.reward(self.state, action);
        let outcomes = self.spec.outcomes(self.state, action);
        let next = if outcomes.len() == 1 {
            outcomes[0].0
        } else {
            sample(&mut self.rng, outcomes.iter().copied())
        };
        self.state = next;
        self.t += 1;
        let terminal = self.spec.terminal[next];
        self.done = terminal || self.t >= self.spec.max_steps;
        Ok(Step {
            next_state: next,
            reward,
            terminal,
            done: self.done,
        })
    }
}

fn sample(rng: &mut ChaCha8Rng, dist: impl Iterator<Item = (State, f64)>) -> State {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (s, p) in dist {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = s;
        if u < acc {
            return s;
        }
    }
    last
}

/// Anything that picks actions for a tabular environment.
pub trait Policy {
    fn act(&mut self, state: State, rng: &mut ChaCha8Rng) -> Action;
}

/// Uniformly random actions.
#[derive(Debug, Clone, Copy)]
pub struct RandomPolicy {
    pub num_actions: usize,
}

impl Policy for RandomPolicy {
    fn act(&mut self, _state: State, rng: &mut ChaCha8Rng) -> Action {
        rng.gen_range(0..self.num_actions)
    }
}

/// Always the same action.
#[derive(Debug, Clone, Copy)]
pub struct FixedPolicy(pub Action);

impl Policy for FixedPolicy {
    fn act(&mut self, _state: State, _rng: &mut ChaCha8Rng) -> Action {
        self.0
    }
}

/// One step of a ground-truth trajectory. `reward` is the hidden step reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: State,
    pub action: Action,
    pub reward: f64,
    pub next_state: State,
    pub terminal: bool,
    pub done: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn pairs(&self) -> Vec<(State, Action)> {
        self.steps.iter().map(|t| (t.state, t.action)).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|t| t.reward).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|t| t.reward).sum()
    }
}

/// Runs one episode of at most `max_steps` steps. The environment and the
/// policy's randomness are both reseeded from `seed`.
pub fn rollout(
    env: &mut TabularEnv,
    policy: &mut dyn Policy,
    max_steps: usize,
    seed: u64,
) -> Trajectory {
    assert!(max_steps >= 1, "rollout needs max_steps >= 1");
    env.reseed(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut state = env.reset();
    let mut steps = Vec::new();
    while steps.len() < max_steps {
        let action = policy.act(state, &mut rng);
        let step = env.step(action).expect("action from policy is in range");
        steps.push(Transition {
            state,
            action,
            reward: step.reward,
            next_state: step.next_state,
            terminal: step.terminal,
            done: step.done,
        });
        state = step.next_state;
        if step.done {
            break;
        }
    }
    Trajectory { steps }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(name: &str) -> TabularEnv {
        make_env(name, &EnvParams::default(), 0).unwrap()
    }

    #[test]
    fn unknown_name_is_a_config_error() {
        assert_eq!(
            make_env("mujoco_ant", &EnvParams::default(), 0).unwrap_err(),
            EnvError::UnknownEnv("mujoco_ant".into())
        );
    }

    #[test]
    fn chain_walk_right_collects_unit_reward() {
        let mut e = env("chain_walk");
        let traj = rollout(&mut e, &mut FixedPolicy(1), 100, 5);
        assert_eq!(traj.len(), 10);
        assert!((traj.total_reward() - 1.0).abs() < 1e-12);
        assert!(traj.steps.last().unwrap().terminal);
    }

    #[test]
    fn peaked_chain_argmax_is_midpoint_step() {
        let mut e = env("peaked_chain");
        let traj = rollout(&mut e, &mut FixedPolicy(1), 100, 0);
        let rewards = traj.rewards();
        let argmax = (0..rewards.len())
            .max_by(|&a, &b| rewards[a].total_cmp(&rewards[b]))
            .unwrap();
        // Step k lands on cell k+1; the midpoint cell 5 is reached at step 4.
        assert_eq!(traj.steps[argmax].next_state, 5);
        assert_eq!(argmax, 4);
        assert_eq!(rewards[argmax], e.spec().r_max);
    }

    #[test]
    fn cliff_ends_episode_with_penalty() {
        let mut e = env("cliff_grid");
        e.reset();
        let step = e.step(RIGHT).unwrap();
        assert_eq!(step.reward, -1.0);
        assert!(step.done && step.terminal);
        assert_eq!(e.step(UP), Err(EnvError::EpisodeFinished));
    }

    #[test]
    fn rewards_lie_within_r_max() {
        for name in ENV_NAMES {
            let spec = make_spec(name, &EnvParams::default()).unwrap();
            for &r in &spec.rewards {
                assert!(r.abs() <= spec.r_max, "{name}: {r} vs {}", spec.r_max);
            }
        }
    }

    #[test]
    fn rollout_respects_max_steps_and_seed() {
        let mut e = env("chain_walk");
        let mut pol = RandomPolicy { num_actions: 2 };
        let one = rollout(&mut e, &mut pol, 1, 9);
        assert_eq!(one.len(), 1);
        let a = rollout(&mut e, &mut pol, 50, 11);
        let b = rollout(&mut e, &mut pol, 50, 11);
        assert_eq!(a, b);
    }

    #[test]
    fn bad_params_are_rejected() {
        let p = EnvParams {
            width: Some(0.0),
            ..EnvParams::default()
        };
        assert!(matches!(
            make_spec("peaked_chain", &p),
            Err(EnvError::BadParam { field: "width", .. })
        ));
    }
}
