//! Composite delayed rewards and the delay wrapper that emits them.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{Action, EnvError, State, TabularEnv, Trajectory};

pub const DEFAULT_BETA: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompositeError {
    #[error("composite reward of an empty segment")]
    EmptySegment,
    #[error("delay length must be >= 1, got {0}")]
    BadDelay(usize),
    #[error("composite of an empty trajectory")]
    EmptyTrajectory,
    #[error("max composite needs beta > 0, got {0}")]
    BadBeta(f64),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Aggregator that turns a segment's hidden step rewards into one observed reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(
    tag = "kind",
    rename_all = "snake_case",
    deny_unknown_fields,
    try_from = "RawCompositeSpec"
)]
pub enum CompositeSpec {
    Sum,
    SumSquare,
    SquareSum,
    Max { beta: f64 },
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawCompositeSpec {
    Sum,
    SumSquare,
    SquareSum,
    Max {
        #[serde(default = "default_beta")]
        beta: f64,
    },
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

impl TryFrom<RawCompositeSpec> for CompositeSpec {
    type Error = CompositeError;

    fn try_from(raw: RawCompositeSpec) -> Result<Self, Self::Error> {
        Ok(match raw {
            RawCompositeSpec::Sum => Self::Sum,
            RawCompositeSpec::SumSquare => Self::SumSquare,
            RawCompositeSpec::SquareSum => Self::SquareSum,
            RawCompositeSpec::Max { beta } => Self::max(beta)?,
        })
    }
}

impl CompositeSpec {
    pub fn max(beta: f64) -> Result<Self, CompositeError> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(CompositeError::BadBeta(beta));
        }
        Ok(Self::Max { beta })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sum => "sum",
            Self::SumSquare => "sum_square",
            Self::SquareSum => "square_sum",
            Self::Max { .. } => "max",
        }
    }
}

impl fmt::Display for CompositeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Max { beta } => write!(f, "max(beta={beta})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Aggregates hidden step rewards into the observed composite reward.
///
/// `SumSquare` and `SquareSum` use the sign-preserving square `|x|·x`.
/// `Max` is `Σ_t n·softmax(β r)_t·r_t`.
pub fn composite(spec: &CompositeSpec, rewards: &[f64]) -> Result<f64, CompositeError> {
    if rewards.is_empty() {
        return Err(CompositeError::EmptySegment);
    }
    Ok(match *spec {
        CompositeSpec::Sum => rewards.iter().sum(),
        CompositeSpec::SumSquare => rewards.iter().map(|r| r.abs() * r).sum(),
        CompositeSpec::SquareSum => {
            let s: f64 = rewards.iter().sum();
            s.abs() * s
        }
        CompositeSpec::Max { beta } => {
            let n = rewards.len() as f64;
            let peak = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = rewards.iter().map(|r| (beta * (r - peak)).exp()).collect();
            let total: f64 = weights.iter().sum();
            weights.iter().zip(rewards).map(|(w, r)| n * (w / total) * r).sum()
        }
    })
}

/// A contiguous window of a trajectory together with its composite reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub pairs: Vec<(State, Action)>,
    pub composite: f64,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.pairs.len()
    }
}

/// Splits a trajectory into consecutive length-`n` segments; the last one may
/// be shorter and is scored over its actual length.
pub fn segment_trajectory(
    trajectory: &Trajectory,
    n: usize,
    spec: &CompositeSpec,
) -> Result<Vec<Segment>, CompositeError> {
    if n == 0 {
        return Err(CompositeError::BadDelay(n));
    }
    if trajectory.is_empty() {
        return Err(CompositeError::EmptyTrajectory);
    }
    trajectory
        .steps
        .chunks(n)
        .enumerate()
        .map(|(k, chunk)| {
            let rewards: Vec<f64> = chunk.iter().map(|t| t.reward).collect();
            Ok(Segment {
                start: k * n,
                pairs: chunk.iter().map(|t| (t.state, t.action)).collect(),
                composite: composite(spec, &rewards)?,
            })
        })
        .collect()
}

/// Outcome of a delayed-environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayedStep {
    pub next_state: State,
    /// Composite reward at segment ends and episode end, 0 elsewhere.
    pub observed_reward: f64,
    pub terminal: bool,
    pub done: bool,
    /// Underlying Markovian reward. For evaluation and oracle code only; the
    /// learner must never read it.
    pub hidden_reward: f64,
}

/// Wraps a per-step-reward environment so that rewards arrive only as
/// composites at the end of each length-`n` segment.
#[derive(Debug, Clone)]
pub struct DelayedEnv {
    inner: TabularEnv,
    delay: usize,
    spec: CompositeSpec,
    pending: Vec<f64>,
}

impl DelayedEnv {
    pub fn new(inner: TabularEnv, delay: usize, spec: CompositeSpec) -> Result<Self, CompositeError> {
        if delay == 0 {
            return Err(CompositeError::BadDelay(delay));
        }
        Ok(Self {
            inner,
            delay,
            spec,
            pending: Vec::with_capacity(delay),
        })
    }

    pub fn inner(&self) -> &TabularEnv {
        &self.inner
    }

    pub fn inner_mut(&mut self) -> &mut TabularEnv {
        &mut self.inner
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    pub fn spec(&self) -> &CompositeSpec {
        &self.spec
    }

    pub fn reset(&mut self) -> State {
        self.pending.clear();
        self.inner.reset()
    }

    pub fn step(&mut self, action: Action) -> Result<DelayedStep, CompositeError> {
        let step = self.inner.step(action)?;
        self.pending.push(step.reward);
        let observed_reward = if self.pending.len() == self.delay || step.done {
            let r = composite(&self.spec, &self.pending)?;
            self.pending.clear();
            r
        } else {
            0.0
        };
        Ok(DelayedStep {
            next_state: step.next_state,
            observed_reward,
            terminal: step.terminal,
            done: step.done,
            hidden_reward: step.reward,
        })
    }
}
