use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{LabeledWindow, TrainError};
use crate::composite::{composite, CompositeSpec, Segment};
use crate::envs::{Action, State};
use crate::model::Window;

/// One step as the learner sees it: no hidden reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoredStep {
    pub state: State,
    pub action: Action,
    pub next_state: State,
    pub observed_reward: f64,
    pub terminal: bool,
    pub done: bool,
}

/// A collected episode: learner-visible steps plus the hidden step rewards,
/// which only evaluation and oracle code may read.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Episode {
    pub steps: Vec<StoredStep>,
    pub hidden_rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Labels {
    tag: Option<u64>,
    values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StoredTrajectory {
    pub id: u64,
    pub steps: Vec<StoredStep>,
    /// Segments with the observed composite reward of each.
    pub segments: Vec<Segment>,
    window: Window,
    segment_windows: Vec<LabeledWindow>,
    hidden_rewards: Vec<f64>,
    labels: Option<Labels>,
}

impl StoredTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Features of the whole trajectory.
    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn segment_windows(&self) -> &[LabeledWindow] {
        &self.segment_windows
    }

    /// Hidden step rewards. Evaluation and oracle code paths only.
    pub fn hidden_rewards(&self) -> &[f64] {
        &self.hidden_rewards
    }

    pub fn labels(&self) -> Option<&[f64]> {
        self.labels.as_ref().map(|l| l.values.as_slice())
    }
}

/// FIFO store of whole trajectories, cut into delay segments on insertion.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    delay: usize,
    spec: CompositeSpec,
    num_states: usize,
    num_actions: usize,
    trajectories: VecDeque<StoredTrajectory>,
    inserted: u64,
}

impl ReplayBuffer {
    /// `capacity` counts trajectories.
    pub fn new(capacity: usize, delay: usize, spec: CompositeSpec, num_states: usize, num_actions: usize) -> Self {
        assert!(capacity >= 1 && delay >= 1);
        Self {
            capacity,
            delay,
            spec,
            num_states,
            num_actions,
            trajectories: VecDeque::with_capacity(capacity),
            inserted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn insertions(&self) -> u64 {
        self.inserted
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(StoredTrajectory::len).sum()
    }

    pub fn num_segments(&self) -> usize {
        self.trajectories.iter().map(|t| t.segments.len()).sum()
    }

    pub fn trajectories(&self) -> impl ExactSizeIterator<Item = &StoredTrajectory> {
        self.trajectories.iter()
    }

    pub fn get(&self, i: usize) -> Option<&StoredTrajectory> {
        self.trajectories.get(i)
    }

    pub fn newest(&self) -> Option<&StoredTrajectory> {
        self.trajectories.back()
    }

    /// Stores an episode, evicting the oldest trajectory when full. Segment
    /// boundaries fall every `delay` steps and at the episode end; each
    /// segment's target is the observed reward at its boundary.
    pub fn insert(&mut self, episode: Episode) -> Result<u64, TrainError> {
        if episode.steps.is_empty() {
            return Err(TrainError::EmptyEpisode);
        }
        let pairs: Vec<(State, Action)> = episode.steps.iter().map(|s| (s.state, s.action)).collect();
        let window = Window::one_hot(&pairs, self.num_states, self.num_actions)?;
        let mut segments = Vec::new();
        let mut segment_windows = Vec::new();
        for (k, chunk) in pairs.chunks(self.delay).enumerate() {
            let start = k * self.delay;
            let end = start + chunk.len();
            let target = episode.steps[end - 1].observed_reward;
            debug_assert!(
                episode.hidden_rewards.len() != episode.steps.len() || {
                    let truth = composite(&self.spec, &episode.hidden_rewards[start..end]).unwrap();
                    truth == target
                },
                "observed composite differs from the hidden-reward composite"
            );
            segments.push(Segment {
                start,
                pairs: chunk.to_vec(),
                composite: target,
            });
            segment_windows.push(LabeledWindow {
                window: window.slice(start, end)?,
                target,
            });
        }
        if self.trajectories.len() == self.capacity {
            self.trajectories.pop_front();
        }
        let id = self.inserted;
        self.inserted += 1;
        self.trajectories.push_back(StoredTrajectory {
            id,
            steps: episode.steps,
            segments,
            window,
            segment_windows,
            hidden_rewards: episode.hidden_rewards,
            labels: None,
        });
        Ok(id)
    }

    /// Uniformly sampled segments (with replacement).
    pub fn sample_segments<'a>(&'a self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<&'a LabeledWindow>, TrainError> {
        let total = self.num_segments();
        if total == 0 {
            return Err(TrainError::EmptyBuffer);
        }
        let mut picks: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..total)).collect();
        picks.sort_unstable();
        let mut out = Vec::with_capacity(batch);
        let mut base = 0;
        let mut it = picks.iter().peekable();
        for traj in &self.trajectories {
            let n = traj.segment_windows.len();
            while let Some(&&p) = it.peek() {
                if p >= base + n {
                    break;
                }
                out.push(&traj.segment_windows[p - base]);
                it.next();
            }
            base += n;
        }
        Ok(out)
    }

    /// All segment windows currently stored.
    pub fn all_segments(&self) -> Vec<&LabeledWindow> {
        self.trajectories.iter().flat_map(|t| t.segment_windows.iter()).collect()
    }

    /// Replaces every trajectory's labels; `labels` is in buffer order.
    pub fn set_labels(&mut self, labels: Vec<Vec<f64>>) -> Result<(), TrainError> {
        if labels.len() != self.trajectories.len() {
            return Err(TrainError::LabelShape);
        }
        for (traj, values) in self.trajectories.iter_mut().zip(labels) {
            check_labels(traj, &values)?;
            traj.labels = Some(Labels { tag: None, values });
        }
        Ok(())
    }

    /// Recomputes labels of every trajectory whose cached labels were not
    /// produced under `tag`. Returns how many trajectories were relabeled.
    pub fn relabel_cached<F>(&mut self, tag: u64, mut label: F) -> Result<usize, TrainError>
    where
        F: FnMut(&StoredTrajectory) -> Result<Vec<f64>, TrainError>,
    {
        let mut count = 0;
        for traj in self.trajectories.iter_mut() {
            if traj.labels.as_ref().is_some_and(|l| l.tag == Some(tag)) {
                continue;
            }
            let values = label(traj)?;
            check_labels(traj, &values)?;
            traj.labels = Some(Labels { tag: Some(tag), values });
            count += 1;
        }
        Ok(count)
    }

    pub fn invalidate_labels(&mut self) {
        for traj in self.trajectories.iter_mut() {
            traj.labels = None;
        }
    }

    /// A uniformly chosen stored step as `(trajectory index, step index)`.
    pub fn sample_step(&self, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
        let total = self.num_steps();
        if total == 0 {
            return None;
        }
        let mut k = rng.gen_range(0..total);
        for (i, traj) in self.trajectories.iter().enumerate() {
            if k < traj.len() {
                return Some((i, k));
            }
            k -= traj.len();
        }
        None
    }
}

fn check_labels(traj: &StoredTrajectory, values: &[f64]) -> Result<(), TrainError> {
    if values.len() != traj.len() {
        return Err(TrainError::LabelShape);
    }
    if let Some(t) = values.iter().position(|v| !v.is_finite()) {
        return Err(TrainError::NonFiniteLabel { trajectory: traj.id, step: t });
    }
    Ok(())
}
