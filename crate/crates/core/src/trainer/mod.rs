//! Replay buffer, reward-model training and the collect/train/relabel/learn loop.

mod alternation;
mod buffer;
pub mod diagnostics;

pub use alternation::{
    run_alternation, stream_rng, stream_seed, streams, AlternationConfig, BaselineSource, CodetrSource,
    ExperimentLog, LogRow, OracleSource, RewardSource, RunOutcome, LOG_COLUMNS,
};
pub use buffer::{Episode, ReplayBuffer, StoredStep, StoredTrajectory};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamW, AdamWConfig, Graph, Tensor, TensorError, Var};
use crate::composite::CompositeError;
use crate::envs::EnvError;
use crate::model::{composite_predict, ModelError, RelabelOutput, RewardModel, Window};
use crate::policy::PolicyError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("replay buffer holds no segments")]
    EmptyBuffer,
    #[error("empty training batch")]
    EmptyBatch,
    #[error("cannot store an empty episode")]
    EmptyEpisode,
    #[error("label vector length does not match trajectory")]
    LabelShape,
    #[error("non-finite relabeled reward at trajectory {trajectory}, step {step}")]
    NonFiniteLabel { trajectory: u64, step: usize },
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Composite(#[from] CompositeError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("log sink: {0}")]
    Sink(#[from] std::io::Error),
}

/// A segment's features with its observed composite reward.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub window: Window,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Environment steps collected before the reward model is first trained.
    pub pretrain_steps: usize,
    pub pretrain_iterations: usize,
    pub iterations_per_trajectory: usize,
    /// Total reward-model gradient steps; training stops once reached.
    pub max_gradient_steps: usize,
    /// Replay capacity in trajectories.
    pub buffer_capacity: usize,
    /// Relabel window `H`; defaults to the delay length.
    pub relabel_window: Option<usize>,
    pub relabel_output: RelabelOutput,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            warmup_steps: 100,
            pretrain_steps: 1000,
            pretrain_iterations: 50,
            iterations_per_trajectory: 5,
            max_gradient_steps: 1000,
            buffer_capacity: 50,
            relabel_window: None,
            relabel_output: RelabelOutput::Weighted,
        }
    }
}

impl TrainerConfig {
    /// Full-scale budgets: batch 64, lr 5e-5, 10k-step pretraining set,
    /// 100 pretraining iterations, 10 per trajectory, 10k gradient steps.
    pub fn full() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 5e-5,
            weight_decay: 1e-4,
            warmup_steps: 100,
            pretrain_steps: 10_000,
            pretrain_iterations: 100,
            iterations_per_trajectory: 10,
            max_gradient_steps: 10_000,
            buffer_capacity: 1000,
            relabel_window: Some(100),
            relabel_output: RelabelOutput::Weighted,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("batch_size", self.batch_size),
            ("pretrain_steps", self.pretrain_steps),
            ("pretrain_iterations", self.pretrain_iterations),
            ("iterations_per_trajectory", self.iterations_per_trajectory),
            ("max_gradient_steps", self.max_gradient_steps),
            ("buffer_capacity", self.buffer_capacity),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config("learning_rate must be > 0 and weight_decay >= 0".into()));
        }
        if self.relabel_window == Some(0) {
            return Err(TrainError::Config("relabel_window must be positive".into()));
        }
        Ok(())
    }
}

/// Mean over the batch of `(R_co − R̂_co)²`, as a graph node.
pub fn reward_model_loss(
    model: &RewardModel,
    g: &mut Graph,
    params: &[Var],
    batch: &[&LabeledWindow],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total: Option<Var> = None;
    for item in batch {
        let enc = model.forward(g, params, &item.window, dropout_rng.as_deref_mut())?;
        let (pred, _) = model.composite_vars(g, &enc, 0, item.window.len())?;
        let target = g.constant(Tensor::scalar(item.target));
        let r = g.sub(target, pred)?;
        let sq = g.mul(r, r)?;
        total = Some(match total {
            Some(t) => g.add(t, sq)?,
            None => sq,
        });
    }
    let total = total.expect("nonempty batch");
    Ok(g.scale(total, 1.0 / batch.len() as f64))
}

/// Eval-mode loss over a dataset, without building gradients.
pub fn dataset_loss(model: &RewardModel, data: &[LabeledWindow]) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total = 0.0;
    for item in data {
        let out = model.encode(&item.window)?;
        let pred = composite_predict(&out, 0, out.len())?;
        let r = item.target - pred.composite;
        total += r * r;
    }
    Ok(total / data.len() as f64)
}

/// Loss value and per-parameter gradients for one batch.
pub fn loss_and_grads(
    model: &RewardModel,
    batch: &[&LabeledWindow],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let loss = reward_model_loss(model, &mut g, &params, batch, dropout_rng)?;
    g.backward(loss)?;
    let grads = params
        .iter()
        .map(|&p| g.grad(p).expect("parameters require grad").to_vec())
        .collect();
    Ok((g.value(loss).item(), grads))
}

/// One AdamW step on `batch`; returns the pre-update loss.
pub fn train_step(
    model: &mut RewardModel,
    opt: &mut AdamW,
    batch: &[&LabeledWindow],
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let dropout = (model.config().dropout > 0.0).then_some(&mut *rng);
    let (loss, grads) = loss_and_grads(model, batch, dropout)?;
    opt.step(model.params_mut(), &grads)?;
    Ok(loss)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainStats {
    pub losses: Vec<f64>,
}

impl TrainStats {
    pub fn mean_loss(&self) -> Option<f64> {
        (!self.losses.is_empty()).then(|| self.losses.iter().sum::<f64>() / self.losses.len() as f64)
    }
}

/// `iterations` AdamW steps on batches sampled uniformly from the buffer.
pub fn train_reward_model(
    model: &mut RewardModel,
    opt: &mut AdamW,
    buffer: &ReplayBuffer,
    batch_size: usize,
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainStats, TrainError> {
    if buffer.num_segments() == 0 {
        return Err(TrainError::EmptyBuffer);
    }
    let mut stats = TrainStats::default();
    for _ in 0..iterations {
        let batch = buffer.sample_segments(batch_size, rng)?;
        stats.losses.push(train_step(model, opt, &batch, rng)?);
    }
    Ok(stats)
}

/// `iterations` AdamW steps on batches sampled uniformly from a fixed dataset.
pub fn train_on_windows(
    model: &mut RewardModel,
    opt: &mut AdamW,
    data: &[LabeledWindow],
    batch_size: usize,
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainStats, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyBuffer);
    }
    let mut stats = TrainStats::default();
    for _ in 0..iterations {
        let batch: Vec<&LabeledWindow> = (0..batch_size).map(|_| &data[rng.gen_range(0..data.len())]).collect();
        stats.losses.push(train_step(model, opt, &batch, rng)?);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RewardModelConfig;
    use rand::SeedableRng;

    fn model() -> RewardModel {
        let cfg = RewardModelConfig {
            embed_dim: 8,
            max_window: 6,
            ..RewardModelConfig::desk(3, 2)
        };
        RewardModel::new(cfg, 1).unwrap()
    }

    fn item(pairs: &[(usize, usize)], target: f64) -> LabeledWindow {
        LabeledWindow {
            window: Window::one_hot(pairs, 3, 2).unwrap(),
            target,
        }
    }

    #[test]
    fn loss_zero_when_prediction_matches() {
        let m = model();
        let w = Window::one_hot(&[(0, 1), (2, 0)], 3, 2).unwrap();
        let out = m.encode(&w).unwrap();
        let pred = composite_predict(&out, 0, 2).unwrap().composite;
        let data = vec![LabeledWindow { window: w, target: pred }];
        let (loss, _) = loss_and_grads(&m, &data.iter().collect::<Vec<_>>(), None).unwrap();
        assert!(loss.abs() < 1e-24, "{loss}");
    }

    #[test]
    fn loss_four_for_residual_two() {
        let mut m = model();
        // Zero reward head: R̂ = 0 for any window.
        let n = m.params().len();
        for p in &mut m.params_mut()[n - 6..n - 4] {
            p.data_mut().fill(0.0);
        }
        let data = [item(&[(1, 1), (0, 0), (2, 1)], 2.0)];
        let (loss, _) = loss_and_grads(&m, &data.iter().collect::<Vec<_>>(), None).unwrap();
        assert_eq!(loss, 4.0);
        assert_eq!(dataset_loss(&m, &data).unwrap(), 4.0);
    }

    #[test]
    fn overlong_segment_is_rejected() {
        let m = model();
        let data = [item(&[(0, 0); 7], 1.0)];
        assert!(matches!(
            loss_and_grads(&m, &data.iter().collect::<Vec<_>>(), None),
            Err(TrainError::Model(ModelError::WindowTooLong { .. }))
        ));
        assert!(matches!(
            loss_and_grads(&m, &[], None),
            Err(TrainError::EmptyBatch)
        ));
    }

    #[test]
    fn zero_iterations_leave_parameters_unchanged() {
        let mut m = model();
        let before = m.params().to_vec();
        let mut opt = AdamW::new(TrainerConfig::default().adamw(), m.params());
        let data = [item(&[(0, 1)], 1.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stats = train_on_windows(&mut m, &mut opt, &data, 4, 0, &mut rng).unwrap();
        assert!(stats.losses.is_empty());
        assert_eq!(m.params(), before.as_slice());
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let data: Vec<LabeledWindow> = (0..6)
            .map(|i| item(&[(i % 3, i % 2), ((i + 1) % 3, 1)], i as f64 * 0.1))
            .collect();
        let run = || {
            let mut m = model();
            let mut opt = AdamW::new(TrainerConfig::default().adamw(), m.params());
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            train_on_windows(&mut m, &mut opt, &data, 3, 5, &mut rng).unwrap().losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_buffer_is_an_error() {
        let mut m = model();
        let mut opt = AdamW::new(TrainerConfig::default().adamw(), m.params());
        let buf = ReplayBuffer::new(2, 2, crate::composite::CompositeSpec::Sum, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            train_reward_model(&mut m, &mut opt, &buf, 2, 1, &mut rng),
            Err(TrainError::EmptyBuffer)
        ));
    }
}
