use std::collections::HashMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::diagnostics::{weight_report, WeightReport};
use super::{train_reward_model, Episode, ReplayBuffer, StoredStep, StoredTrajectory, TrainError, TrainerConfig};
use crate::autodiff::AdamW;
use crate::composite::{CompositeSpec, DelayedEnv};
use crate::envs::{Action, EnvSpec, State, TabularEnv};
use crate::model::RewardModel;
use crate::policy::{baseline_relabel, evaluate_policy, BaselineKind, EpsilonSchedule, QLearningConfig, QTable};

/// RNG stream ids: every consumer of randomness gets its own stream of the
/// run seed, so e.g. model training never shifts the environment's draws.
pub mod streams {
    pub const ENV: u64 = 1;
    pub const BEHAVIOR: u64 = 2;
    pub const REPLAY: u64 = 3;
    pub const MODEL: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const INIT: u64 = 6;
}

/// `ChaCha8Rng` for `seed` on stream `stream`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for an environment instance derived from the run seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    stream_rng(seed, stream).next_u64()
}

/// Where per-step rewards for policy updates come from.
pub trait RewardSource {
    /// Called after every stored trajectory with the total env steps so far.
    fn after_insert(&mut self, buffer: &ReplayBuffer, env_steps: usize) -> Result<(), TrainError>;

    /// Brings every stored trajectory's labels up to date.
    fn relabel(&mut self, buffer: &mut ReplayBuffer) -> Result<(), TrainError>;

    /// Label of step `t` of `traj` as of the last [`RewardSource::relabel`].
    /// Sources may compute it on demand instead of storing it.
    fn step_label(&mut self, traj: &StoredTrajectory, t: usize) -> Result<f64, TrainError> {
        traj.labels().map(|l| l[t]).ok_or(TrainError::LabelShape)
    }

    /// Reward-model losses recorded since the last call.
    fn drain_losses(&mut self) -> Vec<f64> {
        Vec::new()
    }

    fn model(&self) -> Option<&RewardModel> {
        None
    }
}

const MEMO_LIMIT: usize = 1 << 18;

/// Learned CoDeTr rewards.
pub struct CodetrSource {
    model: RewardModel,
    opt: AdamW,
    config: TrainerConfig,
    window: usize,
    rng: ChaCha8Rng,
    gradient_steps: usize,
    pretrained: bool,
    losses: Vec<f64>,
    /// Relabels by pair window under the model version in `memo_version`.
    memo: HashMap<Vec<(State, Action)>, f64>,
    memo_version: u64,
}

impl CodetrSource {
    /// `delay` sets the relabel window when the config leaves it unset.
    pub fn new(model: RewardModel, config: TrainerConfig, delay: usize, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let window = config.relabel_window.unwrap_or(delay);
        if window > model.config().max_window {
            return Err(TrainError::Config(format!(
                "relabel window {window} exceeds model window {}",
                model.config().max_window
            )));
        }
        let opt = AdamW::new(config.adamw(), model.params());
        Ok(Self {
            model,
            opt,
            config,
            window,
            rng: stream_rng(seed, streams::MODEL),
            gradient_steps: 0,
            pretrained: false,
            losses: Vec::new(),
            memo: HashMap::new(),
            memo_version: u64::MAX,
        })
    }

    pub fn into_model(self) -> RewardModel {
        self.model
    }

    pub fn gradient_steps(&self) -> usize {
        self.gradient_steps
    }

    pub fn model_ref(&self) -> &RewardModel {
        &self.model
    }

    fn sync_memo(&mut self) {
        if self.memo_version != self.model.version() {
            self.memo.clear();
            self.memo_version = self.model.version();
        }
    }

    /// Stores current-model labels on every trajectory whose labels are stale.
    pub fn relabel_buffer(&mut self, buffer: &mut ReplayBuffer) -> Result<usize, TrainError> {
        let tag = self.model.version();
        buffer.relabel_cached(tag, |traj| (0..traj.len()).map(|t| self.step_label(traj, t)).collect())
    }

    fn train(&mut self, buffer: &ReplayBuffer, iterations: usize) -> Result<(), TrainError> {
        let iterations = iterations.min(self.config.max_gradient_steps - self.gradient_steps);
        if iterations == 0 {
            return Ok(());
        }
        let stats = train_reward_model(
            &mut self.model,
            &mut self.opt,
            buffer,
            self.config.batch_size,
            iterations,
            &mut self.rng,
        )?;
        self.gradient_steps += iterations;
        self.losses.extend(stats.losses);
        Ok(())
    }
}

impl RewardSource for CodetrSource {
    fn after_insert(&mut self, buffer: &ReplayBuffer, env_steps: usize) -> Result<(), TrainError> {
        if self.pretrained {
            self.train(buffer, self.config.iterations_per_trajectory)
        } else if env_steps >= self.config.pretrain_steps {
            self.pretrained = true;
            self.train(buffer, self.config.pretrain_iterations)
        } else {
            Ok(())
        }
    }

    /// Only resets the memo when the model changed; labels are computed
    /// on demand by [`RewardSource::step_label`].
    fn relabel(&mut self, _buffer: &mut ReplayBuffer) -> Result<(), TrainError> {
        self.sync_memo();
        Ok(())
    }

    fn step_label(&mut self, traj: &StoredTrajectory, t: usize) -> Result<f64, TrainError> {
        self.sync_memo();
        let start = (t + 1).saturating_sub(self.window);
        let key: Vec<(State, Action)> = traj.steps[start..=t].iter().map(|s| (s.state, s.action)).collect();
        if let Some(&v) = self.memo.get(&key) {
            return Ok(v);
        }
        let v = self
            .model
            .relabel_last(&traj.window().slice(start, t + 1)?, self.config.relabel_output)?;
        if !v.is_finite() {
            return Err(TrainError::NonFiniteLabel { trajectory: traj.id, step: t });
        }
        if self.memo.len() >= MEMO_LIMIT {
            self.memo.clear();
        }
        self.memo.insert(key, v);
        Ok(v)
    }

    fn drain_losses(&mut self) -> Vec<f64> {
        std::mem::take(&mut self.losses)
    }

    fn model(&self) -> Option<&RewardModel> {
        Some(&self.model)
    }
}

/// Non-parametric relabeling baselines.
pub struct BaselineSource(pub BaselineKind);

impl RewardSource for BaselineSource {
    fn after_insert(&mut self, _: &ReplayBuffer, _: usize) -> Result<(), TrainError> {
        Ok(())
    }

    fn relabel(&mut self, buffer: &mut ReplayBuffer) -> Result<(), TrainError> {
        let labels = baseline_relabel(self.0, buffer)?;
        buffer.set_labels(labels)
    }
}

/// The hidden true step rewards: Q-learning on the true reward function.
pub struct OracleSource;

impl RewardSource for OracleSource {
    fn after_insert(&mut self, _: &ReplayBuffer, _: usize) -> Result<(), TrainError> {
        Ok(())
    }

    fn relabel(&mut self, buffer: &mut ReplayBuffer) -> Result<(), TrainError> {
        buffer.relabel_cached(0, |t| Ok(t.hidden_rewards().to_vec()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlternationConfig {
    pub total_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub delay: usize,
    pub composite: CompositeSpec,
    /// Policy updates begin once this many env steps are stored.
    pub policy_start: usize,
    pub buffer_capacity: usize,
    pub q: QLearningConfig,
}

impl AlternationConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.total_steps == 0 || self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(TrainError::Config(
                "total_steps, eval_interval and eval_episodes must be positive".into(),
            ));
        }
        if self.delay == 0 || self.buffer_capacity == 0 {
            return Err(TrainError::Config("delay and buffer_capacity must be positive".into()));
        }
        let q = &self.q;
        if !(0.0..=1.0).contains(&q.alpha) || !(0.0..=1.0).contains(&q.gamma) {
            return Err(TrainError::Config("alpha and gamma must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&q.epsilon_start) || !(0.0..=1.0).contains(&q.epsilon_end) {
            return Err(TrainError::Config("epsilon must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub eval_return: f64,
    pub normalized_score: f64,
    /// Mean reward-model loss since the previous row.
    pub model_loss: Option<f64>,
    pub mean_abs_weight_dev: Option<f64>,
    pub weight_argmax_hit_rate: Option<f64>,
}

pub const LOG_COLUMNS: [&str; 6] = [
    "step",
    "eval_return",
    "normalized_score",
    "model_loss",
    "mean_abs_weight_dev",
    "weight_argmax_hit_rate",
];

impl LogRow {
    pub fn csv_fields(&self) -> [String; 6] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.step.to_string(),
            self.eval_return.to_string(),
            self.normalized_score.to_string(),
            opt(self.model_loss),
            opt(self.mean_abs_weight_dev),
            opt(self.weight_argmax_hit_rate),
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentLog {
    pub rows: Vec<LogRow>,
}

impl ExperimentLog {
    pub fn final_return(&self) -> Option<f64> {
        self.rows.last().map(|r| r.eval_return)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(LOG_COLUMNS)?;
        for row in &self.rows {
            w.write_record(row.csv_fields())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> csv::Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Option<f64> { rec.get(i).filter(|s| !s.is_empty()).and_then(|s| s.parse().ok()) };
            rows.push(LogRow {
                step: rec.get(0).and_then(|s| s.parse().ok()).unwrap_or_default(),
                eval_return: num(1).unwrap_or(f64::NAN),
                normalized_score: num(2).unwrap_or(f64::NAN),
                model_loss: num(3),
                mean_abs_weight_dev: num(4),
                weight_argmax_hit_rate: num(5),
            });
        }
        Ok(Self { rows })
    }
}

pub struct RunOutcome {
    pub log: ExperimentLog,
    pub table: QTable,
    pub buffer: ReplayBuffer,
}

/// Collect, store, train, relabel and learn until `total_steps` env steps
/// have been collected; the last episode may run past the budget.
///
/// Evaluation rows are emitted at step 0, after the first episode that
/// crosses each multiple of `eval_interval`, and at the end. `on_row` sees
/// each row as soon as it is produced.
pub fn run_alternation(
    spec: &EnvSpec,
    config: &AlternationConfig,
    source: &mut dyn RewardSource,
    seed: u64,
    on_row: &mut dyn FnMut(&LogRow) -> std::io::Result<()>,
) -> Result<RunOutcome, TrainError> {
    config.validate()?;
    let inner = TabularEnv::new(spec.clone(), stream_seed(seed, streams::ENV));
    let mut env = DelayedEnv::new(inner, config.delay, config.composite)?;
    let mut behavior = stream_rng(seed, streams::BEHAVIOR);
    let mut replay_rng = stream_rng(seed, streams::REPLAY);
    let eval_base = stream_seed(seed, streams::EVAL);

    let q = &config.q;
    let mut table = QTable::new(spec.num_states, spec.num_actions, q.alpha, q.gamma);
    let epsilon = EpsilonSchedule::new(q, config.total_steps);
    let mut buffer = ReplayBuffer::new(
        config.buffer_capacity,
        config.delay,
        config.composite,
        spec.num_states,
        spec.num_actions,
    );
    let mut log = ExperimentLog::default();
    let mut env_steps = 0usize;
    let mut next_eval = config.eval_interval;

    let mut emit = |log: &mut ExperimentLog,
                    table: &QTable,
                    buffer: &ReplayBuffer,
                    source: &mut dyn RewardSource,
                    step: usize|
     -> Result<(), TrainError> {
        let eval = evaluate_policy(
            spec,
            table,
            &config.composite,
            config.delay,
            config.eval_episodes,
            eval_base.wrapping_add(step as u64),
        )?;
        let losses = source.drain_losses();
        let model_loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
        let report = match (source.model(), buffer.newest()) {
            (Some(model), Some(traj)) => Some(newest_weight_report(model, traj)?),
            _ => None,
        };
        let row = LogRow {
            step,
            eval_return: eval.mean_return,
            normalized_score: eval.normalized_score,
            model_loss,
            mean_abs_weight_dev: report.map(|r| r.mean_abs_dev),
            weight_argmax_hit_rate: report.map(|r| r.hit_rate()),
        };
        on_row(&row)?;
        log.rows.push(row);
        Ok(())
    };

    emit(&mut log, &table, &buffer, source, 0)?;
    while env_steps < config.total_steps {
        let mut episode = Episode::default();
        let mut s = env.reset();
        loop {
            let a = table.epsilon_greedy(s, epsilon.value(env_steps), &mut behavior);
            let step = env.step(a)?;
            episode.steps.push(StoredStep {
                state: s,
                action: a,
                next_state: step.next_state,
                observed_reward: step.observed_reward,
                terminal: step.terminal,
                done: step.done,
            });
            episode.hidden_rewards.push(step.hidden_reward);
            env_steps += 1;
            s = step.next_state;
            if step.done {
                break;
            }
        }
        let len = episode.steps.len();
        buffer.insert(episode)?;
        source.after_insert(&buffer, env_steps)?;

        if env_steps >= config.policy_start && q.updates_per_step > 0 {
            source.relabel(&mut buffer)?;
            for _ in 0..q.updates_per_step * len {
                let (i, t) = buffer.sample_step(&mut replay_rng).ok_or(TrainError::EmptyBuffer)?;
                let traj = buffer.get(i).expect("sampled index is stored");
                let r = source.step_label(traj, t)?;
                let st = traj.steps[t];
                table.q_update(st.state, st.action, r, st.next_state, st.terminal)?;
            }
        }

        if env_steps >= next_eval && env_steps < config.total_steps {
            emit(&mut log, &table, &buffer, source, env_steps)?;
            next_eval = (env_steps / config.eval_interval + 1) * config.eval_interval;
        }
    }
    emit(&mut log, &table, &buffer, source, env_steps)?;
    Ok(RunOutcome { log, table, buffer })
}

fn newest_weight_report(model: &RewardModel, traj: &super::StoredTrajectory) -> Result<WeightReport, TrainError> {
    let hidden = traj.hidden_rewards();
    let segs = traj
        .segment_windows()
        .iter()
        .zip(&traj.segments)
        .map(|(lw, seg)| (&lw.window, &hidden[seg.range()]));
    Ok(weight_report(model, segs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_spec, oracle, EnvParams};
    use crate::model::{RelabelOutput, RewardModelConfig};

    fn config(total: usize) -> AlternationConfig {
        AlternationConfig {
            total_steps: total,
            eval_interval: 200,
            eval_episodes: 5,
            delay: 5,
            composite: CompositeSpec::Sum,
            policy_start: 100,
            buffer_capacity: 20,
            q: QLearningConfig::default(),
        }
    }

    fn chain() -> EnvSpec {
        make_spec("chain_walk", &EnvParams::default()).unwrap()
    }

    #[test]
    fn rows_strictly_increase_and_start_at_zero() {
        let spec = chain();
        let out = run_alternation(&spec, &config(1000), &mut OracleSource, 1, &mut |_| Ok(())).unwrap();
        let steps: Vec<usize> = out.log.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps[0], 0);
        assert!(steps.windows(2).all(|w| w[0] < w[1]), "{steps:?}");
        assert!(*steps.last().unwrap() >= 1000);
    }

    #[test]
    fn oracle_learns_chain_walk() {
        let spec = chain();
        let out = run_alternation(&spec, &config(4000), &mut OracleSource, 2, &mut |_| Ok(())).unwrap();
        let (_, best) = oracle::planned_return(&spec, &oracle::value_iteration(&spec, 0.99, 1e-12));
        assert!((out.log.final_return().unwrap() - best).abs() < 1e-9);
    }

    #[test]
    fn same_seed_same_log() {
        let spec = chain();
        let mk = || {
            let m = RewardModel::new(
                RewardModelConfig {
                    embed_dim: 8,
                    num_causal_layers: 1,
                    max_window: 8,
                    ..RewardModelConfig::desk(spec.num_states, spec.num_actions)
                },
                0,
            )
            .unwrap();
            let tc = TrainerConfig {
                pretrain_steps: 100,
                pretrain_iterations: 3,
                iterations_per_trajectory: 1,
                max_gradient_steps: 10,
                batch_size: 4,
                ..TrainerConfig::default()
            };
            let mut src = CodetrSource::new(m, tc, 5, 9).unwrap();
            run_alternation(&spec, &config(400), &mut src, 9, &mut |_| Ok(())).unwrap().log
        };
        let a = mk();
        assert!(a.rows.iter().any(|r| r.model_loss.is_some()));
        assert_eq!(a, mk());
    }

    #[test]
    fn lazy_labels_match_full_relabel() {
        let (ns, na) = (4, 2);
        let cfg = RewardModelConfig {
            embed_dim: 8,
            num_causal_layers: 1,
            max_window: 8,
            ..RewardModelConfig::desk(ns, na)
        };
        let model = RewardModel::new(cfg, 3).unwrap();
        let mut buffer = ReplayBuffer::new(4, 3, CompositeSpec::Sum, ns, na);
        for e in 0..3 {
            let len = 7 + e;
            let steps = (0..len)
                .map(|t| StoredStep {
                    state: (t * (e + 1)) % ns,
                    action: (t + e) % na,
                    next_state: (t + 1) % ns,
                    observed_reward: if (t + 1) % 3 == 0 || t + 1 == len { 0.5 * (t % 3 + 1) as f64 } else { 0.0 },
                    terminal: t + 1 == len,
                    done: t + 1 == len,
                })
                .collect();
            buffer
                .insert(Episode {
                    steps,
                    hidden_rewards: vec![0.5; len],
                })
                .unwrap();
        }
        let mut src = CodetrSource::new(model.clone(), TrainerConfig::default(), 3, 0).unwrap();
        src.relabel(&mut buffer).unwrap();
        for traj in buffer.trajectories() {
            let eager = model.relabel(traj.window(), 3, RelabelOutput::Weighted).unwrap();
            for (t, &e) in eager.iter().enumerate() {
                assert_eq!(src.step_label(traj, t).unwrap(), e);
            }
        }
        // The stored path agrees too.
        src.relabel_buffer(&mut buffer).unwrap();
        for traj in buffer.trajectories() {
            let eager = model.relabel(traj.window(), 3, RelabelOutput::Weighted).unwrap();
            assert_eq!(traj.labels().unwrap(), eager.as_slice());
        }
    }

    #[test]
    fn csv_round_trip() {
        let log = ExperimentLog {
            rows: vec![LogRow {
                step: 3,
                eval_return: 0.1,
                normalized_score: -0.25,
                model_loss: None,
                mean_abs_weight_dev: Some(1e-7),
                weight_argmax_hit_rate: None,
            }],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,eval_return,normalized_score,model_loss,mean_abs_weight_dev"));
        assert_eq!(ExperimentLog::read_csv(&buf[..]).unwrap(), log);
    }
}
