use std::io::Write;

use anyhow::Result;

use crate::composite::{composite, CompositeSpec};
use crate::envs::{rollout, EnvSpec, RandomPolicy, State, Action, TabularEnv};
use crate::model::{composite_predict, RelabelOutput, RewardModel, Window};
use crate::trainer::diagnostics::{weight_report, WeightReport};
use crate::trainer::LabeledWindow;

/// A full-length segment from a random-policy rollout with its hidden rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSample {
    pub pairs: Vec<(State, Action)>,
    pub hidden: Vec<f64>,
    pub labeled: LabeledWindow,
}

/// Cuts random-policy episodes into consecutive length-`n` segments, dropping
/// any shorter tail, until `count` segments are collected.
pub fn collect_segments(
    spec: &EnvSpec,
    composite_spec: &CompositeSpec,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<SegmentSample>> {
    assert!(n >= 1);
    anyhow::ensure!(spec.max_steps >= n, "episodes of {} steps are shorter than n = {n}", spec.max_steps);
    let mut env = TabularEnv::new(spec.clone(), seed);
    let mut policy = RandomPolicy {
        num_actions: spec.num_actions,
    };
    let mut out = Vec::with_capacity(count);
    let mut episode = 0u64;
    while out.len() < count {
        let traj = rollout(&mut env, &mut policy, spec.max_steps, seed.wrapping_add(episode));
        episode += 1;
        let pairs = traj.pairs();
        let rewards = traj.rewards();
        for (p, r) in pairs.chunks_exact(n).zip(rewards.chunks_exact(n)) {
            if out.len() == count {
                break;
            }
            let window = Window::one_hot(p, spec.num_states, spec.num_actions)?;
            out.push(SegmentSample {
                pairs: p.to_vec(),
                hidden: r.to_vec(),
                labeled: LabeledWindow {
                    window,
                    target: composite(composite_spec, r)?,
                },
            });
        }
    }
    Ok(out)
}

/// Weight statistics of `model` on `samples`.
pub fn segment_report(model: &RewardModel, samples: &[SegmentSample]) -> Result<WeightReport> {
    Ok(weight_report(
        model,
        samples.iter().map(|s| (&s.labeled.window, s.hidden.as_slice())),
    )?)
}

/// One row of the per-step case-study table.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseStudyRow {
    pub episode: usize,
    pub step: usize,
    pub segment: usize,
    pub state: State,
    pub action: Action,
    pub hidden_reward: f64,
    pub relabeled_reward: f64,
    pub weight: f64,
}

pub struct CaseStudy {
    pub rows: Vec<CaseStudyRow>,
    pub report: WeightReport,
}

/// Random-policy episodes annotated with the model's per-segment weights and
/// its sliding-window relabels (window `delay`).
pub fn case_study(
    model: &RewardModel,
    spec: &EnvSpec,
    delay: usize,
    episodes: usize,
    mode: RelabelOutput,
    seed: u64,
) -> Result<CaseStudy> {
    let mut env = TabularEnv::new(spec.clone(), seed);
    let mut policy = RandomPolicy {
        num_actions: spec.num_actions,
    };
    let mut rows = Vec::new();
    let mut segments: Vec<(Window, Vec<f64>)> = Vec::new();
    for ep in 0..episodes {
        let traj = rollout(&mut env, &mut policy, spec.max_steps, seed.wrapping_add(ep as u64));
        let pairs = traj.pairs();
        let hidden = traj.rewards();
        let window = Window::one_hot(&pairs, spec.num_states, spec.num_actions)?;
        let relabels = model.relabel(&window, delay.min(model.config().max_window), mode)?;
        for (k, start) in (0..pairs.len()).step_by(delay).enumerate() {
            let end = (start + delay).min(pairs.len());
            let seg = window.slice(start, end)?;
            let out = model.encode(&seg)?;
            let pred = composite_predict(&out, 0, out.len())?;
            for t in start..end {
                rows.push(CaseStudyRow {
                    episode: ep,
                    step: t,
                    segment: k,
                    state: pairs[t].0,
                    action: pairs[t].1,
                    hidden_reward: hidden[t],
                    relabeled_reward: relabels[t],
                    weight: pred.weights[t - start],
                });
            }
            segments.push((seg, hidden[start..end].to_vec()));
        }
    }
    let report = weight_report(model, segments.iter().map(|(w, h)| (w, h.as_slice())))?;
    Ok(CaseStudy { rows, report })
}

pub fn write_case_csv<W: Write>(rows: &[CaseStudyRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "episode",
        "step",
        "segment",
        "state",
        "action",
        "hidden_reward",
        "relabeled_reward",
        "weight",
    ])?;
    for r in rows {
        w.write_record([
            r.episode.to_string(),
            r.step.to_string(),
            r.segment.to_string(),
            r.state.to_string(),
            r.action.to_string(),
            r.hidden_reward.to_string(),
            r.relabeled_reward.to_string(),
            r.weight.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
