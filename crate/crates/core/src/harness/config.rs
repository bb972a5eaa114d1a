use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::composite::CompositeSpec;
use crate::envs::{make_spec, EnvParams, EnvSpec};
use crate::model::RewardModelConfig;
use crate::policy::{BaselineKind, QLearningConfig};
use crate::trainer::{AlternationConfig, TrainerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Codetr,
    RawDelayed,
    UniformSplit,
    Ircr,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Codetr,
        Method::RawDelayed,
        Method::UniformSplit,
        Method::Ircr,
        Method::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Codetr => "codetr",
            Method::RawDelayed => "raw_delayed",
            Method::UniformSplit => "uniform_split",
            Method::Ircr => "ircr",
            Method::Oracle => "oracle",
        }
    }

    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            Method::RawDelayed => Some(BaselineKind::RawDelayed),
            Method::UniformSplit => Some(BaselineKind::UniformSplit),
            Method::Ircr => Some(BaselineKind::Ircr),
            Method::Codetr | Method::Oracle => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_eval_episodes() -> usize {
    10
}

fn default_outdir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub env: String,
    pub method: Method,
    pub delay: usize,
    pub total_steps: usize,
    pub eval_interval: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_outdir")]
    pub outdir: PathBuf,
    /// Env steps collected before any policy update; defaults to
    /// `trainer.pretrain_steps` for every method.
    #[serde(default)]
    pub policy_start: Option<usize>,
}

/// Reward-model knobs; feature sizes come from the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub num_causal_layers: usize,
    pub num_inseq_layers: usize,
    pub num_heads: usize,
    pub max_window: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = RewardModelConfig::desk(1, 1);
        Self {
            embed_dim: d.embed_dim,
            num_causal_layers: d.num_causal_layers,
            num_inseq_layers: d.num_inseq_layers,
            num_heads: d.num_heads,
            max_window: d.max_window,
            dropout: d.dropout,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, state_dim: usize, action_dim: usize) -> RewardModelConfig {
        RewardModelConfig {
            state_dim,
            action_dim,
            embed_dim: self.embed_dim,
            num_causal_layers: self.num_causal_layers,
            num_inseq_layers: self.num_inseq_layers,
            num_heads: self.num_heads,
            max_window: self.max_window,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub env_params: EnvParams,
    pub composite: CompositeSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub policy: QLearningConfig,
}

/// A rejected config, with the offending field and its line when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: Option<PathBuf>,
    pub line: Option<usize>,
    pub field: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(p) = &self.path {
            write!(f, "{}", p.display())?;
            if let Some(l) = self.line {
                write!(f, ":{l}")?;
            }
            write!(f, ": ")?;
        } else if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        if let Some(field) = &self.field {
            write!(f, "`{field}`: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: Some(path.to_path_buf()),
            line: None,
            field: None,
            message: format!("cannot read config: {e}"),
        })?;
        let cfg = Self::parse(&text).map_err(|mut e| {
            e.path = Some(path.to_path_buf());
            e
        })?;
        Ok((cfg, text))
    }

    /// Parses and validates TOML text.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError {
            path: None,
            line: e.span().map(|s| line_of(text, s.start)),
            field: None,
            message: e.message().trim().to_string(),
        })?;
        cfg.validate().map_err(|(section, key, message)| ConfigError {
            path: None,
            line: locate(text, section, &key),
            field: Some(format!("{section}.{key}")),
            message,
        })?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), (&'static str, String, String)> {
        let e = &self.experiment;
        let spec = make_spec(&e.env, &self.env_params).map_err(|err| match err {
            crate::envs::EnvError::BadParam { field, msg } => ("env_params", field.to_string(), msg),
            other => ("experiment", "env".into(), other.to_string()),
        })?;
        if e.seeds.is_empty() {
            return Err(("experiment", "seeds".into(), "seed list must be nonempty".into()));
        }
        for (key, v) in [
            ("delay", e.delay),
            ("total_steps", e.total_steps),
            ("eval_interval", e.eval_interval),
            ("eval_episodes", e.eval_episodes),
        ] {
            if v == 0 {
                return Err(("experiment", key.into(), "must be positive".into()));
            }
        }
        if e.method == Method::Codetr {
            let m = &self.model;
            if e.delay > m.max_window {
                return Err((
                    "experiment",
                    "delay".into(),
                    format!("delay {} exceeds model.max_window {} for method codetr", e.delay, m.max_window),
                ));
            }
            self.model
                .model_config(spec.num_states, spec.num_actions)
                .validate()
                .map_err(|err| ("model", "embed_dim".into(), err.to_string()))?;
            if let Some(h) = self.trainer.relabel_window {
                if h > m.max_window {
                    return Err((
                        "trainer",
                        "relabel_window".into(),
                        format!("relabel_window {h} exceeds model.max_window {}", m.max_window),
                    ));
                }
            }
        }
        self.trainer
            .validate()
            .map_err(|err| ("trainer", leading_field(&err.to_string()), err.to_string()))?;
        self.alternation()
            .validate()
            .map_err(|err| ("policy", leading_field(&err.to_string()), err.to_string()))?;
        crate::harness::score::normalized_score(&self.composite, e.delay, spec.max_steps, spec.r_max, 0.0)
            .map_err(|err| ("experiment", "env".into(), err.to_string()))?;
        Ok(())
    }

    pub fn env_spec(&self) -> EnvSpec {
        make_spec(&self.experiment.env, &self.env_params).expect("validated config")
    }

    pub fn alternation(&self) -> AlternationConfig {
        let e = &self.experiment;
        AlternationConfig {
            total_steps: e.total_steps,
            eval_interval: e.eval_interval,
            eval_episodes: e.eval_episodes,
            delay: e.delay,
            composite: self.composite,
            policy_start: e.policy_start.unwrap_or(self.trainer.pretrain_steps),
            buffer_capacity: self.trainer.buffer_capacity,
            q: self.policy,
        }
    }

    pub fn model_config(&self, spec: &EnvSpec) -> RewardModelConfig {
        self.model.model_config(spec.num_states, spec.num_actions)
    }
}

/// First identifier of a validation message, which names the field.
fn leading_field(msg: &str) -> String {
    let msg = msg.strip_prefix("invalid trainer config: ").unwrap_or(msg);
    msg.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .next()
        .unwrap_or_default()
        .to_string()
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key = ...` inside `[section]`, or of the section header.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    header
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
[experiment]
env = "chain_walk"
method = "codetr"
delay = 5
total_steps = 2000
eval_interval = 500
seeds = [1, 2]

[composite]
kind = "max"
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::parse(GOOD).unwrap();
        assert_eq!(cfg.composite, CompositeSpec::Max { beta: 3.0 });
        assert_eq!(cfg.trainer, TrainerConfig::default());
        assert_eq!(cfg.experiment.eval_episodes, 10);
        assert_eq!(cfg.alternation().policy_start, 1000);
    }

    #[test]
    fn delay_beyond_window_names_field_and_line() {
        let text = GOOD.replace("delay = 5", "delay = 80");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert_eq!(err.field.as_deref(), Some("experiment.delay"));
        assert_eq!(err.line, Some(5));
        // Baselines have no model window.
        let text = text.replace("\"codetr\"", "\"ircr\"");
        assert!(ExperimentConfig::parse(&text).is_ok());
    }

    #[test]
    fn empty_seeds_and_unknown_keys_are_rejected() {
        let err = ExperimentConfig::parse(&GOOD.replace("[1, 2]", "[]")).unwrap_err();
        assert_eq!(err.field.as_deref(), Some("experiment.seeds"));
        let err = ExperimentConfig::parse(&GOOD.replace("delay = 5", "delay = 5\ndelya = 3")).unwrap_err();
        assert!(err.message.contains("delya"), "{err}");
        assert_eq!(err.line, Some(6));
        let err = ExperimentConfig::parse(&GOOD.replace("\"max\"", "\"max\"\nbeta = -1.0")).unwrap_err();
        assert!(err.line.is_some(), "{err}");
    }

    #[test]
    fn unknown_env_is_reported() {
        let err = ExperimentConfig::parse(&GOOD.replace("chain_walk", "maze")).unwrap_err();
        assert_eq!(err.field.as_deref(), Some("experiment.env"));
        assert_eq!(err.line, Some(3));
    }
}
