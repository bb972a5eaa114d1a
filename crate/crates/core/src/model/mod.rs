//! The composite delayed reward transformer.
//!
//! A GPT-style causal transformer reads interleaved state/action tokens and
//! produces one embedding `x_t` per pair, read at the action token. A linear
//! head turns `x_t` into an instance reward `r̂_t`; two more projections give
//! `q_t` and `k_t`. Inside a segment, a single bidirectional attention row
//! per query yields importance weights `w_t` (column sums of the attention
//! matrix) and the composite prediction `R̂ = Σ_t w_t r̂_t`.

mod checkpoint;
mod infer;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CheckpointError, FORMAT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::envs::{Action, State};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("window of length {len} exceeds model window {max}")]
    WindowTooLong { len: usize, max: usize },
    #[error("empty window")]
    EmptyWindow,
    #[error("window features are {got_state}x{got_action}, model expects {want_state}x{want_action}")]
    FeatureDims {
        got_state: usize,
        got_action: usize,
        want_state: usize,
        want_action: usize,
    },
    #[error("segment range {start}..{end} invalid for window of length {len}")]
    BadRange { start: usize, end: usize, len: usize },
    #[error("relabel window {h} must be in 1..={max}")]
    BadRelabelWindow { h: usize, max: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModelConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub embed_dim: usize,
    pub num_causal_layers: usize,
    pub num_inseq_layers: usize,
    pub num_heads: usize,
    pub max_window: usize,
    pub dropout: f64,
}

impl RewardModelConfig {
    /// Desk-scale defaults: 2 causal layers, 2 heads, d = 32, M = 64.
    pub fn desk(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            embed_dim: 32,
            num_causal_layers: 2,
            num_inseq_layers: 1,
            num_heads: 2,
            max_window: 64,
            dropout: 0.0,
        }
    }

    /// Full-size settings: 3 causal layers, 4 heads, d = 256, dropout 0.1.
    pub fn full(state_dim: usize, action_dim: usize, max_window: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            embed_dim: 256,
            num_causal_layers: 3,
            num_inseq_layers: 1,
            num_heads: 4,
            max_window,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.state_dim == 0 || self.action_dim == 0 {
            return bad("state_dim and action_dim must be positive".into());
        }
        if self.embed_dim < 2 {
            return bad(format!("embed_dim must be >= 2, got {}", self.embed_dim));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.max_window == 0 {
            return bad("max_window must be >= 1".into());
        }
        if self.num_inseq_layers != 1 {
            return bad(format!(
                "exactly one in-sequence attention layer is supported, got {}",
                self.num_inseq_layers
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Shapes of every parameter tensor in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let mut shapes = vec![
            ("state_embed.w".to_string(), vec![self.state_dim, d]),
            ("state_embed.b".to_string(), vec![d]),
            ("action_embed.w".to_string(), vec![self.action_dim, d]),
            ("action_embed.b".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![self.max_window, d]),
        ];
        for l in 0..self.num_causal_layers {
            for (name, shape) in [
                ("ln1.g", vec![d]),
                ("ln1.b", vec![d]),
                ("attn.qkv.w", vec![d, 3 * d]),
                ("attn.qkv.b", vec![3 * d]),
                ("attn.proj.w", vec![d, d]),
                ("attn.proj.b", vec![d]),
                ("ln2.g", vec![d]),
                ("ln2.b", vec![d]),
                ("mlp.fc.w", vec![d, 4 * d]),
                ("mlp.fc.b", vec![4 * d]),
                ("mlp.proj.w", vec![4 * d, d]),
                ("mlp.proj.b", vec![d]),
            ] {
                shapes.push((format!("block{l}.{name}"), shape));
            }
        }
        for (name, shape) in [
            ("ln_f.g", vec![d]),
            ("ln_f.b", vec![d]),
            ("reward_head.w", vec![d, 1]),
            ("reward_head.b", vec![1]),
            ("query.w", vec![d, d]),
            ("query.b", vec![d]),
            ("key.w", vec![d, d]),
            ("key.b", vec![d]),
        ] {
            shapes.push((name.to_string(), shape));
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

const BLOCK_PARAMS: usize = 12;
const EMBED_PARAMS: usize = 5;

/// Feature matrices for a run of `(state, action)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    states: Tensor,
    actions: Tensor,
}

impl Window {
    /// `states` is `[L, state_dim]`, `actions` is `[L, action_dim]`.
    pub fn from_features(states: Tensor, actions: Tensor) -> Result<Self, ModelError> {
        let (ls, _) = states.dims2("window")?;
        let (la, _) = actions.dims2("window")?;
        if ls != la {
            return Err(TensorError::Shape {
                op: "window",
                lhs: states.shape().to_vec(),
                rhs: actions.shape().to_vec(),
            }
            .into());
        }
        Ok(Self { states, actions })
    }

    /// One-hot encoding of discrete pairs.
    pub fn one_hot(pairs: &[(State, Action)], num_states: usize, num_actions: usize) -> Result<Self, ModelError> {
        if pairs.is_empty() {
            return Err(ModelError::EmptyWindow);
        }
        let mut s = vec![0.0; pairs.len() * num_states];
        let mut a = vec![0.0; pairs.len() * num_actions];
        for (t, &(state, action)) in pairs.iter().enumerate() {
            if state >= num_states || action >= num_actions {
                return Err(ModelError::FeatureDims {
                    got_state: state,
                    got_action: action,
                    want_state: num_states,
                    want_action: num_actions,
                });
            }
            s[t * num_states + state] = 1.0;
            a[t * num_actions + action] = 1.0;
        }
        Ok(Self {
            states: Tensor::new(vec![pairs.len(), num_states], s)?,
            actions: Tensor::new(vec![pairs.len(), num_actions], a)?,
        })
    }

    pub fn len(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn states(&self) -> &Tensor {
        &self.states
    }

    pub fn actions(&self) -> &Tensor {
        &self.actions
    }

    /// Rows `start..end` as a new window.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self, ModelError> {
        if start >= end || end > self.len() {
            return Err(ModelError::BadRange {
                start,
                end,
                len: self.len(),
            });
        }
        let cut = |t: &Tensor| {
            let c = t.last_dim();
            Tensor::new(vec![end - start, c], t.data()[start * c..end * c].to_vec())
        };
        Ok(Self {
            states: cut(&self.states)?,
            actions: cut(&self.actions)?,
        })
    }

    /// Overwrites pair `t` with new feature rows.
    pub fn set_pair(&mut self, t: usize, state: &[f64], action: &[f64]) {
        let ds = self.states.last_dim();
        let da = self.actions.last_dim();
        self.states.data_mut()[t * ds..(t + 1) * ds].copy_from_slice(state);
        self.actions.data_mut()[t * da..(t + 1) * da].copy_from_slice(action);
    }
}

/// Per-pair outputs of [`RewardModel::encode`].
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutput {
    /// `[L, d]` causal embeddings read at the action tokens.
    pub embeddings: Tensor,
    pub rewards: Vec<f64>,
    /// `[L, d]`
    pub queries: Tensor,
    /// `[L, d]`
    pub keys: Tensor,
}

impl SequenceOutput {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Composite prediction for one segment of an encoded window.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositePrediction {
    pub composite: f64,
    pub weights: Vec<f64>,
}

/// Graph handles produced by a differentiable forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub embeddings: Var,
    pub rewards: Var,
    pub queries: Var,
    pub keys: Var,
}

/// Which per-step quantity relabeling emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelabelOutput {
    /// `w_t · r̂_t`: the in-sequence attention output at step `t`.
    #[default]
    Weighted,
    /// `r̂_t` alone.
    Instance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    config: RewardModelConfig,
    params: Vec<Tensor>,
    version: u64,
}

impl RewardModel {
    /// Freshly initialised model. Weights are N(0, 0.02²) with residual
    /// projections scaled by 1/√(2·layers); biases zero; layer-norm gains one.
    pub fn new(config: RewardModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.num_causal_layers.max(1) as f64).sqrt();
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let data = if name.ends_with(".g") {
                    vec![1.0; numel]
                } else if name.ends_with(".b") {
                    vec![0.0; numel]
                } else {
                    let s = if name.ends_with("proj.w") { resid_std } else { std };
                    let normal = Normal::new(0.0, s).expect("valid std");
                    (0..numel).map(|_| normal.sample(&mut rng)).collect()
                };
                Tensor::new(shape, data).expect("shape from config")
            })
            .collect();
        Ok(Self {
            config,
            params,
            version: 0,
        })
    }

    pub(crate) fn from_parts(config: RewardModelConfig, params: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|((_, s), p)| s.as_slice() != p.shape())
        {
            return Err(ModelError::Config("parameter shapes do not match config".into()));
        }
        Ok(Self {
            config,
            params,
            version: 0,
        })
    }

    pub fn config(&self) -> &RewardModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Mutable parameter access; bumps [`version`](Self::version).
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        self.version += 1;
        &mut self.params
    }

    /// Counter that changes whenever parameters may have changed.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Zeroes the query and key projections so every attention row is uniform.
    pub fn zero_query_key(&mut self) {
        let n = self.params.len();
        for p in &mut self.params_mut()[n - 4..] {
            p.data_mut().fill(0.0);
        }
    }

    fn check_window(&self, window: &Window) -> Result<(), ModelError> {
        let len = window.len();
        if len == 0 {
            return Err(ModelError::EmptyWindow);
        }
        if len > self.config.max_window {
            return Err(ModelError::WindowTooLong {
                len,
                max: self.config.max_window,
            });
        }
        let (ds, da) = (window.states.last_dim(), window.actions.last_dim());
        if ds != self.config.state_dim || da != self.config.action_dim {
            return Err(ModelError::FeatureDims {
                got_state: ds,
                got_action: da,
                want_state: self.config.state_dim,
                want_action: self.config.action_dim,
            });
        }
        Ok(())
    }

    /// Adds every parameter to `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p)).collect()
    }

    /// Adds every parameter to `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    /// Differentiable forward pass over `window`. Dropout is applied only
    /// when `dropout_rng` is given.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        window: &Window,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncodedVars, ModelError> {
        self.check_window(window)?;
        let cfg = &self.config;
        let (len, d, heads) = (window.len(), cfg.embed_dim, cfg.num_heads);
        let head_dim = d / heads;
        let rate = cfg.dropout;
        let mut drop = |g: &mut Graph, v: Var| match dropout_rng.as_deref_mut() {
            Some(rng) => g.dropout(v, rate, rng),
            None => v,
        };

        let s = g.constant(window.states.clone());
        let a = g.constant(window.actions.clone());
        let pos = g.slice_rows(p[4], 0, len)?;
        let es = g.matmul(s, p[0])?;
        let es = g.add_bias(es, p[1])?;
        let es = g.add(es, pos)?;
        let ea = g.matmul(a, p[2])?;
        let ea = g.add_bias(ea, p[3])?;
        let ea = g.add(ea, pos)?;
        // Interleave: s_0, a_0, s_1, a_1, ...
        let stacked = g.concat_rows(&[es, ea])?;
        let order: Vec<usize> = (0..len).flat_map(|t| [t, len + t]).collect();
        let mut h = g.gather_rows(stacked, &order)?;
        h = drop(g, h);

        let scale = 1.0 / (head_dim as f64).sqrt();
        for l in 0..cfg.num_causal_layers {
            let b = &p[EMBED_PARAMS + l * BLOCK_PARAMS..EMBED_PARAMS + (l + 1) * BLOCK_PARAMS];
            let x = g.layer_norm(h, b[0], b[1])?;
            let qkv = g.matmul(x, b[2])?;
            let qkv = g.add_bias(qkv, b[3])?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let lo = hd * head_dim;
                let q = g.slice_cols(qkv, lo, lo + head_dim)?;
                let k = g.slice_cols(qkv, d + lo, d + lo + head_dim)?;
                let v = g.slice_cols(qkv, 2 * d + lo, 2 * d + lo + head_dim)?;
                let kt = g.transpose(k)?;
                let scores = g.matmul(q, kt)?;
                let scores = g.scale(scores, scale);
                let att = g.causal_softmax(scores)?;
                let att = drop(g, att);
                outs.push(g.matmul(att, v)?);
            }
            let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
            let o = g.matmul(cat, b[4])?;
            let o = g.add_bias(o, b[5])?;
            let o = drop(g, o);
            h = g.add(h, o)?;

            let x = g.layer_norm(h, b[6], b[7])?;
            let m = g.matmul(x, b[8])?;
            let m = g.add_bias(m, b[9])?;
            let m = g.gelu(m);
            let m = g.matmul(m, b[10])?;
            let m = g.add_bias(m, b[11])?;
            let m = drop(g, m);
            h = g.add(h, m)?;
        }
        let head = &p[EMBED_PARAMS + cfg.num_causal_layers * BLOCK_PARAMS..];
        let h = g.layer_norm(h, head[0], head[1])?;
        let action_rows: Vec<usize> = (0..len).map(|t| 2 * t + 1).collect();
        let x = g.gather_rows(h, &action_rows)?;
        let r = g.matmul(x, head[2])?;
        let r = g.add_bias(r, head[3])?;
        let q = g.matmul(x, head[4])?;
        let q = g.add_bias(q, head[5])?;
        let k = g.matmul(x, head[6])?;
        let k = g.add_bias(k, head[7])?;
        Ok(EncodedVars {
            embeddings: x,
            rewards: r,
            queries: q,
            keys: k,
        })
    }

    /// Differentiable in-sequence attention over rows `start..end` of an
    /// encoded window. Returns `(R̂, w)` where `R̂` is the double sum
    /// `Σ_i Σ_t softmax_i[t]·r̂_t` and `w` is `[1, n]`.
    pub fn composite_vars(
        &self,
        g: &mut Graph,
        enc: &EncodedVars,
        start: usize,
        end: usize,
    ) -> Result<(Var, Var), ModelError> {
        let len = g.value(enc.rewards).shape()[0];
        if start >= end || end > len {
            return Err(ModelError::BadRange { start, end, len });
        }
        let q = g.slice_rows(enc.queries, start, end)?;
        let k = g.slice_rows(enc.keys, start, end)?;
        let r = g.slice_rows(enc.rewards, start, end)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / (self.config.embed_dim as f64).sqrt());
        let att = g.softmax(logits, 1)?;
        let per_query = g.matmul(att, r)?;
        let composite = g.sum(per_query);
        let ones = g.constant(Tensor::filled(&[1, end - start], 1.0));
        let weights = g.matmul(ones, att)?;
        Ok((composite, weights))
    }

    /// Eval-mode forward pass (no dropout, no gradient tracking).
    pub fn encode(&self, window: &Window) -> Result<SequenceOutput, ModelError> {
        self.check_window(window)?;
        Ok(infer::encode(&self.config, &self.params, window))
    }

    /// Eval-mode forward pass through the differentiable graph.
    pub fn encode_graph(&self, window: &Window) -> Result<SequenceOutput, ModelError> {
        self.encode_with(window, None)
    }

    /// Forward pass with dropout active, driven by `rng`.
    pub fn encode_train(&self, window: &Window, rng: &mut ChaCha8Rng) -> Result<SequenceOutput, ModelError> {
        self.encode_with(window, Some(rng))
    }

    fn encode_with(&self, window: &Window, rng: Option<&mut ChaCha8Rng>) -> Result<SequenceOutput, ModelError> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let enc = self.forward(&mut g, &p, window, rng)?;
        Ok(SequenceOutput {
            embeddings: g.value(enc.embeddings).clone(),
            rewards: g.value(enc.rewards).data().to_vec(),
            queries: g.value(enc.queries).clone(),
            keys: g.value(enc.keys).clone(),
        })
    }

    /// In-sequence attention over `start..end` of an encoded window.
    pub fn composite_predict(
        &self,
        output: &SequenceOutput,
        start: usize,
        end: usize,
    ) -> Result<CompositePrediction, ModelError> {
        composite_predict(output, start, end)
    }

    /// Per-step rewards for a whole trajectory: step `t` is scored from the
    /// window of the last `min(t + 1, h)` pairs ending at `t`, with in-sequence
    /// attention taken over that window.
    pub fn relabel(&self, trajectory: &Window, h: usize, mode: RelabelOutput) -> Result<Vec<f64>, ModelError> {
        if h == 0 || h > self.config.max_window {
            return Err(ModelError::BadRelabelWindow {
                h,
                max: self.config.max_window,
            });
        }
        (0..trajectory.len())
            .map(|t| {
                let start = (t + 1).saturating_sub(h);
                self.relabel_last(&trajectory.slice(start, t + 1)?, mode)
            })
            .collect()
    }

    /// Relabeled reward of the final pair of `window`.
    pub fn relabel_last(&self, window: &Window, mode: RelabelOutput) -> Result<f64, ModelError> {
        let out = self.encode(window)?;
        let last = out.len() - 1;
        Ok(match mode {
            RelabelOutput::Instance => out.rewards[last],
            RelabelOutput::Weighted => {
                let pred = composite_predict(&out, 0, out.len())?;
                pred.weights[last] * out.rewards[last]
            }
        })
    }
}

/// Double-sum composite and column-sum weights for rows `start..end`.
pub fn composite_predict(
    output: &SequenceOutput,
    start: usize,
    end: usize,
) -> Result<CompositePrediction, ModelError> {
    let len = output.len();
    if start >= end || end > len {
        return Err(ModelError::BadRange { start, end, len });
    }
    let n = end - start;
    let d = output.queries.last_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = vec![0.0; n];
    let mut composite = 0.0;
    let mut row = vec![0.0; n];
    for i in start..end {
        let q = output.queries.row(i);
        for (j, t) in (start..end).enumerate() {
            let k = output.keys.row(t);
            row[j] = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for (j, v) in row.iter_mut().enumerate() {
            *v /= total;
            weights[j] += *v;
            composite += *v * output.rewards[start + j];
        }
    }
    Ok(CompositePrediction { composite, weights })
}
