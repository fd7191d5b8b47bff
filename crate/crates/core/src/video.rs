//! Video encoder: self-attention only at the appearance level; self plus
//! cross-modal attention at the action and object levels.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::LevelVars;

/// Per-clip expert feature sequences (before projection), one row per step.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertFeatures {
    pub clip_id: String,
    pub appearance: Tensor,
    pub action: Tensor,
    pub object: Tensor,
}

impl ExpertFeatures {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("appearance", &self.appearance), ("action", &self.action), ("object", &self.object)] {
            if t.shape().len() != 2 {
                return Err(Error::Invalid(format!(
                    "clip `{}`: {name} features must be a T×D matrix, got {:?}",
                    self.clip_id,
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Invalid(format!("clip `{}`: non-finite {name} features", self.clip_id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AttentionDesign {
    /// Self-attention at the appearance level, self + cross-modal at the local levels.
    #[default]
    Mixed,
    /// Self-attention blocks at every level.
    SelfAll,
}

impl AttentionDesign {
    pub const ALL: [AttentionDesign; 2] = [AttentionDesign::Mixed, AttentionDesign::SelfAll];
}

impl fmt::Display for AttentionDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionDesign::Mixed => "mixed",
            AttentionDesign::SelfAll => "self_all",
        })
    }
}

impl FromStr for AttentionDesign {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mixed" => Ok(AttentionDesign::Mixed),
            "self_all" => Ok(AttentionDesign::SelfAll),
            other => Err(format!("unknown attention design `{other}` (valid: mixed, self_all)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub model_dim: usize,
    pub design: AttentionDesign,
}

impl AttentionConfig {
    pub fn new(heads: usize, model_dim: usize, design: AttentionDesign) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {model_dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            model_dim,
            design,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Multi-head attention output with each head's weight matrix (`T_q × T_k`).
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Parameter names of one multi-head attention block.
pub fn attention_names(prefix: &str) -> [String; 4] {
    ["wq", "wk", "wv", "wo"].map(|w| format!("{prefix}.{w}"))
}

pub fn norm_names(prefix: &str) -> [String; 2] {
    [format!("{prefix}.norm.gain"), format!("{prefix}.norm.bias")]
}

pub fn ff_names(prefix: &str) -> [String; 4] {
    ["w1", "b1", "w2", "b2"].map(|w| format!("{prefix}.{w}"))
}

pub fn projection_names(level: &str) -> [String; 2] {
    [format!("video.proj.{level}.w"), format!("video.proj.{level}.b")]
}

pub const LEVELS: [&str; 3] = ["appearance", "action", "object"];

/// `Concat(head_1..head_h) W^O`, `head_i = softmax((QW_i^Q)(KW_i^K)ᵀ/√d_h)(VW_i^V)`.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Attended> {
    let [wq, wk, wv, wo] = attention_names(prefix);
    let wq = tape.param(store, &wq)?;
    let wk = tape.param(store, &wk)?;
    let wv = tape.param(store, &wv)?;
    let wo = tape.param(store, &wo)?;
    let qp = tape.matmul(q, wq)?;
    let kp = tape.matmul(k, wk)?;
    let vp = tape.matmul(v, wv)?;
    let dim = tape.shape(qp)[1];
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("model_dim {dim} is not divisible by {heads} heads")));
    }
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice(qp, 1, lo, hi)?;
        let kh = tape.slice(kp, 1, lo, hi)?;
        let vh = tape.slice(vp, 1, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let raw = tape.matmul(qh, kt)?;
        let scores = tape.scale(raw, scale);
        let w = tape.softmax(scores, 1)?;
        outputs.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let joined = if heads == 1 { outputs[0] } else { tape.concat(&outputs, 1)? };
    let output = tape.matmul(joined, wo)?;
    Ok(Attended { output, weights })
}

/// `Norm(x + residual)` with the gain/bias stored under `prefix`.
fn add_norm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, residual: Var, eps: f64) -> Result<Var> {
    let [gain, bias] = norm_names(prefix);
    let gain = tape.param(store, &gain)?;
    let bias = tape.param(store, &bias)?;
    let sum = tape.add(x, residual)?;
    Ok(tape.layer_norm(sum, gain, bias, eps)?)
}

/// Position-wise `relu(x W1 + b1) W2 + b2`.
pub fn feed_forward(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let [w1, b1, w2, b2] = ff_names(prefix);
    let w1 = tape.param(store, &w1)?;
    let b1 = tape.param(store, &b1)?;
    let w2 = tape.param(store, &w2)?;
    let b2 = tape.param(store, &b2)?;
    let h = tape.matmul(x, w1)?;
    let h = tape.broadcast_add(h, b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, w2)?;
    Ok(tape.broadcast_add(o, b2)?)
}

/// `Norm(MultiHead(x, x, x) + x)`.
pub fn self_attention_block(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    x: Var,
    eps: f64,
) -> Result<(Var, Attended)> {
    let att = multi_head_attention(tape, store, prefix, heads, x, x, x)?;
    let out = add_norm(tape, store, prefix, att.output, x, eps)?;
    Ok((out, att))
}

/// `Norm(FF(x) + x)`.
pub fn ff_block(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let f = feed_forward(tape, store, prefix, x)?;
    add_norm(tape, store, prefix, f, x, eps)
}

/// Intermediate values of a level encoder, exposed for inspection.
pub struct LevelTrace {
    pub output: Var,
    pub attention: Vec<Attended>,
}

/// Self-attention then feed-forward on one stream (the appearance encoder).
pub fn encode_appearance(tape: &mut Tape, store: &ParamStore, prefix: &str, heads: usize, x: Var, eps: f64) -> Result<LevelTrace> {
    let (z, att) = self_attention_block(tape, store, &format!("{prefix}.self"), heads, x, eps)?;
    let out = ff_block(tape, store, &format!("{prefix}.ff"), z, eps)?;
    Ok(LevelTrace {
        output: out,
        attention: vec![att],
    })
}

/// Concatenates two context streams along the sequence axis, then runs a
/// self-attention block and a feed-forward block over the result.
pub fn fuse_context(tape: &mut Tape, store: &ParamStore, prefix: &str, heads: usize, x: Var, y: Var, eps: f64) -> Result<LevelTrace> {
    let fused = tape.concat(&[x, y], 0)?;
    let (z, att) = self_attention_block(tape, store, &format!("{prefix}.self"), heads, fused, eps)?;
    let out = ff_block(tape, store, &format!("{prefix}.ff"), z, eps)?;
    Ok(LevelTrace {
        output: out,
        attention: vec![att],
    })
}

/// Local level: `z = Norm(MHA(F,F,F)+F)`, `s = fuse(ctx1, ctx2)`,
/// `c = Norm(MHA(z, s, s) + z)`, `E = Norm(FF(c) + c)`.
///
/// The target stream queries the fused context, so the output keeps the
/// target's length and the residual lines up with it.
pub fn encode_local_level(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    target: Var,
    ctx1: Var,
    ctx2: Var,
    eps: f64,
) -> Result<LevelTrace> {
    let (z, self_att) = self_attention_block(tape, store, &format!("{prefix}.self"), heads, target, eps)?;
    let context = fuse_context(tape, store, &format!("{prefix}.context"), heads, ctx1, ctx2, eps)?;
    let cross_prefix = format!("{prefix}.cross");
    let cross = multi_head_attention(tape, store, &cross_prefix, heads, z, context.output, context.output)?;
    let c = add_norm(tape, store, &cross_prefix, cross.output, z, eps)?;
    let out = ff_block(tape, store, &format!("{prefix}.ff"), c, eps)?;
    let mut attention = vec![self_att];
    attention.extend(context.attention);
    attention.push(cross);
    Ok(LevelTrace { output: out, attention })
}

/// Linear projection of one expert's raw features into the model dimension.
pub fn project_expert(tape: &mut Tape, store: &ParamStore, level: &str, raw: &Tensor) -> Result<Var> {
    let [w, b] = projection_names(level);
    let w = tape.param(store, &w)?;
    let b = tape.param(store, &b)?;
    let x = tape.constant(raw.clone());
    let p = tape.matmul(x, w)?;
    Ok(tape.broadcast_add(p, b)?)
}

fn mean_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let rows = tape.shape(x)[0];
    if rows == 1 {
        return Ok(x);
    }
    let s = tape.sum_axis(x, 0)?;
    Ok(tape.scale(s, 1.0 / rows as f64))
}

/// Full video encoding plus every attention weight matrix computed on the way.
pub struct VideoTrace {
    pub levels: LevelVars,
    pub attention: Vec<Attended>,
}

pub fn encode_video(
    tape: &mut Tape,
    store: &ParamStore,
    feats: &ExpertFeatures,
    cfg: &AttentionConfig,
    eps: f64,
) -> Result<VideoTrace> {
    feats.validate()?;
    let heads = cfg.heads;
    let f_s = project_expert(tape, store, "appearance", &feats.appearance)?;
    let f_a = project_expert(tape, store, "action", &feats.action)?;
    let f_o = project_expert(tape, store, "object", &feats.object)?;

    let appearance = encode_appearance(tape, store, "video.appearance", heads, f_s, eps)?;
    let (action, object) = match cfg.design {
        AttentionDesign::Mixed => (
            encode_local_level(tape, store, "video.action", heads, f_a, f_s, f_o, eps)?,
            encode_local_level(tape, store, "video.object", heads, f_o, f_s, f_a, eps)?,
        ),
        AttentionDesign::SelfAll => (
            encode_appearance(tape, store, "video.action", heads, f_a, eps)?,
            encode_appearance(tape, store, "video.object", heads, f_o, eps)?,
        ),
    };
    let levels = LevelVars {
        global: mean_rows(tape, appearance.output)?,
        action: mean_rows(tape, action.output)?,
        object: mean_rows(tape, object.output)?,
    };
    let mut attention = appearance.attention;
    attention.extend(action.attention);
    attention.extend(object.attention);
    Ok(VideoTrace { levels, attention })
}
