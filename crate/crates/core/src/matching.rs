//! Weighted three-space similarity and the contrastive ranking loss.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::{LevelEncodings, LevelVars};

pub const VIDEO_WEIGHTS: &str = "match.video.a";
pub const TEXT_WEIGHTS: &str = "match.text.a";
pub const DEFAULT_MARGIN: f64 = 0.2;

/// How the three level similarities are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum WeightingMode {
    /// Plain mean of the three cosines.
    Average,
    /// Weights predicted from the caption encodings.
    TextOnly,
    /// Weights predicted from the video encodings.
    #[default]
    VideoOnly,
    /// Mean of the video and text weight vectors.
    Both,
}

impl WeightingMode {
    pub const ALL: [WeightingMode; 4] = [
        WeightingMode::Average,
        WeightingMode::TextOnly,
        WeightingMode::VideoOnly,
        WeightingMode::Both,
    ];

    pub fn uses_video_weights(self) -> bool {
        matches!(self, WeightingMode::VideoOnly | WeightingMode::Both)
    }

    pub fn uses_text_weights(self) -> bool {
        matches!(self, WeightingMode::TextOnly | WeightingMode::Both)
    }
}

impl fmt::Display for WeightingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightingMode::Average => "average",
            WeightingMode::TextOnly => "text",
            WeightingMode::VideoOnly => "video",
            WeightingMode::Both => "both",
        })
    }
}

impl FromStr for WeightingMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "average" => Ok(WeightingMode::Average),
            "text" | "text_only" => Ok(WeightingMode::TextOnly),
            "video" | "video_only" => Ok(WeightingMode::VideoOnly),
            "both" => Ok(WeightingMode::Both),
            other => Err(format!(
                "unknown weighting mode `{other}` (valid: average, text, video, both)"
            )),
        }
    }
}

const LEVEL_NAMES: [&str; 3] = ["global", "action", "object"];

/// Cosine similarity of two vectors.
pub fn level_cosine(v: &Tensor, c: &Tensor) -> Result<f64> {
    if v.len() != c.len() {
        return Err(Error::Invalid(format!(
            "cosine of vectors with {} and {} entries",
            v.len(),
            c.len()
        )));
    }
    let norm = |t: &Tensor| t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let (nv, nc) = (norm(v), norm(c));
    if nv == 0.0 {
        return Err(Error::ZeroNorm { side: "video", level: "given" });
    }
    if nc == 0.0 {
        return Err(Error::ZeroNorm { side: "text", level: "given" });
    }
    let dot: f64 = v.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
    Ok((dot / (nv * nc)).clamp(-1.0, 1.0))
}

/// `softmax_i(level_i · a_i)` for one side's encodings.
pub fn expert_weights(encodings: &LevelEncodings, a: &Tensor) -> Result<[f64; 3]> {
    let dim = encodings.global.len();
    if a.shape() != [3, dim] {
        return Err(Error::Invalid(format!(
            "expert weight vectors must be 3×{dim}, got {:?}",
            a.shape()
        )));
    }
    let logits: Vec<f64> = encodings
        .levels()
        .iter()
        .enumerate()
        .map(|(i, t)| t.data().iter().zip(a.row_slice(i)).map(|(x, y)| x * y).sum())
        .collect();
    let w = Tensor::vector(logits)?.softmax(0)?;
    Ok([w.data()[0], w.data()[1], w.data()[2]])
}

/// Similarity of one video to one caption under `mode`.
pub fn match_score(
    video: &LevelEncodings,
    caption: &LevelEncodings,
    mode: WeightingMode,
    params: &ParamStore,
) -> Result<f64> {
    let mut cos = [0.0; 3];
    for (i, (v, c)) in video.levels().iter().zip(caption.levels()).enumerate() {
        cos[i] = level_cosine(v, c).map_err(|e| match e {
            Error::ZeroNorm { side, .. } => Error::ZeroNorm {
                side,
                level: LEVEL_NAMES[i],
            },
            other => other,
        })?;
    }
    let w = match mode {
        WeightingMode::Average => return Ok((cos[0] + cos[1] + cos[2]) / 3.0),
        WeightingMode::VideoOnly => expert_weights(video, params.get(VIDEO_WEIGHTS)?)?,
        WeightingMode::TextOnly => expert_weights(caption, params.get(TEXT_WEIGHTS)?)?,
        WeightingMode::Both => {
            let wv = expert_weights(video, params.get(VIDEO_WEIGHTS)?)?;
            let wt = expert_weights(caption, params.get(TEXT_WEIGHTS)?)?;
            [0, 1, 2].map(|i| 0.5 * (wv[i] + wt[i]))
        }
    };
    Ok(w.iter().zip(cos).map(|(w, c)| w * c).sum())
}

/// Stacked encodings for a batch: one `B × d` matrix per level.
pub struct BatchLevels {
    pub levels: [Var; 3],
}

impl BatchLevels {
    pub fn stack(tape: &mut Tape, items: &[LevelVars]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut levels = [items[0].global; 3];
        for (l, slot) in levels.iter_mut().enumerate() {
            let rows: Vec<Var> = items.iter().map(|it| it.level(l)).collect();
            *slot = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
        }
        Ok(Self { levels })
    }
}

/// `B × 3` expert weights, one softmax row per item.
fn batch_expert_weights(tape: &mut Tape, store: &ParamStore, name: &str, side: &BatchLevels) -> Result<Var> {
    let a = tape.param(store, name)?;
    let mut logits = Vec::with_capacity(3);
    for (l, &level) in side.levels.iter().enumerate() {
        let a_row = tape.slice(a, 0, l, l + 1)?;
        let a_col = tape.transpose(a_row)?;
        logits.push(tape.matmul(level, a_col)?);
    }
    let joined = tape.concat(&logits, 1)?;
    Ok(tape.softmax(joined, 1)?)
}

fn normalized(tape: &mut Tape, x: Var, side: &'static str, level: usize) -> Result<Var> {
    tape.normalize_rows(x).map_err(|_| Error::ZeroNorm {
        side,
        level: LEVEL_NAMES[level],
    })
}

/// `S[i][j] = s(video_i, caption_j)` on the tape.
pub fn score_matrix(
    tape: &mut Tape,
    store: &ParamStore,
    videos: &BatchLevels,
    captions: &BatchLevels,
    mode: WeightingMode,
) -> Result<Var> {
    let mut cos = Vec::with_capacity(3);
    for l in 0..3 {
        let v = normalized(tape, videos.levels[l], "video", l)?;
        let c = normalized(tape, captions.levels[l], "text", l)?;
        let ct = tape.transpose(c)?;
        cos.push(tape.matmul(v, ct)?);
    }
    let video_w = if mode.uses_video_weights() {
        Some(batch_expert_weights(tape, store, VIDEO_WEIGHTS, videos)?)
    } else {
        None
    };
    let text_w = if mode.uses_text_weights() {
        let w = batch_expert_weights(tape, store, TEXT_WEIGHTS, captions)?;
        Some(tape.transpose(w)?)
    } else {
        None
    };
    let mut terms = Vec::with_capacity(3);
    for (l, &c) in cos.iter().enumerate() {
        let term = match mode {
            WeightingMode::Average => c,
            WeightingMode::VideoOnly => {
                let col = tape.slice(video_w.unwrap(), 1, l, l + 1)?;
                tape.broadcast_mul(c, col)?
            }
            WeightingMode::TextOnly => {
                let row = tape.slice(text_w.unwrap(), 0, l, l + 1)?;
                tape.broadcast_mul(c, row)?
            }
            WeightingMode::Both => {
                let col = tape.slice(video_w.unwrap(), 1, l, l + 1)?;
                let row = tape.slice(text_w.unwrap(), 0, l, l + 1)?;
                let by_video = tape.broadcast_mul(c, col)?;
                let by_text = tape.broadcast_mul(c, row)?;
                let sum = tape.add(by_video, by_text)?;
                tape.scale(sum, 0.5)
            }
        };
        terms.push(term);
    }
    let first = tape.add(terms[0], terms[1])?;
    let total = tape.add(first, terms[2])?;
    Ok(match mode {
        WeightingMode::Average => tape.scale(total, 1.0 / 3.0),
        _ => total,
    })
}

/// Bidirectional hinge loss over in-batch negatives, averaged over all
/// `2·B·(B−1)` terms. Diagonal entries are the positive pairs.
pub fn contrastive_loss(tape: &mut Tape, scores: Var, margin: f64) -> Result<Var> {
    let shape = tape.shape(scores).to_vec();
    let b = match shape.as_slice() {
        [m, n] if m == n => *m,
        other => return Err(Error::Invalid(format!("score matrix must be square, got {other:?}"))),
    };
    if b < 2 {
        return Err(Error::Invalid("contrastive loss needs a batch of at least 2 (no negatives)".into()));
    }
    if margin <= 0.0 {
        return Err(Error::Config(format!("margin must be positive, got {margin}")));
    }
    let eye = tape.constant(Tensor::eye(b));
    let mut off = Tensor::ones(&[b, b]);
    for i in 0..b {
        off.data_mut()[i * b + i] = 0.0;
    }
    let off = tape.constant(off);
    let diag_only = tape.mul(scores, eye)?;
    let positives = tape.sum_axis(diag_only, 1)?;
    let neg_pos = tape.scale(positives, -1.0);
    let neg_pos_row = tape.transpose(neg_pos)?;

    // Row i: caption negatives for video i. Column i: video negatives for caption i.
    let by_row = tape.broadcast_add(scores, neg_pos)?;
    let by_col = tape.broadcast_add(scores, neg_pos_row)?;
    let mut total = None;
    for part in [by_row, by_col] {
        let shifted = tape.add_scalar(part, margin);
        let hinge = tape.relu(shifted);
        let masked = tape.mul(hinge, off)?;
        let s = tape.sum(masked);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let terms = 2 * b * (b - 1);
    Ok(tape.scale(total.unwrap(), 1.0 / terms as f64))
}

/// Plain-value version of [`contrastive_loss`] for an explicit score matrix.
pub fn contrastive_loss_value(scores: &Tensor, margin: f64) -> Result<f64> {
    let mut tape = Tape::new(crate::tensor::Precision::F64);
    let s = tape.constant(scores.clone());
    let l = contrastive_loss(&mut tape, s, margin)?;
    Ok(tape.scalar(l))
}
