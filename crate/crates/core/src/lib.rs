//! Role-aware hierarchical text-to-video retrieval.
//!
//! Captions are parsed into role graphs (event, actions, objects) and encoded
//! at three levels; clips are encoded at matching appearance, action and
//! object levels from pre-extracted expert features. A weighted sum of the
//! per-level cosine similarities scores each clip/caption pair, and the whole
//! model trains with a bidirectional hinge ranking loss.
//!
//! All math runs on the small reverse-mode [`tensor`] library in this crate.

pub mod check;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod matching;
pub mod model;
pub mod tensor;
pub mod text;
pub mod train;
pub mod video;

pub use error::{Error, Result};
pub use model::{FeatureSetting, Model, ModelConfig};

use tensor::{Tape, Tensor, Var};

/// Tape handles for one side's three level embeddings (each `1 × d`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelVars {
    pub global: Var,
    pub action: Var,
    pub object: Var,
}

impl LevelVars {
    pub fn level(&self, i: usize) -> Var {
        match i {
            0 => self.global,
            1 => self.action,
            2 => self.object,
            _ => panic!("level index {i} out of range"),
        }
    }

    pub fn values(&self, tape: &Tape) -> LevelEncodings {
        LevelEncodings {
            global: tape.value(self.global).detached(),
            action: tape.value(self.action).detached(),
            object: tape.value(self.object).detached(),
        }
    }
}

/// Three level embeddings for one clip or caption: global (appearance for
/// video, event for text), action and object.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelEncodings {
    pub global: Tensor,
    pub action: Tensor,
    pub object: Tensor,
}

pub type TextLevelEncodings = LevelEncodings;
pub type VideoLevelEncodings = LevelEncodings;

impl LevelEncodings {
    pub fn levels(&self) -> [&Tensor; 3] {
        [&self.global, &self.action, &self.object]
    }

    pub fn is_finite(&self) -> bool {
        self.levels().iter().all(|t| t.is_finite())
    }
}
