//! Model configuration, parameter layout and the end-to-end forward pass.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::data::ClipRecord;
use crate::error::{Error, Result};
use crate::matching::{self, BatchLevels, WeightingMode};
use crate::tensor::{ParamStore, Precision, Tape, Tensor, Var};
use crate::text::{self, CaptionGraph, EmbeddingTable, Vocabulary, MIN_ROLES};
use crate::video::{self, AttentionConfig, AttentionDesign, ExpertFeatures};
use crate::{LevelEncodings, LevelVars};

/// Which raw feature streams feed the three video experts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum FeatureSetting {
    /// Every expert reads the 2-D feature.
    TwoDOnly,
    /// Appearance ← 2-D, action ← 3-D, object ← region features.
    #[default]
    Split,
    /// Every expert reads the concatenated 2-D and 3-D features.
    Concat,
}

impl FeatureSetting {
    pub const ALL: [FeatureSetting; 3] = [FeatureSetting::TwoDOnly, FeatureSetting::Split, FeatureSetting::Concat];
}

impl fmt::Display for FeatureSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSetting::TwoDOnly => "2d_only",
            FeatureSetting::Split => "split",
            FeatureSetting::Concat => "concat",
        })
    }
}

impl FromStr for FeatureSetting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "2d_only" => Ok(FeatureSetting::TwoDOnly),
            "split" => Ok(FeatureSetting::Split),
            "concat" => Ok(FeatureSetting::Concat),
            other => Err(format!("unknown feature setting `{other}` (valid: 2d_only, split, concat)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub word_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub gcn_layers: usize,
    pub role_count: usize,
    pub design: AttentionDesign,
    pub features: FeatureSetting,
    pub weighting: WeightingMode,
    pub dim_2d: usize,
    pub dim_3d: usize,
    pub dim_roi: usize,
    pub norm_eps: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_dim: 1024,
            word_dim: EmbeddingTable::DEFAULT_DIM,
            heads: 8,
            ff_dim: 2048,
            gcn_layers: 2,
            role_count: MIN_ROLES,
            design: AttentionDesign::Mixed,
            features: FeatureSetting::Split,
            weighting: WeightingMode::VideoOnly,
            dim_2d: 2048,
            dim_3d: 2048,
            dim_roi: 2048,
            norm_eps: 1e-5,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim < 2 || self.model_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "model_dim must be even (two LSTM directions), got {}",
                self.model_dim
            )));
        }
        AttentionConfig::new(self.heads, self.model_dim, self.design)?;
        for (name, v) in [
            ("word_dim", self.word_dim),
            ("ff_dim", self.ff_dim),
            ("dim_2d", self.dim_2d),
            ("dim_3d", self.dim_3d),
            ("dim_roi", self.dim_roi),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.role_count < MIN_ROLES {
            return Err(Error::Config(format!(
                "role_count must be at least {MIN_ROLES}, got {}",
                self.role_count
            )));
        }
        if !(self.norm_eps >= 0.0) {
            return Err(Error::Config("norm_eps must be non-negative".into()));
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            model_dim: self.model_dim,
            design: self.design,
        }
    }

    /// Raw input width of the appearance, action and object experts.
    pub fn expert_input_dims(&self) -> [usize; 3] {
        match self.features {
            FeatureSetting::TwoDOnly => [self.dim_2d; 3],
            FeatureSetting::Split => [self.dim_2d, self.dim_3d, self.dim_roi],
            FeatureSetting::Concat => [self.dim_2d + self.dim_3d; 3],
        }
    }

    /// Every parameter tensor with its shape and initializer, in name order.
    pub fn param_specs(&self, vocab_rows: usize) -> Vec<ParamSpec> {
        let d = self.model_dim;
        let hidden = d / 2;
        let mut specs = vec![
            ParamSpec::new(text::EMBED, [vocab_rows, self.word_dim], Init::Table),
            ParamSpec::new(text::ATTN_QUERY, [d, 1], Init::Uniform(d)),
            ParamSpec::new(text::ROLE_GATE, [d, self.role_count], Init::Uniform(self.role_count)),
            ParamSpec::new(matching::VIDEO_WEIGHTS, [3, d], Init::Uniform(d)),
            ParamSpec::new(matching::TEXT_WEIGHTS, [3, d], Init::Uniform(d)),
        ];
        for dir in ["fwd", "bwd"] {
            let [w_ih, w_hh, b] = text::lstm_names(dir);
            specs.push(ParamSpec::new(&w_ih, [self.word_dim, 4 * hidden], Init::Uniform(self.word_dim)));
            specs.push(ParamSpec::new(&w_hh, [hidden, 4 * hidden], Init::Uniform(hidden)));
            specs.push(ParamSpec::new(&b, [1, 4 * hidden], Init::Zeros));
        }
        for layer in 0..self.gcn_layers {
            specs.push(ParamSpec::new(&text::gcn_name(layer), [d, d], Init::Uniform(d)));
        }
        for (level, input) in video::LEVELS.iter().zip(self.expert_input_dims()) {
            let [w, b] = video::projection_names(level);
            specs.push(ParamSpec::new(&w, [input, d], Init::Uniform(input)));
            specs.push(ParamSpec::new(&b, [1, d], Init::Zeros));
        }
        let mut attention_blocks = vec!["video.appearance.self".to_string()];
        let mut ff_blocks = vec!["video.appearance.ff".to_string()];
        for level in ["action", "object"] {
            attention_blocks.push(format!("video.{level}.self"));
            ff_blocks.push(format!("video.{level}.ff"));
            if self.design == AttentionDesign::Mixed {
                attention_blocks.push(format!("video.{level}.context.self"));
                ff_blocks.push(format!("video.{level}.context.ff"));
                attention_blocks.push(format!("video.{level}.cross"));
            }
        }
        for prefix in &attention_blocks {
            for name in video::attention_names(prefix) {
                specs.push(ParamSpec::new(&name, [d, d], Init::Uniform(d)));
            }
        }
        for prefix in &ff_blocks {
            let [w1, b1, w2, b2] = video::ff_names(prefix);
            specs.push(ParamSpec::new(&w1, [d, self.ff_dim], Init::Uniform(d)));
            specs.push(ParamSpec::new(&b1, [1, self.ff_dim], Init::Zeros));
            specs.push(ParamSpec::new(&w2, [self.ff_dim, d], Init::Uniform(self.ff_dim)));
            specs.push(ParamSpec::new(&b2, [1, d], Init::Zeros));
        }
        for prefix in attention_blocks.iter().chain(&ff_blocks) {
            let [gain, bias] = video::norm_names(prefix);
            specs.push(ParamSpec::new(&gain, [1, d], Init::Ones));
            specs.push(ParamSpec::new(&bias, [1, d], Init::Zeros));
        }
        specs.sort_by(|a, b| a.name.cmp(&b.name));
        specs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform(−1/√fan_in, 1/√fan_in).
    Uniform(usize),
    Zeros,
    Ones,
    /// Copied from the word-embedding table.
    Table,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 2],
    pub init: Init,
}

impl ParamSpec {
    fn new(name: &str, shape: [usize; 2], init: Init) -> Self {
        Self {
            name: name.to_string(),
            shape,
            init,
        }
    }
}

/// Parameters plus everything needed to run them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

impl Model {
    /// Draws every weight matrix from `rng` in parameter-name order.
    pub fn init(config: ModelConfig, table: EmbeddingTable, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if table.dim() != config.word_dim {
            return Err(Error::Config(format!(
                "embedding table has dimension {}, config expects word_dim {}",
                table.dim(),
                config.word_dim
            )));
        }
        let mut params = ParamStore::new();
        for spec in config.param_specs(table.vocab.rows()) {
            let [rows, cols] = spec.shape;
            let tensor = match spec.init {
                Init::Table => table.vectors.detached(),
                Init::Zeros => Tensor::zeros(&[rows, cols]),
                Init::Ones => Tensor::ones(&[rows, cols]),
                Init::Uniform(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::new(vec![rows, cols], data)?
                }
            };
            params.insert(spec.name, tensor);
        }
        let mut model = Self {
            config,
            vocab: table.vocab,
            params,
        };
        model.round_params();
        Ok(model)
    }

    /// Rounds stored parameters to the configured scalar width.
    pub fn round_params(&mut self) {
        let p = self.config.precision;
        for (_, t) in self.params.iter_mut() {
            for v in t.data_mut() {
                *v = p.round(*v);
            }
        }
    }

    pub fn tape(&self) -> Tape {
        Tape::new(self.config.precision)
    }

    /// Maps one clip's raw features onto the three experts.
    pub fn expert_features(&self, clip: &ClipRecord) -> Result<ExpertFeatures> {
        let row = |v: &[f64]| Tensor::row(v.to_vec());
        let (s, a, o) = match self.config.features {
            FeatureSetting::TwoDOnly => (row(&clip.f2d)?, row(&clip.f2d)?, row(&clip.f2d)?),
            FeatureSetting::Split => {
                let roi = clip.froi.as_deref().ok_or_else(|| {
                    Error::Invalid(format!(
                        "clip `{}` has no region features, required by the `split` feature setting",
                        clip.clip_id
                    ))
                })?;
                (row(&clip.f2d)?, row(&clip.f3d)?, row(roi)?)
            }
            FeatureSetting::Concat => {
                let joined: Vec<f64> = clip.f2d.iter().chain(&clip.f3d).copied().collect();
                (row(&joined)?, row(&joined)?, row(&joined)?)
            }
        };
        let expected = self.config.expert_input_dims();
        for (t, want) in [&s, &a, &o].iter().zip(expected) {
            if t.shape()[1] != want {
                return Err(Error::Invalid(format!(
                    "clip `{}`: expert input has {} features, model expects {want}",
                    clip.clip_id,
                    t.shape()[1]
                )));
            }
        }
        Ok(ExpertFeatures {
            clip_id: clip.clip_id.clone(),
            appearance: s,
            action: a,
            object: o,
        })
    }

    pub fn encode_text(&self, tape: &mut Tape, graph: &CaptionGraph) -> Result<LevelVars> {
        self.encode_text_with(&self.params, tape, graph)
    }

    pub fn encode_video(&self, tape: &mut Tape, feats: &ExpertFeatures) -> Result<LevelVars> {
        self.encode_video_with(&self.params, tape, feats)
    }

    /// Like [`Model::encode_text`] with the weights taken from `store`.
    pub fn encode_text_with(&self, store: &ParamStore, tape: &mut Tape, graph: &CaptionGraph) -> Result<LevelVars> {
        text::encode_text(
            tape,
            store,
            &self.vocab,
            graph,
            self.config.role_count,
            self.config.gcn_layers,
        )
    }

    pub fn encode_video_with(&self, store: &ParamStore, tape: &mut Tape, feats: &ExpertFeatures) -> Result<LevelVars> {
        Ok(video::encode_video(tape, store, feats, &self.config.attention(), self.config.norm_eps)?.levels)
    }

    pub fn text_encodings(&self, graph: &CaptionGraph) -> Result<LevelEncodings> {
        let mut tape = self.tape();
        let levels = self.encode_text(&mut tape, graph)?;
        Ok(levels.values(&tape))
    }

    pub fn video_encodings(&self, feats: &ExpertFeatures) -> Result<LevelEncodings> {
        let mut tape = self.tape();
        let levels = self.encode_video(&mut tape, feats)?;
        Ok(levels.values(&tape))
    }

    /// `B × B` scores for aligned clips and captions (`S[i][j]` = clip i vs caption j).
    pub fn batch_scores(&self, tape: &mut Tape, clips: &[&ExpertFeatures], captions: &[&CaptionGraph]) -> Result<Var> {
        self.batch_scores_with(&self.params, tape, clips, captions)
    }

    pub fn batch_scores_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        clips: &[&ExpertFeatures],
        captions: &[&CaptionGraph],
    ) -> Result<Var> {
        let videos: Vec<LevelVars> = clips
            .iter()
            .map(|f| self.encode_video_with(store, tape, f))
            .collect::<Result<_>>()?;
        let texts: Vec<LevelVars> = captions
            .iter()
            .map(|g| self.encode_text_with(store, tape, g))
            .collect::<Result<_>>()?;
        let v = BatchLevels::stack(tape, &videos)?;
        let t = BatchLevels::stack(tape, &texts)?;
        matching::score_matrix(tape, store, &v, &t, self.config.weighting)
    }

    /// Contrastive loss on one aligned batch.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        clips: &[&ExpertFeatures],
        captions: &[&CaptionGraph],
        margin: f64,
    ) -> Result<Var> {
        self.batch_loss_with(&self.params, tape, clips, captions, margin)
    }

    pub fn batch_loss_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        clips: &[&ExpertFeatures],
        captions: &[&CaptionGraph],
        margin: f64,
    ) -> Result<Var> {
        if clips.len() != captions.len() {
            return Err(Error::Invalid(format!(
                "batch has {} clips but {} captions",
                clips.len(),
                captions.len()
            )));
        }
        let scores = self.batch_scores_with(store, tape, clips, captions)?;
        matching::contrastive_loss(tape, scores, margin)
    }
}
