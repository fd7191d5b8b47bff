//! Flat `key = value` run configuration.
//!
//! Precedence is flags > file > defaults: start from a default [`RunConfig`],
//! apply the file with [`RunConfig::apply_text`], then each flag with
//! [`RunConfig::set`]. [`RunConfig::to_text`] writes every resolved key.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::matching::WeightingMode;
use crate::model::ModelConfig;
use crate::tensor::Precision;
use crate::train::TrainConfig;
use crate::video::AttentionDesign;

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// values keep their line numbers for error reporting.
pub fn parse_key_values(text: &str, path: &Path) -> Result<BTreeMap<String, (usize, String)>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(err("empty key".into()));
        }
        if map.insert(key.to_string(), (i + 1, value.trim().to_string())).is_some() {
            return Err(err(format!("duplicate key `{key}`")));
        }
    }
    Ok(map)
}

pub fn render_key_values(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Settings for the finite-difference check of the whole model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub h: f64,
    pub tolerance: f64,
    pub batch: usize,
    /// Vocabulary size; padded with unused tokens beyond the batch's own words.
    pub vocab: usize,
    /// Width of every raw feature stream.
    pub feature_dim: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            batch: 3,
            vocab: 20,
            feature_dim: 10,
        }
    }
}

/// Everything a subcommand needs, as one flat key space.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub gradcheck: GradcheckConfig,
    /// GloVe-style vectors; seeded random vectors when absent.
    pub embeddings: Option<PathBuf>,
    /// Epochs to train each ablation row before scoring (0 scores fresh models).
    pub ablate_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let synth = SynthConfig {
            dim_2d: model.dim_2d,
            dim_3d: model.dim_3d,
            dim_roi: model.dim_roi,
            ..SynthConfig::default()
        };
        let train = TrainConfig {
            seed: synth.seed,
            ..TrainConfig::default()
        };
        Self {
            model,
            train,
            synth,
            gradcheck: GradcheckConfig::default(),
            embeddings: None,
            ablate_epochs: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

pub const KEYS: [&str; 33] = [
    "model_dim",
    "word_dim",
    "heads",
    "ff_dim",
    "gcn_layers",
    "role_count",
    "design",
    "features",
    "weighting",
    "norm_eps",
    "precision",
    "dim_2d",
    "dim_3d",
    "dim_roi",
    "batch_size",
    "epochs",
    "margin",
    "lr",
    "seed",
    "eval_every",
    "clips",
    "classes",
    "captions_per_clip",
    "noise",
    "attribute_scale",
    "vocab_size",
    "embeddings",
    "ablate_epochs",
    "gradcheck_h",
    "gradcheck_tolerance",
    "gradcheck_batch",
    "gradcheck_vocab",
    "gradcheck_feature_dim",
];

impl RunConfig {
    /// Defaults for `gradcheck`: a tiny 64-bit model under `both` weighting so
    /// every parameter receives gradient.
    pub fn gradcheck_defaults() -> Self {
        let mut cfg = Self::default();
        cfg.model.model_dim = 8;
        cfg.model.heads = 2;
        cfg.model.word_dim = 6;
        cfg.model.ff_dim = 12;
        cfg.model.weighting = WeightingMode::Both;
        cfg.model.precision = Precision::F64;
        cfg
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "model_dim" => m.model_dim = parse(key, value)?,
            "word_dim" => m.word_dim = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "ff_dim" => m.ff_dim = parse(key, value)?,
            "gcn_layers" => m.gcn_layers = parse(key, value)?,
            "role_count" => m.role_count = parse(key, value)?,
            "design" => m.design = parse::<AttentionDesign>(key, value)?,
            "features" => m.features = parse(key, value)?,
            "weighting" => m.weighting = parse(key, value)?,
            "norm_eps" => m.norm_eps = parse(key, value)?,
            "precision" => m.precision = parse(key, value)?,
            "dim_2d" => {
                m.dim_2d = parse(key, value)?;
                self.synth.dim_2d = m.dim_2d;
            }
            "dim_3d" => {
                m.dim_3d = parse(key, value)?;
                self.synth.dim_3d = m.dim_3d;
            }
            "dim_roi" => {
                m.dim_roi = parse(key, value)?;
                self.synth.dim_roi = m.dim_roi;
            }
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "margin" => self.train.margin = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "seed" => {
                self.train.seed = parse(key, value)?;
                self.synth.seed = self.train.seed;
            }
            "eval_every" => self.train.eval_every = parse(key, value)?,
            "clips" => self.synth.clips = parse(key, value)?,
            "classes" => self.synth.classes = parse(key, value)?,
            "captions_per_clip" => self.synth.captions_per_clip = parse(key, value)?,
            "noise" => self.synth.noise = parse(key, value)?,
            "attribute_scale" => self.synth.attribute_scale = parse(key, value)?,
            "vocab_size" => self.synth.vocab_size = parse(key, value)?,
            "embeddings" => self.embeddings = (!value.is_empty()).then(|| PathBuf::from(value)),
            "ablate_epochs" => self.ablate_epochs = parse(key, value)?,
            "gradcheck_h" => self.gradcheck.h = parse(key, value)?,
            "gradcheck_tolerance" => self.gradcheck.tolerance = parse(key, value)?,
            "gradcheck_batch" => self.gradcheck.batch = parse(key, value)?,
            "gradcheck_vocab" => self.gradcheck.vocab = parse(key, value)?,
            "gradcheck_feature_dim" => self.gradcheck.feature_dim = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}` (valid keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (key, (line, value)) in parse_key_values(text, path)? {
            self.set(&key, &value).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, path)?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        Some(match key {
            "model_dim" => m.model_dim.to_string(),
            "word_dim" => m.word_dim.to_string(),
            "heads" => m.heads.to_string(),
            "ff_dim" => m.ff_dim.to_string(),
            "gcn_layers" => m.gcn_layers.to_string(),
            "role_count" => m.role_count.to_string(),
            "design" => m.design.to_string(),
            "features" => m.features.to_string(),
            "weighting" => m.weighting.to_string(),
            "norm_eps" => m.norm_eps.to_string(),
            "precision" => m.precision.to_string(),
            "dim_2d" => m.dim_2d.to_string(),
            "dim_3d" => m.dim_3d.to_string(),
            "dim_roi" => m.dim_roi.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "margin" => self.train.margin.to_string(),
            "lr" => self.train.lr.to_string(),
            "seed" => self.train.seed.to_string(),
            "eval_every" => self.train.eval_every.to_string(),
            "clips" => self.synth.clips.to_string(),
            "classes" => self.synth.classes.to_string(),
            "captions_per_clip" => self.synth.captions_per_clip.to_string(),
            "noise" => self.synth.noise.to_string(),
            "attribute_scale" => self.synth.attribute_scale.to_string(),
            "vocab_size" => self.synth.vocab_size.to_string(),
            "embeddings" => self
                .embeddings
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "ablate_epochs" => self.ablate_epochs.to_string(),
            "gradcheck_h" => self.gradcheck.h.to_string(),
            "gradcheck_tolerance" => self.gradcheck.tolerance.to_string(),
            "gradcheck_batch" => self.gradcheck.batch.to_string(),
            "gradcheck_vocab" => self.gradcheck.vocab.to_string(),
            "gradcheck_feature_dim" => self.gradcheck.feature_dim.to_string(),
            _ => return None,
        })
    }

    /// Every key with its resolved value; reading it back gives an equal config.
    pub fn to_text(&self) -> String {
        let pairs: Vec<(&str, String)> = KEYS.iter().map(|&k| (k, self.get(k).expect("listed key"))).collect();
        render_key_values(&pairs)
    }

    /// Adopts a corpus' feature widths and role count.
    pub fn adopt_corpus(&mut self, manifest: &crate::data::CorpusManifest) {
        self.model.dim_2d = manifest.dim_2d;
        self.model.dim_3d = manifest.dim_3d;
        self.model.dim_roi = manifest.dim_roi;
        self.model.role_count = manifest.roles.len();
        self.synth.dim_2d = manifest.dim_2d;
        self.synth.dim_3d = manifest.dim_3d;
        self.synth.dim_roi = manifest.dim_roi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("run.cfg")
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("model_dim", "64").unwrap();
        cfg.set("weighting", "both").unwrap();
        cfg.set("embeddings", "/tmp/glove.txt").unwrap();
        cfg.set("lr", "0.0003").unwrap();
        let back = RunConfig::from_text(&cfg.to_text(), p()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_key_is_settable_and_listed() {
        let cfg = RunConfig::default();
        for key in KEYS {
            let v = cfg.get(key).unwrap();
            let mut c = cfg.clone();
            c.set(key, &v).unwrap();
            assert_eq!(c, cfg, "{key}");
        }
    }

    #[test]
    fn unknown_key_rejected_with_list() {
        let err = RunConfig::from_text("modle_dim = 3\n", p()).unwrap_err().to_string();
        assert!(err.contains("modle_dim") && err.contains("model_dim"), "{err}");
        assert!(err.contains(":1:"), "{err}");
    }

    #[test]
    fn bad_weighting_lists_modes() {
        let err = RunConfig::default().set("weighting", "max").unwrap_err().to_string();
        for mode in ["average", "text", "video", "both"] {
            assert!(err.contains(mode), "{err}");
        }
    }

    #[test]
    fn later_sources_override() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("epochs = 5\nseed = 3\n", p()).unwrap();
        cfg.set("epochs", "9").unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.synth.seed, 3);
    }

    #[test]
    fn malformed_lines() {
        assert!(parse_key_values("novalue\n", p()).is_err());
        assert!(parse_key_values("a = 1\na = 2\n", p()).is_err());
        let m = parse_key_values("# note\n\n a = b = c \n", p()).unwrap();
        assert_eq!(m["a"], (3, "b = c".to_string()));
    }
}
