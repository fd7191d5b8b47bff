//! Corpus files: expert features, caption graphs, word embeddings and the
//! manifest, plus a rule-based caption parser and a synthetic corpus generator.

mod manifest;
mod parse;
mod synth;

pub use manifest::CorpusManifest;
pub use parse::rule_parse_caption;
pub use synth::{synth_corpus, SynthConfig, SynthOutput};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::text::{CaptionGraph, EmbeddingTable, Vocabulary};

pub const FEATURES_FILE: &str = "features.jsonl";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Pre-extracted features for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub f2d: Vec<f64>,
    pub f3d: Vec<f64>,
    pub froi: Option<Vec<f64>>,
}

/// Feature widths every record in a file must match.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureDims {
    pub dim_2d: usize,
    pub dim_3d: usize,
    /// `None` when the corpus has no region features.
    pub dim_roi: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipLine {
    clip_id: String,
    f2d: Vec<f64>,
    f3d: Vec<f64>,
    #[serde(default)]
    froi: Option<Vec<f64>>,
}

/// Nine significant digits: enough to round-trip any `f32`.
pub fn format_float(v: f64) -> String {
    format!("{v:.8e}")
}

fn write_floats(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format_float(*v));
    }
    out.push(']');
}

pub fn features_to_string(clips: &[ClipRecord]) -> String {
    let mut out = String::new();
    for c in clips {
        let id = serde_json::to_string(&c.clip_id).expect("string serializes");
        write!(out, "{{\"clip_id\":{id},\"f2d\":").unwrap();
        write_floats(&mut out, &c.f2d);
        out.push_str(",\"f3d\":");
        write_floats(&mut out, &c.f3d);
        out.push_str(",\"froi\":");
        match &c.froi {
            Some(v) => write_floats(&mut out, v),
            None => out.push_str("null"),
        }
        out.push_str("}\n");
    }
    out
}

pub fn write_features(path: &Path, clips: &[ClipRecord]) -> Result<()> {
    fs::write(path, features_to_string(clips)).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    Ok(lines)
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a features file. Values are stored as 32-bit floats. When `dims` is
/// `None` the first record fixes the expected widths.
pub fn load_features(path: &Path, dims: Option<FeatureDims>) -> Result<Vec<ClipRecord>> {
    let mut expected = dims;
    let mut seen = BTreeSet::new();
    let mut clips = Vec::new();
    for (no, line) in read_lines(path)? {
        let rec: ClipLine = serde_json::from_str(&line).map_err(|e| parse_err(path, no, e.to_string()))?;
        let as_f32 = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x as f32 as f64).collect() };
        let clip = ClipRecord {
            clip_id: rec.clip_id,
            f2d: as_f32(rec.f2d),
            f3d: as_f32(rec.f3d),
            froi: rec.froi.map(as_f32),
        };
        let all = clip.f2d.iter().chain(&clip.f3d).chain(clip.froi.iter().flatten());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(parse_err(path, no, format!("clip `{}` has non-finite values", clip.clip_id)));
        }
        let got = FeatureDims {
            dim_2d: clip.f2d.len(),
            dim_3d: clip.f3d.len(),
            dim_roi: clip.froi.as_ref().map(Vec::len),
        };
        if got.dim_2d == 0 || got.dim_3d == 0 || got.dim_roi == Some(0) {
            return Err(parse_err(path, no, format!("clip `{}` has an empty feature vector", clip.clip_id)));
        }
        match expected {
            None => expected = Some(got),
            Some(want) if want != got => {
                return Err(parse_err(
                    path,
                    no,
                    format!("clip `{}` has dimensions {got:?}, expected {want:?}", clip.clip_id),
                ))
            }
            _ => {}
        }
        if !seen.insert(clip.clip_id.clone()) {
            return Err(parse_err(path, no, format!("duplicate clip id `{}`", clip.clip_id)));
        }
        clips.push(clip);
    }
    Ok(clips)
}

pub fn captions_to_string(graphs: &[CaptionGraph]) -> String {
    let mut out = String::new();
    for g in graphs {
        out.push_str(&serde_json::to_string(g).expect("caption graph serializes"));
        out.push('\n');
    }
    out
}

pub fn write_captions(path: &Path, graphs: &[CaptionGraph]) -> Result<()> {
    fs::write(path, captions_to_string(graphs)).map_err(|e| Error::io(path, e))
}

/// Reads and validates caption graphs against a role vocabulary of `role_count` entries.
pub fn load_caption_graphs(path: &Path, role_count: usize) -> Result<Vec<CaptionGraph>> {
    let mut seen = BTreeSet::new();
    let mut graphs = Vec::new();
    for (no, line) in read_lines(path)? {
        let g: CaptionGraph = serde_json::from_str(&line).map_err(|e| parse_err(path, no, e.to_string()))?;
        g.validate(role_count).map_err(|e| parse_err(path, no, e.to_string()))?;
        if !seen.insert(g.caption_id.clone()) {
            return Err(parse_err(path, no, format!("duplicate caption id `{}`", g.caption_id)));
        }
        graphs.push(g);
    }
    Ok(graphs)
}

/// GloVe-style `token f1 … f_dim` lines. The unknown row is zero.
pub fn load_word_embeddings(path: &Path, dim: usize) -> Result<EmbeddingTable> {
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for (no, line) in read_lines(path)? {
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap().to_string();
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(path, no, format!("bad number: {e}")))?;
        if values.len() != dim {
            return Err(parse_err(
                path,
                no,
                format!("expected {} columns (token + {dim} values), found {}", dim + 1, values.len() + 1),
            ));
        }
        if !seen.insert(token.clone()) {
            log::warn!("{}:{no}: duplicate token `{token}`, keeping the later vector", path.display());
        }
        entries.push((token, values));
    }
    Ok(EmbeddingTable::from_entries(entries, vec![0.0; dim])?)
}

/// A loaded corpus. Every caption's clip id resolves to exactly one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub clips: Vec<ClipRecord>,
    pub captions: Vec<CaptionGraph>,
    clip_index: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn new(manifest: CorpusManifest, clips: Vec<ClipRecord>, captions: Vec<CaptionGraph>) -> Result<Self> {
        let clip_index: BTreeMap<String, usize> =
            clips.iter().enumerate().map(|(i, c)| (c.clip_id.clone(), i)).collect();
        if clip_index.len() != clips.len() {
            return Err(Error::Invalid("duplicate clip ids".into()));
        }
        for g in &captions {
            g.validate(manifest.roles.len())?;
            if !clip_index.contains_key(&g.clip_id) {
                return Err(Error::Invalid(format!(
                    "caption `{}` refers to unknown clip `{}`",
                    g.caption_id, g.clip_id
                )));
            }
        }
        Ok(Self {
            manifest,
            clips,
            captions,
            clip_index,
        })
    }

    /// Loads `manifest.txt`, `features.jsonl` and `captions.jsonl` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = CorpusManifest::load(&dir.join(MANIFEST_FILE))?;
        let clips = load_features(&dir.join(FEATURES_FILE), Some(manifest.feature_dims()))?;
        let captions = load_caption_graphs(&dir.join(CAPTIONS_FILE), manifest.roles.len())?;
        if clips.len() != manifest.clips || captions.len() != manifest.captions {
            return Err(Error::Invalid(format!(
                "manifest lists {} clips / {} captions, files contain {} / {}",
                manifest.clips,
                manifest.captions,
                clips.len(),
                captions.len()
            )));
        }
        Self::new(manifest, clips, captions)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_features(&dir.join(FEATURES_FILE), &self.clips)?;
        write_captions(&dir.join(CAPTIONS_FILE), &self.captions)?;
        self.manifest.save(&dir.join(MANIFEST_FILE))
    }

    pub fn clip_of(&self, caption: &CaptionGraph) -> usize {
        self.clip_index[&caption.clip_id]
    }

    /// Ground-truth clip index for every caption.
    pub fn caption_targets(&self) -> Vec<usize> {
        self.captions.iter().map(|c| self.clip_of(c)).collect()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens(self.captions.iter().flat_map(|c| c.tokens.iter().cloned()))
    }

    /// Word vectors from `path` when given, otherwise seeded uniform(−0.1, 0.1)
    /// vectors over this corpus' vocabulary.
    pub fn embedding_table(&self, path: Option<&Path>, dim: usize, rng: &mut impl Rng) -> Result<EmbeddingTable> {
        match path {
            Some(p) => load_word_embeddings(p, dim),
            None => Ok(EmbeddingTable::random(self.vocabulary(), dim, rng)),
        }
    }

    /// The first `n` clips and the captions that describe them.
    pub fn first_clips(&self, n: usize) -> Result<Self> {
        if n < 2 || n > self.clips.len() {
            return Err(Error::Config(format!(
                "gallery size must be in 2..={}, got {n}",
                self.clips.len()
            )));
        }
        let clips = self.clips[..n].to_vec();
        let captions: Vec<CaptionGraph> = self
            .captions
            .iter()
            .filter(|g| self.clip_of(g) < n)
            .cloned()
            .collect();
        let manifest = CorpusManifest {
            clips: clips.len(),
            captions: captions.len(),
            ..self.manifest.clone()
        };
        Self::new(manifest, clips, captions)
    }

    /// One caption per clip (the first listed), as aligned (clip, caption) index pairs.
    pub fn first_caption_pairs(&self) -> Vec<(usize, usize)> {
        let mut seen = BTreeSet::new();
        let mut pairs = Vec::new();
        for (ci, g) in self.captions.iter().enumerate() {
            let clip = self.clip_of(g);
            if seen.insert(clip) {
                pairs.push((clip, ci));
            }
        }
        pairs
    }
}

pub fn corpus_paths(dir: &Path) -> [PathBuf; 3] {
    [dir.join(FEATURES_FILE), dir.join(CAPTIONS_FILE), dir.join(MANIFEST_FILE)]
}
