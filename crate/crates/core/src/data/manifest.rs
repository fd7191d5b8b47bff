use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::{parse_key_values, render_key_values};
use crate::error::{Error, Result};

use super::FeatureDims;

/// Plain `key = value` description of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub split: String,
    pub clips: usize,
    pub captions: usize,
    pub dim_2d: usize,
    pub dim_3d: usize,
    /// 0 when the corpus carries no region features.
    pub dim_roi: usize,
    pub roles: Vec<String>,
    /// Generator seed, synthetic corpora only.
    pub seed: Option<u64>,
}

pub const DEFAULT_ROLES: [&str; 3] = ["event_self", "temporal", "arg"];

impl CorpusManifest {
    pub fn feature_dims(&self) -> FeatureDims {
        FeatureDims {
            dim_2d: self.dim_2d,
            dim_3d: self.dim_3d,
            dim_roi: (self.dim_roi > 0).then_some(self.dim_roi),
        }
    }

    pub fn to_text(&self) -> String {
        let mut pairs = vec![
            ("split", self.split.clone()),
            ("clips", self.clips.to_string()),
            ("captions", self.captions.to_string()),
            ("dim_2d", self.dim_2d.to_string()),
            ("dim_3d", self.dim_3d.to_string()),
            ("dim_roi", self.dim_roi.to_string()),
            ("roles", self.roles.join(",")),
        ];
        if let Some(seed) = self.seed {
            pairs.push(("seed", seed.to_string()));
        }
        render_key_values(&pairs)
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let map: BTreeMap<String, (usize, String)> = parse_key_values(text, path)?;
        let get = |key: &str| -> Result<&str> {
            map.get(key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    message: format!("missing key `{key}`"),
                })
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: map[key].0,
                message: format!("`{key}`: {e}"),
            })
        };
        const KNOWN: [&str; 8] = ["split", "clips", "captions", "dim_2d", "dim_3d", "dim_roi", "roles", "seed"];
        if let Some((k, (line, _))) = map.iter().find(|(k, _)| !KNOWN.contains(&k.as_str())) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                message: format!("unknown manifest key `{k}`"),
            });
        }
        let seed = match map.get("seed") {
            Some((line, v)) => Some(v.parse().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                message: format!("`seed`: {e}"),
            })?),
            None => None,
        };
        Ok(Self {
            split: get("split")?.to_string(),
            clips: num("clips")?,
            captions: num("captions")?,
            dim_2d: num("dim_2d")?,
            dim_3d: num("dim_3d")?,
            dim_roi: num("dim_roi")?,
            roles: get("roles")?.split(',').map(|s| s.trim().to_string()).collect(),
            seed,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
