//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `RRCKPT\0\0`, `u32` version, `u8` scalar
//! width (4 or 8), `u32`-prefixed resolved config text, `u64` epoch, RNG state
//! (32-byte seed, `u64` stream, `u128` word position), `u64` Adam step,
//! `u32`-prefixed vocabulary list, `u32` tensor count, then per tensor a
//! `u32`-prefixed name, `u32` rank, `u64` extents and the payload. An FNV-1a
//! `u64` of everything before it closes the file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{ParamStore, Precision, Tensor};
use crate::text::Vocabulary;

use super::AdamState;

pub const MAGIC: &[u8; 8] = b"RRCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub vocab: Vec<String>,
    pub params: BTreeMap<String, Tensor>,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn capture(run: &RunConfig, model: &Model, adam: &AdamState, rng: &ChaCha8Rng, epoch: usize) -> Self {
        let mut config = run.clone();
        config.model = model.config.clone();
        Self {
            config,
            epoch,
            rng: RngState::of(rng),
            vocab: model.vocab.tokens().map(String::from).collect(),
            params: model.params.iter().map(|(k, t)| (k.to_string(), t.detached())).collect(),
            adam: adam.clone(),
        }
    }

    /// Rebuilds the model, checking the stored tensors against the layout the
    /// configuration implies.
    pub fn into_parts(self) -> Result<(RunConfig, Model, AdamState, ChaCha8Rng, usize)> {
        let vocab = Vocabulary::from_tokens(self.vocab.iter().cloned());
        if vocab.len() != self.vocab.len() {
            return Err(Error::Checkpoint("vocabulary contains duplicate tokens".into()));
        }
        let specs = self.config.model.param_specs(vocab.rows());
        let expected: BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        let found: BTreeSet<&str> = self.params.keys().map(String::as_str).collect();
        let unknown: Vec<&str> = found.difference(&expected).copied().collect();
        if !unknown.is_empty() {
            return Err(Error::Checkpoint(format!("unknown parameter keys: {}", unknown.join(", "))));
        }
        let missing: Vec<&str> = expected.difference(&found).copied().collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("missing parameter keys: {}", missing.join(", "))));
        }
        let mut params = ParamStore::new();
        for spec in &specs {
            let t = &self.params[&spec.name];
            if t.shape() != spec.shape {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {:?}, configuration implies {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            params.insert(spec.name.clone(), t.detached());
        }
        for (name, moments) in self.adam.m.iter().chain(&self.adam.v) {
            match params.get(name) {
                Ok(p) if p.len() == moments.len() => {}
                _ => return Err(Error::Checkpoint(format!("optimizer state for unknown or mismatched `{name}`"))),
            }
        }
        let model = Model {
            config: self.config.model.clone(),
            vocab,
            params,
        };
        Ok((self.config, model, self.adam, self.rng.restore(), self.epoch))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let precision = self.config.model.precision;
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.buf.push(precision.width_bytes() as u8);
        w.string(&self.config.to_text());
        w.u64(self.epoch as u64);
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.bytes(&self.rng.word_pos.to_le_bytes());
        w.u64(self.adam.step);
        w.u32(self.vocab.len() as u32);
        for t in &self.vocab {
            w.string(t);
        }
        let mut records: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for (name, t) in &self.params {
            records.push((name.clone(), t.shape().to_vec(), t.data()));
        }
        for (prefix, moments) in [(ADAM_M, &self.adam.m), (ADAM_V, &self.adam.v)] {
            for (name, data) in moments {
                records.push((format!("{prefix}{name}"), vec![data.len()], data));
            }
        }
        w.u32(records.len() as u32);
        for (name, shape, data) in records {
            w.string(&name);
            w.u32(shape.len() as u32);
            for e in shape {
                w.u64(e as u64);
            }
            for &v in data {
                match precision {
                    Precision::F32 => w.bytes(&(v as f32).to_le_bytes()),
                    Precision::F64 => w.bytes(&v.to_le_bytes()),
                }
            }
        }
        let hash = fnv1a(&w.buf);
        w.u64(hash);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (this build reads version {CHECKPOINT_VERSION})"
            )));
        }
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Checkpoint("checksum mismatch: file is truncated or corrupt".into()));
        }
        let width = r.take(1)?[0] as usize;
        let precision = Precision::from_width(width as u8)
            .ok_or_else(|| Error::Checkpoint(format!("unsupported scalar width {width}")))?;
        let config_text = r.string()?;
        let config = RunConfig::from_text(&config_text, Path::new("<checkpoint config>"))?;
        if config.model.precision != precision {
            return Err(Error::Checkpoint(format!(
                "scalar width {width} disagrees with configured precision {}",
                config.model.precision
            )));
        }
        let epoch = r.u64()? as usize;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let step = r.u64()?;
        let vocab = (0..r.u32()?).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let mut params = BTreeMap::new();
        let mut adam = AdamState {
            step,
            ..AdamState::default()
        };
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(width).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data: Vec<f64> = match precision {
                Precision::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                Precision::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            let duplicate = if let Some(p) = name.strip_prefix(ADAM_M) {
                adam.m.insert(p.to_string(), data).is_some()
            } else if let Some(p) = name.strip_prefix(ADAM_V) {
                adam.v.insert(p.to_string(), data).is_some()
            } else {
                params.insert(name.clone(), Tensor::new(shape, data)?).is_some()
            };
            if duplicate {
                return Err(Error::Checkpoint(format!("duplicate tensor record `{name}`")));
            }
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after the last record".into()));
        }
        Ok(Self {
            config,
            epoch,
            rng: RngState { seed, stream, word_pos },
            vocab,
            params,
            adam,
        })
    }
}

/// Writes through a temporary file and rename, so a failed save never leaves
/// a partial checkpoint at `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 in a name".into()))
    }
}
