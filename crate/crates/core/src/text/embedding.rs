use std::collections::BTreeMap;

use rand::Rng;

use crate::tensor::{Tensor, TensorError};

/// Token → row map. Row 0 is the shared unknown-token row.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub const UNKNOWN_ROW: usize = 0;

    /// Builds a vocabulary over the distinct tokens, in sorted order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut sorted: Vec<String> = tokens.into_iter().map(Into::into).collect();
        sorted.sort();
        sorted.dedup();
        Self {
            index: sorted.into_iter().enumerate().map(|(i, t)| (t, i + 1)).collect(),
        }
    }

    /// Number of known tokens (excluding the unknown row).
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Rows including the unknown row.
    pub fn rows(&self) -> usize {
        self.index.len() + 1
    }

    pub fn row_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNKNOWN_ROW)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Tokens in row order.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn rows_of(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.row_of(t)).collect()
    }
}

/// Word vectors for a vocabulary plus one unknown-token row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub vocab: Vocabulary,
    /// `(vocab.len() + 1) × dim`, row 0 is the unknown vector.
    pub vectors: Tensor,
}

impl EmbeddingTable {
    pub const DEFAULT_DIM: usize = 300;

    /// `entries` in any order; a later duplicate replaces an earlier one.
    pub fn from_entries(entries: Vec<(String, Vec<f64>)>, unknown: Vec<f64>) -> Result<Self, TensorError> {
        let dim = unknown.len();
        let mut latest: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (token, v) in entries {
            if v.len() != dim {
                return Err(TensorError::DimensionMismatch {
                    op: "embedding table",
                    left: vec![dim],
                    right: vec![v.len()],
                });
            }
            latest.insert(token, v);
        }
        let vocab = Vocabulary::from_tokens(latest.keys().cloned());
        let mut data = unknown;
        for v in latest.into_values() {
            data.extend(v);
        }
        let vectors = Tensor::new(vec![vocab.rows(), dim], data)?;
        Ok(Self { vocab, vectors })
    }

    /// Uniform(−0.1, 0.1) vectors for `vocab`, unknown row first.
    pub fn random(vocab: Vocabulary, dim: usize, rng: &mut impl Rng) -> Self {
        let data = (0..vocab.rows() * dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let vectors = Tensor::new(vec![vocab.rows(), dim], data).expect("positive dims");
        Self { vocab, vectors }
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    /// Looks up one row per token, the unknown row for out-of-vocabulary tokens.
    pub fn embed_tokens(&self, tokens: &[String]) -> Result<Tensor, TensorError> {
        if tokens.is_empty() {
            return Err(TensorError::Empty { op: "embed_tokens" });
        }
        let dim = self.dim();
        let mut data = Vec::with_capacity(tokens.len() * dim);
        for t in tokens {
            data.extend_from_slice(self.vectors.row_slice(self.vocab.row_of(t)));
        }
        Tensor::new(vec![tokens.len(), dim], data)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn table() -> EmbeddingTable {
        EmbeddingTable::from_entries(
            vec![("a".into(), vec![1.0, 2.0]), ("b".into(), vec![3.0, 4.0])],
            vec![9.0, 9.0],
        )
        .unwrap()
    }

    #[test]
    fn known_token_returns_its_row() {
        let e = table().embed_tokens(&["b".into()]).unwrap();
        assert_eq!(e.data(), &[3.0, 4.0]);
    }

    #[test]
    fn oov_token_returns_unknown_row() {
        let e = table().embed_tokens(&["zzz".into()]).unwrap();
        assert_eq!(e.data(), &[9.0, 9.0]);
    }

    #[test]
    fn repeated_token_gives_identical_rows() {
        let e = table().embed_tokens(&["a".into(), "a".into()]).unwrap();
        assert_eq!(e.row_slice(0), e.row_slice(1));
    }

    #[test]
    fn empty_tokens_rejected() {
        assert!(table().embed_tokens(&[]).is_err());
    }

    #[test]
    fn later_duplicate_wins() {
        let t = EmbeddingTable::from_entries(
            vec![("a".into(), vec![1.0]), ("a".into(), vec![2.0])],
            vec![0.0],
        )
        .unwrap();
        assert_eq!(t.vocab.len(), 1);
        assert_eq!(t.embed_tokens(&["a".into()]).unwrap().data(), &[2.0]);
    }

    #[test]
    fn random_table_is_seeded() {
        let vocab = Vocabulary::from_tokens(["x", "y", "z"]);
        let a = EmbeddingTable::random(vocab.clone(), 4, &mut ChaCha8Rng::seed_from_u64(3));
        let b = EmbeddingTable::random(vocab, 4, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.vectors.data().iter().all(|v| v.abs() < 0.1));
    }
}
