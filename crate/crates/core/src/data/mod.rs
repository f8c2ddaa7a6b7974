//! Parallel corpora: synthetic domains, plain-text ingestion and splits.

mod domain;
mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use domain::{generate_domain, split, DomainKind, DomainSpec};
pub use vocab::{Vocab, BOS, CONTENT_SYMBOLS, EOS, PAD, RESERVED, UNK};

use crate::error::{Error, Result};

/// One aligned (source, target) sentence pair of token ids.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

impl Pair {
    pub fn new(source: Vec<u32>, target: Vec<u32>) -> Self {
        Pair { source, target }
    }
}

/// A client's local dataset. `n_k` is its size in pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    domain: String,
    pairs: Vec<Pair>,
}

impl Corpus {
    pub fn new(domain: impl Into<String>, pairs: Vec<Pair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Corpus {
            domain: domain.into(),
            pairs,
        })
    }

    pub(crate) fn from_parts(domain: &str, pairs: Vec<Pair>) -> Self {
        Corpus {
            domain: domain.to_string(),
            pairs,
        }
    }

    /// Concatenation of several corpora, in order.
    pub fn concat<'a>(domain: impl Into<String>, parts: impl IntoIterator<Item = &'a Corpus>) -> Result<Self> {
        let pairs = parts.into_iter().flat_map(|c| c.pairs.iter().cloned()).collect();
        Corpus::new(domain, pairs)
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn n_k(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Line-aligned bitext. Unknown symbols become UNK, lines longer than
/// `max_len - 2` tokens are truncated, and pairs with an empty side are dropped.
pub fn load_parallel_files(
    source_path: &Path,
    target_path: &Path,
    domain: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Corpus> {
    let src = read_lines(source_path)?;
    let tgt = read_lines(target_path)?;
    if src.len() != tgt.len() {
        return Err(Error::LineCountMismatch {
            source_lines: src.len(),
            target_lines: tgt.len(),
        });
    }
    let limit = max_len.saturating_sub(2);
    let pairs = src
        .iter()
        .zip(&tgt)
        .filter_map(|(s, t)| {
            let mut s = vocab.encode(s);
            let mut t = vocab.encode(t);
            if s.is_empty() || t.is_empty() {
                return None;
            }
            s.truncate(limit);
            t.truncate(limit);
            Some(Pair::new(s, t))
        })
        .collect();
    Corpus::new(domain, pairs)
}
