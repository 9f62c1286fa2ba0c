//! Byte-level corpus and the sequential token stream that feeds training.
//!
//! Every document is encoded as a BOS token followed by its raw bytes, so
//! all models share one 257-entry vocabulary. The stream is read in order;
//! a [`DataCursor`] with a unique-token cap wraps back to offset 0 when it
//! reaches the cap, which is how fixed-data runs reuse tokens.

mod synthetic;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use synthetic::{synthetic_documents, SyntheticSpec};

pub const BOS_ID: u32 = 256;
pub const VOCAB_SIZE: usize = 257;

pub fn tokenize(doc: &[u8]) -> Vec<u32> {
    let mut out = Vec::with_capacity(doc.len() + 1);
    out.push(BOS_ID);
    out.extend(doc.iter().map(|&b| b as u32));
    out
}

/// Inverse of [`tokenize`]: BOS tokens are dropped.
pub fn detokenize(tokens: &[u32]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .filter(|&&t| t != BOS_ID)
        .map(|&t| {
            u8::try_from(t).map_err(|_| Error::invalid(format!("token {t} outside the byte vocabulary")))
        })
        .collect()
}

/// A tokenized corpus held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    tokens: Vec<u16>,
    doc_starts: Vec<u64>,
}

impl Corpus {
    pub fn from_documents<D: AsRef<[u8]>>(docs: &[D]) -> Corpus {
        let total: usize = docs.iter().map(|d| d.as_ref().len() + 1).sum();
        let mut tokens = Vec::with_capacity(total);
        let mut doc_starts = Vec::with_capacity(docs.len());
        for d in docs {
            doc_starts.push(tokens.len() as u64);
            tokens.push(BOS_ID as u16);
            tokens.extend(d.as_ref().iter().map(|&b| b as u16));
        }
        Corpus { tokens, doc_starts }
    }

    /// Reads a flat byte file and its little-endian `u64` document-start index.
    pub fn load(bytes_path: &Path, index_path: &Path) -> Result<Corpus> {
        let bytes = fs::read(bytes_path).map_err(|e| Error::io(bytes_path, e))?;
        let raw = fs::read(index_path).map_err(|e| Error::io(index_path, e))?;
        if raw.len() % 8 != 0 {
            return Err(Error::Decode(format!(
                "{}: index length {} is not a multiple of 8",
                index_path.display(),
                raw.len()
            )));
        }
        let starts: Vec<u64> = raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if starts.first() != Some(&0) && !(starts.is_empty() && bytes.is_empty()) {
            return Err(Error::Decode("document index must start at offset 0".into()));
        }
        if starts.windows(2).any(|w| w[0] > w[1]) || starts.last().is_some_and(|&s| s > bytes.len() as u64) {
            return Err(Error::Decode("document index is not sorted within the byte file".into()));
        }
        let docs: Vec<&[u8]> = starts
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let end = starts.get(i + 1).map_or(bytes.len(), |&e| e as usize);
                &bytes[s as usize..end]
            })
            .collect();
        Ok(Corpus::from_documents(&docs))
    }

    /// Writes `docs` in the format read by [`Corpus::load`].
    pub fn write_documents<D: AsRef<[u8]>>(docs: &[D], bytes_path: &Path, index_path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        let mut index = Vec::with_capacity(docs.len() * 8);
        for d in docs {
            index.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            bytes.extend_from_slice(d.as_ref());
        }
        fs::write(bytes_path, bytes).map_err(|e| Error::io(bytes_path, e))?;
        fs::write(index_path, index).map_err(|e| Error::io(index_path, e))
    }

    pub fn total_tokens(&self) -> u64 {
        self.tokens.len() as u64
    }

    pub fn n_documents(&self) -> usize {
        self.doc_starts.len()
    }

    pub fn token(&self, offset: u64) -> u32 {
        self.tokens[offset as usize] as u32
    }

    pub fn slice(&self, start: u64, len: usize) -> Vec<u32> {
        let s = start as usize;
        self.tokens[s..s + len].iter().map(|&t| t as u32).collect()
    }

    /// Splits off the last documents holding at least `heldout_tokens`
    /// tokens: `(train, heldout)`.
    pub fn split_heldout(&self, heldout_tokens: u64) -> Result<(Corpus, Corpus)> {
        let total = self.total_tokens();
        if heldout_tokens == 0 || heldout_tokens >= total {
            return Err(Error::invalid(format!(
                "held-out size {heldout_tokens} must be in (0, {total})"
            )));
        }
        let cut_doc = self
            .doc_starts
            .iter()
            .rposition(|&s| total - s >= heldout_tokens)
            .filter(|&i| i > 0)
            .ok_or_else(|| Error::invalid("held-out split would leave no training documents"))?;
        let cut = self.doc_starts[cut_doc];
        let train = Corpus {
            tokens: self.tokens[..cut as usize].to_vec(),
            doc_starts: self.doc_starts[..cut_doc].to_vec(),
        };
        let heldout = Corpus {
            tokens: self.tokens[cut as usize..].to_vec(),
            doc_starts: self.doc_starts[cut_doc..].iter().map(|s| s - cut).collect(),
        };
        Ok((train, heldout))
    }

    /// `n` consecutive non-overlapping examples of `len` tokens from the
    /// start of the corpus.
    pub fn examples(&self, n: usize, len: usize) -> Result<Vec<Vec<u32>>> {
        if len == 0 || n == 0 {
            return Err(Error::invalid("examples: n and len must be positive"));
        }
        if (n * len) as u64 > self.total_tokens() {
            return Err(Error::invalid(format!(
                "corpus of {} tokens cannot hold {n} examples of {len}",
                self.total_tokens()
            )));
        }
        Ok((0..n).map(|i| self.slice((i * len) as u64, len)).collect())
    }

    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Position in the token stream, shared across the stages of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataCursor {
    pub offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unique_cap: Option<u64>,
    pub consumed_total: u64,
}

/// One training batch: `batch` windows laid out back to back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl DataCursor {
    pub fn new(unique_cap: Option<u64>) -> DataCursor {
        DataCursor {
            offset: 0,
            unique_cap,
            consumed_total: 0,
        }
    }

    /// Distinct stream offsets served so far. Serving is contiguous, so this
    /// is the consumed count clipped to the cap.
    pub fn distinct_served(&self) -> u64 {
        match self.unique_cap {
            Some(c) => self.consumed_total.min(c),
            None => self.consumed_total,
        }
    }

    pub fn reused(&self) -> u64 {
        self.consumed_total - self.distinct_served()
    }

    fn check(&self, corpus: &Corpus, window: usize) -> Result<()> {
        let total = corpus.total_tokens();
        if total < window as u64 + 1 {
            return Err(Error::invalid(format!(
                "corpus of {total} tokens is shorter than one window of {window} (+1 target)"
            )));
        }
        if let Some(c) = self.unique_cap {
            if c < window as u64 + 1 || c > total {
                return Err(Error::invalid(format!(
                    "unique cap {c} must lie in [{}, {total}]",
                    window + 1
                )));
            }
            if self.offset >= c {
                return Err(Error::invalid(format!("cursor offset {} >= cap {c}", self.offset)));
            }
        }
        Ok(())
    }

    /// Serves `batch` windows of `seq_len` tokens. Targets are each input's
    /// successor in the (possibly wrapping) stream.
    pub fn next_batch(&mut self, corpus: &Corpus, batch: usize, seq_len: usize) -> Result<Batch> {
        if batch == 0 || seq_len == 0 {
            return Err(Error::invalid("next_batch: batch and seq_len must be positive"));
        }
        self.check(corpus, seq_len)?;
        let k = (batch * seq_len) as u64;
        let offsets: Vec<u64> = match self.unique_cap {
            Some(c) => (0..=k).map(|i| (self.offset + i) % c).collect(),
            None => {
                if self.offset + k + 1 > corpus.total_tokens() {
                    return Err(Error::invalid(format!(
                        "corpus exhausted: {} tokens, cursor at {} wants {}",
                        corpus.total_tokens(),
                        self.offset,
                        k + 1
                    )));
                }
                (self.offset..=self.offset + k).collect()
            }
        };
        let stream: Vec<u32> = offsets.iter().map(|&o| corpus.token(o)).collect();
        let mut inputs = Vec::with_capacity(k as usize);
        let mut targets = Vec::with_capacity(k as usize);
        for w in 0..batch {
            let base = w * seq_len;
            inputs.extend_from_slice(&stream[base..base + seq_len]);
            targets.extend_from_slice(&stream[base + 1..base + seq_len + 1]);
        }
        self.offset = offsets[k as usize];
        self.consumed_total += k;
        Ok(Batch { inputs, targets })
    }

    /// Offsets that the next `n` served tokens will come from.
    pub fn peek_offsets(&self, n: u64) -> Vec<u64> {
        (0..n)
            .map(|i| match self.unique_cap {
                Some(c) => (self.offset + i) % c,
                None => self.offset + i,
            })
            .collect()
    }

    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("cursor serializes")
    }

    pub fn restore(record: &str) -> Result<DataCursor> {
        let c: DataCursor =
            toml::from_str(record).map_err(|e| Error::Decode(format!("cursor record: {e}")))?;
        if let Some(cap) = c.unique_cap {
            if cap == 0 || c.offset >= cap {
                return Err(Error::Decode(format!(
                    "cursor record: offset {} outside cap {cap}",
                    c.offset
                )));
            }
        }
        Ok(c)
    }
}
