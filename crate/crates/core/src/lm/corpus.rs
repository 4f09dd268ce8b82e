use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const MASK: usize = 2;
/// First id available to content tokens.
pub const FIRST_CONTENT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    /// Second half of each row repeats the first.
    SyntheticCopy,
    /// I.i.d. tokens with one bigram planted several times per row.
    SyntheticRepeat,
    /// Byte-level windows of a file; byte `b` has id `b + 3`.
    TextFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < FIRST_CONTENT + 1 {
            return Err(Error::Corpus(format!(
                "vocab_size must be at least {}, got {}",
                FIRST_CONTENT + 1,
                self.vocab_size
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::Corpus(format!(
                "seq_len must be at least 2, got {}",
                self.seq_len
            )));
        }
        if self.kind == CorpusKind::TextFile && self.path.is_none() {
            return Err(Error::Corpus("text-file corpus needs a path".into()));
        }
        Ok(())
    }
}

/// A token matrix, one row per sequence.
pub type Batch = Vec<Vec<usize>>;

/// An opened corpus. Text files are read and tokenized once.
#[derive(Clone, Debug)]
pub struct Corpus {
    spec: CorpusSpec,
    text: Vec<usize>,
}

impl Corpus {
    pub fn open(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let mut text = Vec::new();
        if spec.kind == CorpusKind::TextFile {
            let path = spec.path.as_ref().expect("validated");
            let bytes = std::fs::read(path)
                .map_err(|e| Error::Corpus(format!("cannot read {}: {e}", path.display())))?;
            if bytes.len() < spec.seq_len {
                return Err(Error::Corpus(format!(
                    "{} has {} bytes, fewer than seq_len {}",
                    path.display(),
                    bytes.len(),
                    spec.seq_len
                )));
            }
            text = bytes.iter().map(|&b| b as usize + FIRST_CONTENT).collect();
            if let Some(&max) = text.iter().max() {
                if max >= spec.vocab_size {
                    return Err(Error::Corpus(format!(
                        "byte id {max} overflows vocab_size {}",
                        spec.vocab_size
                    )));
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            text,
        })
    }

    pub fn spec(&self) -> &CorpusSpec {
        &self.spec
    }

    pub fn batch(&self, rows: usize, rng: &mut Rng) -> Batch {
        (0..rows).map(|_| self.row(rng)).collect()
    }

    fn content(&self, rng: &mut Rng) -> usize {
        FIRST_CONTENT + rng.below(self.spec.vocab_size - FIRST_CONTENT)
    }

    fn row(&self, rng: &mut Rng) -> Vec<usize> {
        let len = self.spec.seq_len;
        match self.spec.kind {
            CorpusKind::SyntheticCopy => {
                let half = len.div_ceil(2);
                let mut row: Vec<usize> = (0..half).map(|_| self.content(rng)).collect();
                for i in half..len {
                    row.push(row[i - half]);
                }
                row
            }
            CorpusKind::SyntheticRepeat => {
                let mut row: Vec<usize> = (0..len).map(|_| self.content(rng)).collect();
                let (a, b) = (self.content(rng), self.content(rng));
                for _ in 0..(len / 4).max(1) {
                    let at = rng.below(len - 1);
                    row[at] = a;
                    row[at + 1] = b;
                }
                row
            }
            CorpusKind::TextFile => {
                let start = rng.below(self.text.len() - len + 1);
                self.text[start..start + len].to_vec()
            }
        }
    }
}

/// Opens `spec` and draws one batch.
pub fn generate_batch(spec: &CorpusSpec, rows: usize, rng: &mut Rng) -> Result<Batch> {
    Ok(Corpus::open(spec)?.batch(rows, rng))
}
