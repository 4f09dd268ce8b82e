use serde::{Deserialize, Serialize};

use super::corpus::{Batch, MASK};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MaskPolicy {
    /// Each position independently with probability `p`.
    Token { p: f64 },
    /// Spans of geometric length (mean `mean_len`) covering a fraction `p`.
    Span { mean_len: f64, p: f64 },
}

impl MaskPolicy {
    pub fn rate(&self) -> f64 {
        match *self {
            MaskPolicy::Token { p } | MaskPolicy::Span { p, .. } => p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.rate();
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Config(format!(
                "mask rate must lie in (0, 1), got {p}"
            )));
        }
        if let MaskPolicy::Span { mean_len, .. } = *self {
            if mean_len.is_nan() || mean_len < 1.0 {
                return Err(Error::Config(format!(
                    "mean span length must be >= 1, got {mean_len}"
                )));
            }
        }
        Ok(())
    }
}

/// A masked position: row, column, original token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Target {
    pub row: usize,
    pub pos: usize,
    pub token: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Masked {
    pub inputs: Batch,
    pub targets: Vec<Target>,
}

/// Replaces selected positions with [`MASK`] and records what was there.
///
/// The span policy starts a span at each free position with probability
/// `q = p / (mean_len (1 - p))`, draws its length from a geometric law, and
/// leaves at least one unmasked position after each span so that spans keep
/// their drawn length. Spans are clipped at the end of the row. Rates of 0
/// and 1 mask nothing and everything respectively.
pub fn mask_tokens(batch: &Batch, policy: &MaskPolicy, rng: &mut Rng) -> Masked {
    let mut inputs = batch.clone();
    let mut targets = Vec::new();
    let p = policy.rate();
    for (r, row) in batch.iter().enumerate() {
        let mut chosen = vec![false; row.len()];
        if p >= 1.0 {
            chosen.iter_mut().for_each(|c| *c = true);
        } else if p > 0.0 {
            match *policy {
                MaskPolicy::Token { p } => {
                    for c in chosen.iter_mut() {
                        *c = rng.bernoulli(p);
                    }
                }
                MaskPolicy::Span { mean_len, p } => {
                    let q = (p / (mean_len * (1.0 - p))).min(1.0);
                    let mut i = 0;
                    while i < row.len() {
                        if rng.bernoulli(q) {
                            let len = rng.geometric(mean_len);
                            let end = (i + len).min(row.len());
                            chosen[i..end].iter_mut().for_each(|c| *c = true);
                            i = end + 1;
                        } else {
                            i += 1;
                        }
                    }
                }
            }
        }
        for (pos, &c) in chosen.iter().enumerate() {
            if c {
                targets.push(Target {
                    row: r,
                    pos,
                    token: row[pos],
                });
                inputs[r][pos] = MASK;
            }
        }
    }
    Masked { inputs, targets }
}

/// Lengths of maximal runs of masked positions, row by row.
pub fn span_lengths(masked: &Masked) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev: Option<(usize, usize)> = None;
    for t in &masked.targets {
        match prev {
            Some((r, p)) if r == t.row && p + 1 == t.pos => *out.last_mut().unwrap() += 1,
            _ => out.push(1),
        }
        prev = Some((t.row, t.pos));
    }
    out
}
