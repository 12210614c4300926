use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocabulary, EOS, PAD};
use crate::error::{NmtError, Result};

pub const DEFAULT_MAX_LEN: usize = 50;
pub const DEFAULT_BATCH_SIZE: usize = 32;

/// Raw whitespace-tokenized parallel sentence.
pub type TokenPair = (Vec<String>, Vec<String>);

/// Source ids and EOS-terminated target ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl SentencePair {
    pub fn new(source: Vec<usize>, mut target: Vec<usize>) -> Self {
        if target.last() != Some(&EOS) {
            target.push(EOS);
        }
        SentencePair { source, target }
    }
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

pub fn read_tokenized(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| NmtError::file(path, e))?;
    Ok(text.lines().map(tokenize).collect())
}

/// Reads two line-aligned files.
pub fn read_parallel(src: &Path, tgt: &Path) -> Result<Vec<TokenPair>> {
    let s = read_tokenized(src)?;
    let t = read_tokenized(tgt)?;
    if s.len() != t.len() {
        return Err(NmtError::Config(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            s.len(),
            tgt.display(),
            t.len()
        )));
    }
    Ok(s.into_iter().zip(t).collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: impl IntoIterator<Item = S>) -> Result<()> {
    let mut out = String::new();
    for line in lines {
        out.push_str(line.as_ref());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| NmtError::file(path, e))
}

/// Encodes raw pairs, appending EOS to targets. Pairs with an empty side or
/// a side longer than `max_len` tokens are dropped.
pub fn encode_pairs(
    raw: &[TokenPair],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    max_len: usize,
) -> Vec<SentencePair> {
    raw.iter()
        .filter(|(x, y)| within_len(x.len(), y.len(), max_len))
        .map(|(x, y)| SentencePair::new(src_vocab.encode(x), tgt_vocab.encode(y)))
        .collect()
}

fn within_len(src_len: usize, tgt_len: usize, max_len: usize) -> bool {
    (1..=max_len).contains(&src_len) && (1..=max_len).contains(&tgt_len)
}

/// Padded mini-batch. Id matrices are row-major `[size × width]`; masks are
/// 1 on real tokens and 0 on PAD.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_width: usize,
    pub tgt_width: usize,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub source_mask: Vec<u8>,
    pub target_mask: Vec<u8>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&SentencePair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(NmtError::Empty("batch"));
        }
        if let Some(p) = pairs.iter().find(|p| p.source.is_empty() || p.target.is_empty()) {
            return Err(NmtError::dim(
                "batch",
                format!("empty sentence (|x|={}, |y|={})", p.source.len(), p.target.len()),
            ));
        }
        let size = pairs.len();
        let src_width = pairs.iter().map(|p| p.source.len()).max().unwrap();
        let tgt_width = pairs.iter().map(|p| p.target.len()).max().unwrap();
        let mut b = Batch {
            size,
            src_width,
            tgt_width,
            source: vec![PAD; size * src_width],
            target: vec![PAD; size * tgt_width],
            source_mask: vec![0; size * src_width],
            target_mask: vec![0; size * tgt_width],
        };
        for (r, p) in pairs.iter().enumerate() {
            for (i, &id) in p.source.iter().enumerate() {
                b.source[r * src_width + i] = id;
                b.source_mask[r * src_width + i] = 1;
            }
            for (j, &id) in p.target.iter().enumerate() {
                b.target[r * tgt_width + j] = id;
                b.target_mask[r * tgt_width + j] = 1;
            }
        }
        Ok(b)
    }

    pub fn source_len(&self, row: usize) -> usize {
        mask_len(&self.source_mask[row * self.src_width..(row + 1) * self.src_width])
    }

    pub fn target_len(&self, row: usize) -> usize {
        mask_len(&self.target_mask[row * self.tgt_width..(row + 1) * self.tgt_width])
    }

    pub fn source_row(&self, row: usize) -> &[usize] {
        &self.source[row * self.src_width..row * self.src_width + self.source_len(row)]
    }

    pub fn target_row(&self, row: usize) -> &[usize] {
        &self.target[row * self.tgt_width..row * self.tgt_width + self.target_len(row)]
    }

    /// Source ids at position `i` for every row.
    pub fn source_column(&self, i: usize) -> Vec<usize> {
        (0..self.size).map(|r| self.source[r * self.src_width + i]).collect()
    }

    pub fn target_column(&self, j: usize) -> Vec<usize> {
        (0..self.size).map(|r| self.target[r * self.tgt_width + j]).collect()
    }
}

fn mask_len(mask: &[u8]) -> usize {
    mask.iter().map(|&m| m as usize).sum()
}

/// Drops over-long pairs, shuffles deterministically when a seed is given,
/// and chunks into batches (the last one may be short).
pub fn make_batches(
    pairs: &[SentencePair],
    batch_size: usize,
    max_len: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(NmtError::OutOfRange {
            what: "batch size",
            value: 0,
            limit: 1,
        });
    }
    // the target carries its EOS, which does not count toward max_len
    let mut kept: Vec<&SentencePair> = pairs
        .iter()
        .filter(|p| within_len(p.source.len(), p.target.len().saturating_sub(1).max(1), max_len))
        .filter(|p| !p.target.is_empty())
        .collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        kept.shuffle(&mut rng);
    }
    kept.chunks(batch_size).map(Batch::from_pairs).collect()
}

/// The positional suffix `{y_j, …, y_|y|}` (1-based `j`): the target words
/// not yet generated before step `j`.
pub fn remaining_bag(y: &[usize], j: usize) -> Result<&[usize]> {
    if j == 0 || j > y.len() {
        return Err(NmtError::OutOfRange {
            what: "step index",
            value: j,
            limit: y.len(),
        });
    }
    Ok(&y[j - 1..])
}
