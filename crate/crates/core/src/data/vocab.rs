use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{NmtError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_RESERVED: usize = 4;

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<s>", "</s>"];

pub const DEFAULT_MAX_SIZE: usize = 30_000;

/// Token ↔ id mapping. Ids `0..4` are PAD, UNK, BOS and EOS; the rest are
/// ranked by corpus frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_ranked(ranked: Vec<(String, u64)>) -> Self {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut freqs = vec![0; NUM_RESERVED];
        for (tok, f) in ranked {
            tokens.push(tok);
            freqs.push(f);
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            freqs,
            index,
        }
    }

    /// Ranks tokens by descending frequency (ties by first occurrence) and
    /// keeps the first `max_size` entries, reserved ids included.
    pub fn build<I, S, T>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        if max_size < NUM_RESERVED {
            return Err(NmtError::OutOfRange {
                what: "vocabulary size",
                value: max_size,
                limit: NUM_RESERVED,
            });
        }
        let mut counts: HashMap<String, (u64, usize)> = HashMap::new();
        let mut seen_any = false;
        for sentence in corpus {
            for tok in sentence {
                seen_any = true;
                let tok = tok.as_ref();
                if RESERVED_TOKENS.contains(&tok) {
                    continue;
                }
                let order = counts.len();
                counts.entry(tok.to_string()).or_insert((0, order)).0 += 1;
            }
        }
        if !seen_any {
            return Err(NmtError::Empty("corpus"));
        }
        let mut ranked: Vec<(String, u64, usize)> =
            counts.into_iter().map(|(t, (f, o))| (t, f, o)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(max_size - NUM_RESERVED);
        Ok(Self::from_ranked(
            ranked.into_iter().map(|(t, f, _)| (t, f)).collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(NmtError::OutOfRange {
                what: "token id",
                value: id,
                limit: self.tokens.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<T: AsRef<str>>(&self, tokens: &[T]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<&str>> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// Decodes generated ids into surface tokens, stopping at EOS and
    /// skipping PAD/BOS.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => continue,
                _ => out.push(self.token(id)?),
            }
        }
        Ok(out.join(" "))
    }

    /// Writes one `token<TAB>frequency` line per non-reserved entry in
    /// rank order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| NmtError::file(path, e))?;
        let mut w = BufWriter::new(file);
        for (tok, f) in self.tokens.iter().zip(&self.freqs).skip(NUM_RESERVED) {
            writeln!(w, "{tok}\t{f}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NmtError::file(path, e))?;
        let mut ranked = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, freq) = line.split_once('\t').ok_or_else(|| {
                NmtError::Config(format!("{}:{}: expected token<TAB>frequency", path.display(), n + 1))
            })?;
            let freq = freq.trim().parse::<u64>().map_err(|_| {
                NmtError::Config(format!("{}:{}: bad frequency `{freq}`", path.display(), n + 1))
            })?;
            ranked.push((tok.to_string(), freq));
        }
        Ok(Self::from_ranked(ranked))
    }
}
