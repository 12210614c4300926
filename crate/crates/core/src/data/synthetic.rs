//! Small deterministic translation tasks over a symbolic alphabet.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use rand::Rng;

use super::corpus::TokenPair;
use super::vocab::NUM_RESERVED;
use crate::error::{NmtError, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticTask {
    Copy,
    Reverse,
    DigitShift,
}

impl FromStr for SyntheticTask {
    type Err = NmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SyntheticTask::Copy),
            "reverse" => Ok(SyntheticTask::Reverse),
            "digit-shift" => Ok(SyntheticTask::DigitShift),
            other => Err(NmtError::Config(format!(
                "unknown task `{other}` (expected copy, reverse or digit-shift)"
            ))),
        }
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticTask::Copy => "copy",
            SyntheticTask::Reverse => "reverse",
            SyntheticTask::DigitShift => "digit-shift",
        })
    }
}

impl SyntheticTask {
    /// Maps a source sentence over the alphabet `0..base` to its target.
    pub fn apply(self, source: &[usize], base: usize) -> Vec<usize> {
        match self {
            SyntheticTask::Copy => source.to_vec(),
            SyntheticTask::Reverse => source.iter().rev().copied().collect(),
            SyntheticTask::DigitShift => source.iter().map(|&d| (d + 1) % base).collect(),
        }
    }
}

/// Generates `n` pairs whose tokens are the decimal symbols `0..base`, with
/// `base = vocab_size − 4` so the reserved ids fit in `vocab_size`.
pub fn gen_synthetic(
    task: SyntheticTask,
    n: usize,
    vocab_size: usize,
    len_range: RangeInclusive<usize>,
    seed: u64,
) -> Result<Vec<TokenPair>> {
    if vocab_size < NUM_RESERVED + 1 {
        return Err(NmtError::OutOfRange {
            what: "synthetic vocabulary size",
            value: vocab_size,
            limit: NUM_RESERVED + 1,
        });
    }
    if len_range.is_empty() || *len_range.start() == 0 {
        return Err(NmtError::Config(format!(
            "bad length range {}..={}",
            len_range.start(),
            len_range.end()
        )));
    }
    let base = vocab_size - NUM_RESERVED;
    let mut rng = stream_rng(seed, Stream::Data);
    let render = |s: &[usize]| s.iter().map(|d| d.to_string()).collect::<Vec<_>>();
    Ok((0..n)
        .map(|_| {
            let len = rng.gen_range(len_range.clone());
            let x: Vec<usize> = (0..len).map(|_| rng.gen_range(0..base)).collect();
            let y = task.apply(&x, base);
            (render(&x), render(&y))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_examples() {
        assert_eq!(SyntheticTask::Copy.apply(&[5, 7], 16), vec![5, 7]);
        assert_eq!(SyntheticTask::Reverse.apply(&[5, 7], 16), vec![7, 5]);
        assert_eq!(SyntheticTask::DigitShift.apply(&[3, 9], 10), vec![4, 0]);
    }

    #[test]
    fn generation_is_seeded() {
        let a = gen_synthetic(SyntheticTask::Reverse, 50, 20, 3..=8, 7).unwrap();
        let b = gen_synthetic(SyntheticTask::Reverse, 50, 20, 3..=8, 7).unwrap();
        let c = gen_synthetic(SyntheticTask::Reverse, 50, 20, 3..=8, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (x, y) in &a {
            assert!((3..=8).contains(&x.len()));
            let rev: Vec<_> = x.iter().rev().cloned().collect();
            assert_eq!(&rev, y);
        }
    }

    #[test]
    fn digit_shift_tokens() {
        let pairs = gen_synthetic(SyntheticTask::DigitShift, 20, 14, 1..=4, 1).unwrap();
        for (x, y) in pairs {
            for (a, b) in x.iter().zip(&y) {
                let a: usize = a.parse().unwrap();
                let b: usize = b.parse().unwrap();
                assert_eq!(b, (a + 1) % 10);
            }
        }
    }

    #[test]
    fn tiny_vocab_rejected() {
        assert!(gen_synthetic(SyntheticTask::Copy, 1, 4, 1..=2, 0).is_err());
    }
}
