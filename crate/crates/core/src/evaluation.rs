//! Corpus BLEU, word-prediction precision/recall, token accuracy and
//! attention heatmap files.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{write_lines, BOS, EOS, PAD};
use crate::error::{NmtError, Result};

pub const MAX_NGRAM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BleuScore {
    /// Percentage in `[0, 100]`.
    pub bleu: f64,
    pub precisions: [f64; MAX_NGRAM],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn lowercase(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| t.to_lowercase()).collect()
}

/// Case-insensitive corpus BLEU-4 with clipped counts, closest-reference
/// brevity penalty and no smoothing.
pub fn bleu(hypotheses: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<BleuScore> {
    if hypotheses.len() != references.len() {
        return Err(NmtError::dim(
            "bleu",
            format!("{} hypotheses vs {} reference sets", hypotheses.len(), references.len()),
        ));
    }
    let mut matched = [0usize; MAX_NGRAM];
    let mut total = [0usize; MAX_NGRAM];
    let (mut c, mut r) = (0usize, 0usize);
    for (hyp, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(NmtError::Empty("reference set"));
        }
        let hyp = lowercase(hyp);
        let refs: Vec<Vec<String>> = refs.iter().map(|x| lowercase(x)).collect();
        c += hyp.len();
        r += refs
            .iter()
            .map(|x| x.len())
            .min_by_key(|&len| (len.abs_diff(hyp.len()), len))
            .unwrap();
        for n in 1..=MAX_NGRAM {
            let h = ngram_counts(&hyp, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for x in &refs {
                for (g, k) in ngram_counts(x, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in h {
                matched[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; MAX_NGRAM];
    for n in 0..MAX_NGRAM {
        if total[n] > 0 {
            precisions[n] = matched[n] as f64 / total[n] as f64;
        }
    }
    let brevity_penalty = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_NGRAM as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len: c,
        ref_len: r,
    })
}

/// Ids ordered by descending probability; lower id first on ties.
pub fn rank_ids(probs: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..probs.len()).collect();
    ids.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    ids
}

/// The reference word set of one sentence: distinct ids across all its
/// references, without PAD and BOS, and without EOS unless requested.
pub fn reference_set(references: &[Vec<usize>], include_eos: bool) -> BTreeSet<usize> {
    references
        .iter()
        .flatten()
        .copied()
        .filter(|&id| id != PAD && id != BOS && (include_eos || id != EOS))
        .collect()
}

/// `(|T ∩ R| / |T|, |T ∩ R| / |R|)` as percentages. An empty set yields 0
/// for the ratio it divides.
pub fn set_precision_recall(t: &BTreeSet<usize>, r: &BTreeSet<usize>) -> (f64, f64) {
    let hit = t.intersection(r).count() as f64;
    let ratio = |d: usize| if d == 0 { 0.0 } else { 100.0 * hit / d as f64 };
    (ratio(t.len()), ratio(r.len()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionRecall {
    pub n: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Macro-averaged precision and recall of the top-`n` predicted words for
/// each `n`. `ranked[s]` lists sentence `s`'s ids by predicted probability.
pub fn wp_precision_recall(
    ranked: &[Vec<usize>],
    references: &[Vec<Vec<usize>>],
    top_ns: &[usize],
    include_eos: bool,
) -> Result<Vec<PrecisionRecall>> {
    if ranked.len() != references.len() {
        return Err(NmtError::dim(
            "wp_precision_recall",
            format!("{} predictions vs {} reference sets", ranked.len(), references.len()),
        ));
    }
    if ranked.is_empty() {
        return Err(NmtError::Empty("prediction corpus"));
    }
    let sets: Vec<BTreeSet<usize>> = references.iter().map(|r| reference_set(r, include_eos)).collect();
    Ok(top_ns
        .iter()
        .map(|&n| {
            let (mut p, mut r) = (0.0, 0.0);
            for (ids, set) in ranked.iter().zip(&sets) {
                let t: BTreeSet<usize> = ids.iter().take(n).copied().collect();
                let (ps, rs) = set_precision_recall(&t, set);
                p += ps;
                r += rs;
            }
            let k = ranked.len() as f64;
            PrecisionRecall {
                n,
                precision: p / k,
                recall: r / k,
            }
        })
        .collect())
}

/// Position-wise exact matches over the common prefix length, divided by
/// the longer of the two lengths, averaged over sentences. Two empty
/// sequences count as a full match.
pub fn token_accuracy<T: PartialEq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(NmtError::dim(
            "token_accuracy",
            format!("{} hypotheses vs {} references", hypotheses.len(), references.len()),
        ));
    }
    if hypotheses.is_empty() {
        return Err(NmtError::Empty("corpus"));
    }
    let total: f64 = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| {
            let longest = h.len().max(r.len());
            if longest == 0 {
                return 1.0;
            }
            let hits = h.iter().zip(r).filter(|(a, b)| a == b).count();
            hits as f64 / longest as f64
        })
        .sum();
    Ok(total / hypotheses.len() as f64)
}

/// Writes attention rows as a tab-separated matrix: a header of source
/// tokens, then one labelled row per query with six decimals.
pub fn export_heatmap(
    rows: &[Vec<f64>],
    source_tokens: &[String],
    labels: &[String],
    path: &Path,
) -> Result<()> {
    if rows.len() != labels.len() {
        return Err(NmtError::dim(
            "export_heatmap",
            format!("{} rows vs {} labels", rows.len(), labels.len()),
        ));
    }
    let mut lines = Vec::with_capacity(rows.len() + 1);
    lines.push(format!("\t{}", source_tokens.join("\t")));
    for (row, label) in rows.iter().zip(labels) {
        if row.len() != source_tokens.len() {
            return Err(NmtError::dim(
                "export_heatmap",
                format!("row of {} weights for {} source tokens", row.len(), source_tokens.len()),
            ));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(NmtError::dim("export_heatmap", format!("row `{label}` sums to {sum}")));
        }
        let mut line = label.clone();
        for v in row {
            write!(line, "\t{v:.6}").unwrap();
        }
        lines.push(line);
    }
    write_lines(path, lines)
}

/// Parses a heatmap file back into `(source tokens, labels, rows)`.
pub fn read_heatmap(path: &Path) -> Result<(Vec<String>, Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| NmtError::file(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(NmtError::Empty("heatmap file"))?;
    let sources = header.split('\t').skip(1).map(str::to_string).collect();
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for line in lines {
        let mut cells = line.split('\t');
        labels.push(cells.next().unwrap_or_default().to_string());
        let row = cells
            .map(|c| {
                c.parse::<f64>()
                    .map_err(|_| NmtError::Config(format!("bad heatmap cell `{c}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((sources, labels, rows))
}

/// Everything `evaluate` reports.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub bleu: BleuScore,
    pub token_accuracy: Option<f64>,
    pub prediction: Vec<PrecisionRecall>,
}

impl EvalReport {
    /// Tab-separated `key value` lines.
    pub fn tsv(&self) -> String {
        let mut out = String::new();
        let b = &self.bleu;
        writeln!(out, "bleu\t{:.4}", b.bleu).unwrap();
        for (n, p) in b.precisions.iter().enumerate() {
            writeln!(out, "p{}\t{:.4}", n + 1, 100.0 * p).unwrap();
        }
        writeln!(out, "brevity_penalty\t{:.4}", b.brevity_penalty).unwrap();
        writeln!(out, "hyp_len\t{}", b.hyp_len).unwrap();
        writeln!(out, "ref_len\t{}", b.ref_len).unwrap();
        if let Some(acc) = self.token_accuracy {
            writeln!(out, "token_accuracy\t{acc:.4}").unwrap();
        }
        for row in &self.prediction {
            writeln!(out, "wp_precision@{}\t{:.2}", row.n, row.precision).unwrap();
            writeln!(out, "wp_recall@{}\t{:.2}", row.n, row.recall).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_extremes() {
        let h = vec![toks("the cat sat on the mat")];
        let r = vec![vec![toks("the cat sat on the mat")]];
        assert_eq!(bleu(&h, &r).unwrap().bleu, 100.0);
        let r2 = vec![vec![toks("a dog ran by some trees")]];
        assert_eq!(bleu(&h, &r2).unwrap().bleu, 0.0);
        let upper = vec![toks("THE Cat SAT on THE mat")];
        assert_eq!(bleu(&upper, &r).unwrap().bleu, 100.0);
        assert!(bleu(&h, &[]).is_err());
    }

    #[test]
    fn bleu_brevity_and_closest_reference() {
        // c = 4, references of length 5 and 8: closest is 5
        let h = vec![toks("a b c d")];
        let r = vec![vec![toks("a b c d e"), toks("a b c d e f g h")]];
        let s = bleu(&h, &r).unwrap();
        assert_eq!(s.ref_len, 5);
        assert!((s.brevity_penalty - (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-12);
        assert!((s.bleu - 100.0 * s.brevity_penalty).abs() < 1e-9);
        // clipping: "the the the" vs "the cat"
        let s = bleu(&[toks("the the the")], &[vec![toks("the cat")]]).unwrap();
        assert!((s.precisions[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn precision_recall_fixtures() {
        let t: BTreeSet<usize> = [10, 11, 12].into();
        let r: BTreeSet<usize> = [11, 12, 13].into();
        let (p, rc) = set_precision_recall(&t, &r);
        assert!((p - 200.0 / 3.0).abs() < 1e-12 && (rc - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(set_precision_recall(&r, &r), (100.0, 100.0));

        let ranked = vec![vec![12, 11, 10, 13, 4]];
        let refs = vec![vec![vec![11, 13, EOS], vec![12, BOS, 11]]];
        let rows = wp_precision_recall(&ranked, &refs, &[1, 3, 4], false).unwrap();
        assert_eq!(rows[0].precision, 100.0);
        assert!((rows[0].recall - 100.0 / 3.0).abs() < 1e-12);
        assert!((rows[1].recall - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(rows[2].recall, 100.0);
        assert_eq!(reference_set(&refs[0], true).len(), 4);
    }

    #[test]
    fn token_accuracy_examples() {
        assert_eq!(token_accuracy(&[vec![4, 5, 6]], &[vec![4, 5, 6]]).unwrap(), 1.0);
        assert_eq!(token_accuracy(&[vec![4, 5]], &[vec![6, 7]]).unwrap(), 0.0);
        assert!((token_accuracy(&[vec![4, 5, 6]], &[vec![4, 9, 6]]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_accuracy(&[vec![4]], &[vec![4, 5]]).unwrap(), 0.5);
    }

    #[test]
    fn heatmap_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.tsv");
        export_heatmap(&[vec![1.0]], &["x".into()], &["s0".into()], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "\tx\ns0\t1.000000\n");

        let rows = vec![vec![0.2, 0.3, 0.5], vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]];
        let src: Vec<String> = toks("a b c");
        export_heatmap(&rows, &src, &toks("s0 s1"), &path).unwrap();
        let (s, l, back) = read_heatmap(&path).unwrap();
        assert_eq!(s, src);
        assert_eq!(l, toks("s0 s1"));
        for row in back {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        assert!(export_heatmap(&[vec![0.5, 0.2]], &toks("a b"), &toks("q"), &path).is_err());
    }

    #[test]
    fn report_lines_are_key_value() {
        let b = bleu(&[toks("a b c d")], &[vec![toks("a b c d")]]).unwrap();
        let rep = EvalReport {
            bleu: b,
            token_accuracy: Some(1.0),
            prediction: vec![PrecisionRecall { n: 10, precision: 50.0, recall: 100.0 }],
        };
        let text = rep.tsv();
        assert!(text.starts_with("bleu\t100.0000\n"));
        assert!(text.lines().all(|l| l.split('\t').count() == 2));
    }

    proptest! {
        #[test]
        fn recall_monotone_in_n(
            probs in prop::collection::vec(0.0f64..1.0, 6..30),
            refs in prop::collection::vec(0usize..30, 1..8),
        ) {
            let v = probs.len();
            let refs: Vec<usize> = refs.into_iter().map(|r| r % v).collect();
            let ranked = vec![rank_ids(&probs)];
            let ns: Vec<usize> = (1..=v).collect();
            let rows = wp_precision_recall(&ranked, &[vec![refs]], &ns, false).unwrap();
            for w in rows.windows(2) {
                prop_assert!(w[1].recall >= w[0].recall);
                let hits = |r: &PrecisionRecall| r.precision * r.n as f64;
                prop_assert!(hits(&w[1]) + 1e-9 >= hits(&w[0]));
            }
        }

        #[test]
        fn bleu_in_range_and_case_invariant(
            words in prop::collection::vec(prop::sample::select(vec!["a", "B", "c", "D", "e"]), 1..12),
            other in prop::collection::vec(prop::sample::select(vec!["A", "b", "C", "d", "E"]), 1..12),
        ) {
            let h = vec![words.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
            let r = vec![vec![other.iter().map(|s| s.to_string()).collect::<Vec<_>>()]];
            let s = bleu(&h, &r).unwrap();
            prop_assert!((0.0..=100.0).contains(&s.bleu));
            let flipped: Vec<Vec<String>> = h.iter().map(|x| x.iter().map(|t| t.to_uppercase()).collect()).collect();
            prop_assert_eq!(bleu(&flipped, &r).unwrap().bleu, s.bleu);
        }
    }
}
