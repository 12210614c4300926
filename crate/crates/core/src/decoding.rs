//! Greedy and beam decoding over one model or a probability-averaged
//! ensemble, optionally restricted to a per-sentence vocabulary.

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use log::warn;

use crate::data::EOS;
use crate::error::{NmtError, Result};
use crate::model::{DecodeContext, Model, OutputLayer, MASK_LOGIT};
use crate::numerics::{softmax, Real};
use crate::word_prediction::predict_vocabulary;

pub const DEFAULT_BEAM: usize = 5;

/// Default length limit `2·|x| + 10`.
pub fn default_max_len(source_len: usize) -> usize {
    2 * source_len + 10
}

/// Allowed target ids, sorted and unique. EOS is always present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabMask {
    ids: Vec<usize>,
}

impl VocabMask {
    pub fn new(mut ids: Vec<usize>, vocab: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(NmtError::Empty("vocabulary mask"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(NmtError::OutOfRange {
                what: "masked token id",
                value: bad,
                limit: vocab,
            });
        }
        ids.push(EOS);
        ids.sort_unstable();
        ids.dedup();
        Ok(VocabMask { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.binary_search(&id).is_ok()
    }
}

/// Softmax after adding a large negative logit to every disallowed entry.
pub fn masked_distribution<T: Real>(logits: &[T], mask: &VocabMask) -> Result<Vec<T>> {
    if mask.is_empty() {
        return Err(NmtError::Empty("vocabulary mask"));
    }
    let neg = T::from_f64_lossy(MASK_LOGIT);
    let shifted: Vec<T> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| if mask.contains(i) { l } else { l + neg })
        .collect();
    softmax(&shifted)
}

/// Arithmetic mean of per-model probability vectors.
pub fn ensemble_distribution<T: Real>(dists: &[Vec<T>]) -> Result<Vec<T>> {
    let first = dists.first().ok_or(NmtError::Empty("ensemble"))?;
    if let Some(d) = dists.iter().find(|d| d.len() != first.len()) {
        return Err(NmtError::VocabMismatch(format!(
            "ensemble members have {} and {} output entries",
            first.len(),
            d.len()
        )));
    }
    let k = T::from_usize(dists.len()).unwrap();
    Ok((0..first.len())
        .map(|i| dists.iter().map(|d| d[i]).sum::<T>() / k)
        .collect())
}

/// Calls and wall time spent in the output projection.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProjectionStats {
    pub calls: usize,
    pub rows: usize,
    pub elapsed: Duration,
}

impl ProjectionStats {
    pub fn add(&mut self, other: &ProjectionStats) {
        self.calls += other.calls;
        self.rows += other.rows;
        self.elapsed += other.elapsed;
    }

    pub fn ms(&self) -> f64 {
        self.elapsed.as_secs_f64() * 1e3
    }
}

struct Member<'m, T: Real> {
    ctx: DecodeContext<'m, T>,
    out: OutputLayer<'m, T>,
}

/// Per-sentence decoding state for one or more models. Distributions are
/// over [`Decoder::candidates`]: the allowed ids when a mask is set (using
/// only those rows of the output layer), every id otherwise.
pub struct Decoder<'m, T: Real> {
    members: Vec<Member<'m, T>>,
    mask: Option<VocabMask>,
    candidates: Vec<usize>,
    pub stats: ProjectionStats,
}

/// A decoder step result.
pub struct Step<T> {
    pub states: Vec<Vec<T>>,
    /// Probabilities aligned with [`Decoder::candidates`].
    pub probs: Vec<T>,
    /// Attention weights of the first model.
    pub attention: Vec<T>,
}

impl<'m, T: Real> Decoder<'m, T> {
    pub fn new(models: &[&'m Model<T>], source: &[usize], mask: Option<VocabMask>) -> Result<Self> {
        let first = models.first().ok_or(NmtError::Empty("model list"))?;
        let vocab = first.dims.tgt_vocab;
        let mut members = Vec::with_capacity(models.len());
        for m in models {
            if m.dims.tgt_vocab != vocab || m.dims.src_vocab != first.dims.src_vocab {
                return Err(NmtError::VocabMismatch(format!(
                    "ensemble members have vocabularies {}/{} and {}/{}",
                    first.dims.src_vocab, vocab, m.dims.src_vocab, m.dims.tgt_vocab
                )));
            }
            members.push(Member {
                ctx: DecodeContext::new(m, source)?,
                out: OutputLayer::of(m)?,
            });
        }
        if let Some(mk) = &mask {
            if let Some(&bad) = mk.ids().iter().find(|&&id| id >= vocab) {
                return Err(NmtError::OutOfRange {
                    what: "masked token id",
                    value: bad,
                    limit: vocab,
                });
            }
        }
        let candidates = match &mask {
            Some(m) => m.ids().to_vec(),
            None => (0..vocab).collect(),
        };
        Ok(Decoder {
            members,
            mask,
            candidates,
            stats: ProjectionStats::default(),
        })
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn initial_states(&self) -> Vec<Vec<T>> {
        self.members.iter().map(|m| m.ctx.initial_state()).collect()
    }

    pub fn step(&mut self, states: &[Vec<T>], prev: usize) -> Result<Step<T>> {
        let mut next = Vec::with_capacity(self.members.len());
        let mut dists = Vec::with_capacity(self.members.len());
        let mut attention = Vec::new();
        for (k, (member, state)) in self.members.iter_mut().zip(states).enumerate() {
            let v = member.ctx.step(state, prev)?;
            let start = Instant::now();
            let logits = match &self.mask {
                Some(mask) => member.out.logits_for(&v.readout, mask.ids()),
                None => member.out.logits(&v.readout),
            };
            self.stats.elapsed += start.elapsed();
            self.stats.calls += 1;
            self.stats.rows += logits.len();
            dists.push(softmax(&logits)?);
            if k == 0 {
                attention = v.attention;
            }
            next.push(v.state);
        }
        let probs = if dists.len() == 1 {
            dists.pop().unwrap()
        } else {
            ensemble_distribution(&dists)?
        };
        Ok(Step {
            states: next,
            probs,
            attention,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    /// Emitted ids, ending with EOS when `finished`.
    pub tokens: Vec<usize>,
    /// Total log-probability.
    pub score: f64,
    pub finished: bool,
    /// First model's attention weights for each emitted token.
    pub attention: Vec<Vec<f64>>,
}

/// Repeatedly emits the most probable candidate (lowest id on ties).
pub fn greedy<T: Real>(decoder: &mut Decoder<'_, T>, max_len: usize) -> Result<Translation> {
    if max_len == 0 {
        return Err(NmtError::OutOfRange {
            what: "max length",
            value: 0,
            limit: 1,
        });
    }
    let mut states = decoder.initial_states();
    let mut prev = crate::data::BOS;
    let mut out = Translation {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
        attention: Vec::new(),
    };
    while out.tokens.len() < max_len {
        let step = decoder.step(&states, prev)?;
        let mut best = 0;
        for (i, &p) in step.probs.iter().enumerate() {
            if p > step.probs[best] {
                best = i;
            }
        }
        let id = decoder.candidates()[best];
        out.score += step.probs[best].as_f64().ln();
        out.tokens.push(id);
        out.attention.push(step.attention.iter().map(|v| v.as_f64()).collect());
        states = step.states;
        prev = id;
        if id == EOS {
            out.finished = true;
            break;
        }
    }
    if !out.finished {
        warn!("greedy decoding reached max length {max_len} without EOS");
    }
    Ok(out)
}

#[derive(Clone)]
struct Hyp<T> {
    tokens: Vec<usize>,
    score: f64,
    states: Vec<Vec<T>>,
    attention: Vec<Vec<f64>>,
}

impl<T> Hyp<T> {
    fn into_translation(self, finished: bool) -> Translation {
        Translation {
            tokens: self.tokens,
            score: self.score,
            finished,
            attention: self.attention,
        }
    }
}

/// Higher score first; equal scores prefer the lexicographically smaller
/// sequence.
fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_tokens.cmp(b_tokens))
}

/// Beam search without length normalization. Each step keeps the best
/// `width − completed` expansions; hypotheses ending in EOS move to the
/// completed pool. Returns the best completed hypothesis, or the best
/// unfinished one (with `finished == false`) if none completed.
pub fn beam_search<T: Real>(
    decoder: &mut Decoder<'_, T>,
    width: usize,
    max_len: usize,
) -> Result<Translation> {
    if width == 0 {
        return Err(NmtError::OutOfRange {
            what: "beam width",
            value: 0,
            limit: 1,
        });
    }
    if max_len == 0 {
        return Err(NmtError::OutOfRange {
            what: "max length",
            value: 0,
            limit: 1,
        });
    }
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        states: decoder.initial_states(),
        attention: Vec::new(),
    }];
    let mut completed: Vec<Hyp<T>> = Vec::new();
    for _ in 0..max_len {
        let capacity = width - completed.len();
        let mut expansions: Vec<(f64, usize, usize, usize)> = Vec::new();
        let mut steps = Vec::with_capacity(live.len());
        for (h, hyp) in live.iter().enumerate() {
            let prev = *hyp.tokens.last().unwrap_or(&crate::data::BOS);
            let step = decoder.step(&hyp.states, prev)?;
            for (c, &p) in step.probs.iter().enumerate() {
                if p > T::zero() {
                    expansions.push((hyp.score + p.as_f64().ln(), h, c, decoder.candidates()[c]));
                }
            }
            steps.push(step);
        }
        let seq = |h: usize, id: usize| {
            let mut t = live[h].tokens.clone();
            t.push(id);
            t
        };
        // live hypotheses share one length, so comparing (parent, id)
        // orders the extended sequences lexicographically
        let order = |a: &(f64, usize, usize, usize), b: &(f64, usize, usize, usize)| {
            rank(a.0, &[], b.0, &[])
                .then_with(|| live[a.1].tokens.cmp(&live[b.1].tokens))
                .then_with(|| a.3.cmp(&b.3))
        };
        if expansions.len() > capacity {
            expansions.select_nth_unstable_by(capacity - 1, order);
            expansions.truncate(capacity);
        }
        expansions.sort_by(order);

        let mut next_live = Vec::with_capacity(expansions.len());
        for (score, h, _, id) in expansions {
            let parent = &live[h];
            let step = &steps[h];
            let mut attention = parent.attention.clone();
            attention.push(step.attention.iter().map(|v| v.as_f64()).collect());
            let hyp = Hyp {
                tokens: seq(h, id),
                score,
                states: step.states.clone(),
                attention,
            };
            if id == EOS {
                completed.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
        if live.is_empty() || completed.len() >= width {
            break;
        }
        // log-probabilities only decrease, so no live hypothesis can
        // overtake a strictly better completed one
        let best_done = completed.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if best_done > best_live {
            break;
        }
    }
    let best = |pool: Vec<Hyp<T>>| {
        pool.into_iter()
            .min_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens))
    };
    if let Some(done) = best(completed) {
        return Ok(done.into_translation(true));
    }
    warn!("beam search reached max length {max_len} without a finished hypothesis");
    best(live)
        .map(|h| h.into_translation(false))
        .ok_or(NmtError::Empty("beam"))
}

#[derive(Clone, Debug)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Fixed length limit; `None` uses [`default_max_len`].
    pub max_len: Option<usize>,
    /// Restrict each sentence to its top-`n` predicted words.
    pub vocab_n: Option<usize>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam: DEFAULT_BEAM,
            max_len: None,
            vocab_n: None,
        }
    }
}

/// Aggregate timing of a corpus run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingReport {
    pub sentences: usize,
    pub total_ms: f64,
    pub output_proj_ms: f64,
    /// Allowed-vocabulary size, or the full target vocabulary.
    pub vocab_n: usize,
    pub projection_calls: usize,
}

impl TimingReport {
    pub const HEADER: &'static str = "sentences\ttotal_ms\toutput_proj_ms\tvocab_n";

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.3}\t{:.3}\t{}",
            self.sentences, self.total_ms, self.output_proj_ms, self.vocab_n
        )
    }

    /// Mean projection time per decoder step and model, in milliseconds.
    pub fn ms_per_projection(&self) -> f64 {
        self.output_proj_ms / self.projection_calls.max(1) as f64
    }
}

/// Word-prediction distribution of a sentence, averaged over the members
/// that carry the WP_E head.
pub fn predicted_distribution<T: Real>(models: &[&Model<T>], source: &[usize]) -> Result<Vec<T>> {
    let mut dists = Vec::new();
    for m in models.iter().filter(|m| m.has_wpe()) {
        dists.push(DecodeContext::new(m, source)?.wpe()?.0);
    }
    if dists.is_empty() {
        return Err(NmtError::MissingHead {
            objective: "predicted-vocabulary decoding",
            head: "WP_E",
        });
    }
    ensemble_distribution(&dists)
}

/// Decodes every sentence, building a per-sentence vocabulary mask first
/// when `opts.vocab_n` is set.
pub fn translate_corpus<T: Real>(
    models: &[&Model<T>],
    sources: &[Vec<usize>],
    opts: &DecodeOptions,
) -> Result<(Vec<Translation>, TimingReport)> {
    let vocab = models.first().ok_or(NmtError::Empty("model list"))?.dims.tgt_vocab;
    let start = Instant::now();
    let mut stats = ProjectionStats::default();
    let mut out = Vec::with_capacity(sources.len());
    for src in sources {
        let mask = match opts.vocab_n {
            Some(n) => {
                let probs = predicted_distribution(models, src)?;
                Some(VocabMask::new(predict_vocabulary(&probs, n)?, vocab)?)
            }
            None => None,
        };
        let mut decoder = Decoder::new(models, src, mask)?;
        let max_len = opts.max_len.unwrap_or_else(|| default_max_len(src.len()));
        out.push(beam_search(&mut decoder, opts.beam, max_len)?);
        stats.add(&decoder.stats);
    }
    let report = TimingReport {
        sentences: sources.len(),
        total_ms: start.elapsed().as_secs_f64() * 1e3,
        output_proj_ms: stats.ms(),
        vocab_n: opts.vocab_n.map_or(vocab, |n| n.min(vocab)),
        projection_calls: stats.calls,
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Heads, Init, ModelDims};
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;

    fn model(seed: u64, vocab: usize) -> Model<f64> {
        let mut rng = stream_rng(seed, Stream::Init);
        let mut m = Model::new(ModelDims::new(vocab, vocab, 4, 6), Init { std: 0.8 }, &mut rng);
        m.add_heads(Heads::BOTH, Init { std: 0.8 }, &mut rng);
        m
    }

    #[test]
    fn masked_distribution_examples() {
        let logits = [0.3f64, -1.0, 2.0, 0.5, 1.5];
        let full = VocabMask::new((0..5).collect(), 5).unwrap();
        let p = masked_distribution(&logits, &full).unwrap();
        for (a, b) in p.iter().zip(softmax(&logits).unwrap()) {
            assert!((a - b).abs() < 1e-9);
        }
        let only_eos = VocabMask::new(vec![EOS], 5).unwrap();
        let p = masked_distribution(&logits, &only_eos).unwrap();
        assert_eq!(p[EOS], 1.0);
        assert!(p.iter().enumerate().all(|(i, &v)| i == EOS || v <= 1e-30));
        assert!(VocabMask::new(vec![], 5).is_err());
        assert!(VocabMask::new(vec![9], 5).is_err());
        assert!(VocabMask::new(vec![4], 5).unwrap().contains(EOS));
    }

    #[test]
    fn ensemble_examples() {
        let d = ensemble_distribution(&[vec![1.0f64, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(d, vec![0.5, 0.5]);
        let one = vec![0.2f64, 0.3, 0.5];
        assert_eq!(ensemble_distribution(&[one.clone()]).unwrap(), one);
        let k = ensemble_distribution(&[one.clone(), one.clone(), one.clone()]).unwrap();
        for (a, b) in k.iter().zip(&one) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(ensemble_distribution(&[vec![1.0f64], vec![0.5, 0.5]]).is_err());
        assert!(ensemble_distribution::<f64>(&[]).is_err());
    }

    #[test]
    fn beam_one_is_greedy_and_ensemble_of_copies_is_identity() {
        for seed in 0..5 {
            let m = model(seed, 9);
            let src = [4, 5, 6, 7];
            let g = greedy(&mut Decoder::new(&[&m], &src, None).unwrap(), 12).unwrap();
            let b = beam_search(&mut Decoder::new(&[&m], &src, None).unwrap(), 1, 12).unwrap();
            assert_eq!(g.tokens, b.tokens);
            assert!((g.score - b.score).abs() < 1e-12);
            let e = beam_search(&mut Decoder::new(&[&m, &m], &src, None).unwrap(), 3, 12).unwrap();
            let s = beam_search(&mut Decoder::new(&[&m], &src, None).unwrap(), 3, 12).unwrap();
            assert_eq!(e.tokens, s.tokens);
            assert!(g.tokens.len() == 12 || g.tokens.last() == Some(&EOS));
        }
    }

    #[test]
    fn sliced_and_masked_paths_agree() {
        let m = model(3, 12);
        let src = [4, 9];
        let mask = VocabMask::new(vec![0, 1, 2, 5, 7, 11], 12).unwrap();
        let mut full = Decoder::new(&[&m], &src, None).unwrap();
        let mut sliced = Decoder::new(&[&m], &src, Some(mask.clone())).unwrap();
        let s0 = full.initial_states();
        let a = full.step(&s0, crate::data::BOS).unwrap();
        let b = sliced.step(&s0, crate::data::BOS).unwrap();
        let out = OutputLayer::of(&m).unwrap();
        let ctx_t = DecodeContext::new(&m, &src).unwrap().step(&s0[0], crate::data::BOS).unwrap();
        let masked = masked_distribution(&out.logits(&ctx_t.readout), &mask).unwrap();
        for (k, &id) in sliced.candidates().iter().enumerate() {
            assert!((b.probs[k] - masked[id]).abs() < 1e-12);
        }
        assert_eq!(a.states, b.states);
        assert_eq!(sliced.stats.rows, mask.len());
    }

    #[test]
    fn full_mask_matches_unrestricted() {
        let m = model(5, 10);
        let sources = vec![vec![4, 5, 6], vec![9, 8]];
        let opts = DecodeOptions {
            beam: 3,
            ..DecodeOptions::default()
        };
        let (plain, _) = translate_corpus(&[&m], &sources, &opts).unwrap();
        let (full, report) = translate_corpus(
            &[&m],
            &sources,
            &DecodeOptions {
                vocab_n: Some(10),
                ..opts.clone()
            },
        )
        .unwrap();
        assert_eq!(plain, full);
        assert_eq!(report.sentences, 2);
        assert_eq!(report.tsv().split('\t').count(), 4);
        let base = m.base_only();
        assert!(translate_corpus(&[&base], &sources, &DecodeOptions { vocab_n: Some(3), ..opts })
            .is_err());
    }

    #[test]
    fn unfinished_search_is_flagged() {
        let mut m = model(2, 8);
        let bias = m.params.get_mut("decoder.b_f").unwrap().data_mut();
        bias[EOS] = -50.0;
        let t = beam_search(&mut Decoder::new(&[&m], &[4], None).unwrap(), 2, 3).unwrap();
        assert!(!t.finished);
        assert_eq!(t.tokens.len(), 3);
        assert!(beam_search(&mut Decoder::new(&[&m], &[4], None).unwrap(), 0, 3).is_err());
    }

    /// Exhaustive best sequence of length ≤ `max_len` ending in EOS.
    fn exhaustive(m: &Model<f64>, src: &[usize], max_len: usize) -> (Vec<usize>, f64) {
        fn go(
            d: &mut Decoder<'_, f64>,
            states: Vec<Vec<f64>>,
            prefix: &mut Vec<usize>,
            score: f64,
            left: usize,
            best: &mut (Vec<usize>, f64),
        ) {
            if left == 0 {
                return;
            }
            let prev = *prefix.last().unwrap_or(&crate::data::BOS);
            let step = d.step(&states, prev).unwrap();
            for (id, &p) in step.probs.iter().enumerate() {
                let s = score + p.ln();
                prefix.push(id);
                if id == EOS {
                    if s > best.1 || (s == best.1 && *prefix < best.0) {
                        *best = (prefix.clone(), s);
                    }
                } else if s > best.1 {
                    go(d, step.states.clone(), prefix, s, left - 1, best);
                }
                prefix.pop();
            }
        }
        let mut d = Decoder::new(&[m], src, None).unwrap();
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let s0 = d.initial_states();
        go(&mut d, s0, &mut Vec::new(), 0.0, max_len, &mut best);
        best
    }

    #[test]
    fn wide_beam_finds_exhaustive_optimum() {
        for seed in 0..6 {
            let m = model(seed + 20, 6);
            let (seq, score) = exhaustive(&m, &[4, 5], 3);
            // a width above the number of prefixes keeps every prefix alive
            let t = beam_search(&mut Decoder::new(&[&m], &[4, 5], None).unwrap(), 250, 3).unwrap();
            assert!(t.finished);
            assert_eq!(t.tokens, seq);
            assert!((t.score - score).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn returned_sequences_end_in_eos_or_hit_limit(seed in 0u64..1000, width in 1usize..5) {
            let m = model(seed, 7);
            let t = beam_search(&mut Decoder::new(&[&m], &[4, 6], None).unwrap(), width, 5).unwrap();
            prop_assert!(t.tokens.last() == Some(&EOS) || t.tokens.len() == 5);
            prop_assert_eq!(t.finished, t.tokens.last() == Some(&EOS));
            prop_assert_eq!(t.attention.len(), t.tokens.len());
        }

        #[test]
        fn masked_greedy_keeps_unmasked_output(seed in 0u64..1000, extra in prop::collection::vec(0usize..9, 0..4)) {
            let m = model(seed, 9);
            let src = [4, 5, 8];
            let g = greedy(&mut Decoder::new(&[&m], &src, None).unwrap(), 8).unwrap();
            let mut ids = g.tokens.clone();
            ids.extend(extra);
            let mask = VocabMask::new(ids, 9).unwrap();
            let r = greedy(&mut Decoder::new(&[&m], &src, Some(mask)).unwrap(), 8).unwrap();
            prop_assert_eq!(g.tokens, r.tokens);
        }
    }
}
