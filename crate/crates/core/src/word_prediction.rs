//! Word-prediction heads. WP_E predicts the target bag from the initial
//! decoder state; WP_D predicts the not-yet-generated suffix from each
//! decoder step, reusing the decoder's output layer.

use crate::data::{remaining_bag, BOS, EOS, PAD, UNK};
use crate::error::{NmtError, Result};
use crate::model::{
    attention, attention_keys, AttentionResult, DecoderVars, EncoderOutput, WpdVars, WpeVars,
};
use crate::numerics::{Real, Tape, Var};

/// Ids always kept in a predicted vocabulary.
pub const FORCED: [usize; 4] = [PAD, UNK, BOS, EOS];

/// Attention over the annotations queried with `s0`.
pub fn wpe_context<T: Real>(
    tape: &mut Tape<'_, T>,
    wpe: &WpeVars,
    enc: &EncoderOutput<T>,
) -> Result<AttentionResult> {
    let keys = attention_keys(tape, &wpe.att, enc)?;
    attention(tape, &wpe.att, &keys, enc.s0, enc)
}

/// `f_p(tanh(W_t·[s0; c_p] + b_t))` before normalization.
pub fn wpe_logits<T: Real>(
    tape: &mut Tape<'_, T>,
    wpe: &WpeVars,
    s0: Var,
    context: Var,
) -> Result<Var> {
    let v = tape.concat(&[s0, context])?;
    let t = tape.linear(v, wpe.w_t, Some(wpe.b_t))?;
    let t = tape.tanh(t);
    tape.linear(t, wpe.w_f, Some(wpe.b_f))
}

/// Per-row bag distribution `[rows × V_tgt]`.
pub fn wpe_distribution<T: Real>(
    tape: &mut Tape<'_, T>,
    wpe: &WpeVars,
    enc: &EncoderOutput<T>,
) -> Result<Var> {
    let att = wpe_context(tape, wpe, enc)?;
    let logits = wpe_logits(tape, wpe, enc.s0, att.context)?;
    Ok(tape.softmax(logits))
}

/// Per-row log distribution, the form the losses consume.
pub fn wpe_log_distribution<T: Real>(
    tape: &mut Tape<'_, T>,
    wpe: &WpeVars,
    enc: &EncoderOutput<T>,
) -> Result<Var> {
    let att = wpe_context(tape, wpe, enc)?;
    let logits = wpe_logits(tape, wpe, enc.s0, att.context)?;
    Ok(tape.log_softmax(logits))
}

/// Picks that sum `weight · log p(y)` over `tokens` of one row, counting
/// repeats.
pub fn bag_picks<T: Real>(row: usize, tokens: &[usize], weight: T) -> Vec<(usize, usize, T)> {
    tokens.iter().map(|&y| (row, y, weight)).collect()
}

/// `Σ_j log P_WPE(y_j | x)` for row `row` of a log distribution.
pub fn wpe_log_prob<T: Real>(
    tape: &mut Tape<'_, T>,
    log_dist: Var,
    row: usize,
    y: &[usize],
) -> Result<Var> {
    if y.is_empty() {
        return Err(NmtError::Empty("target sentence"));
    }
    tape.pick_sum(log_dist, bag_picks(row, y, T::one()))
}

/// `W_f·tanh(W_p·t + b_p) + b_f`; `t` is the decoder readout.
pub fn wpd_logits<T: Real>(
    tape: &mut Tape<'_, T>,
    dec: &DecoderVars,
    wpd: &WpdVars,
    t: Var,
) -> Result<Var> {
    let p = tape.linear(t, wpd.w_p, Some(wpd.b_p))?;
    let p = tape.tanh(p);
    tape.linear(p, dec.w_f, Some(dec.b_f))
}

/// Step distribution shared by every remaining target position.
pub fn wpd_distribution<T: Real>(
    tape: &mut Tape<'_, T>,
    dec: &DecoderVars,
    wpd: &WpdVars,
    state: Var,
    prev_emb: Var,
    att: &AttentionResult,
) -> Result<Var> {
    let t = crate::model::readout(tape, dec, prev_emb, state, att.context)?;
    let logits = wpd_logits(tape, dec, wpd, t)?;
    Ok(tape.softmax(logits))
}

/// `Σ_{k=j}^{|y|} log q_j(y_k)` with 1-based `j`, `log_q` holding the
/// step-`j` log distribution in row `row`.
pub fn wpd_log_prob<T: Real>(
    tape: &mut Tape<'_, T>,
    log_q: Var,
    row: usize,
    y: &[usize],
    j: usize,
) -> Result<Var> {
    let bag = remaining_bag(y, j)?;
    tape.pick_sum(log_q, bag_picks(row, bag, T::one()))
}

/// Top-`n` ids by probability (lower id wins ties) plus [`FORCED`],
/// sorted ascending. `n` is clamped to the vocabulary size.
pub fn predict_vocabulary<T: Real>(probs: &[T], n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(NmtError::OutOfRange {
            what: "predicted vocabulary size",
            value: 0,
            limit: probs.len(),
        });
    }
    let n = n.min(probs.len());
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut keep = vec![false; probs.len()];
    for &id in &order[..n] {
        keep[id] = true;
    }
    for id in FORCED {
        if id < keep.len() {
            keep[id] = true;
        }
    }
    Ok((0..probs.len()).filter(|&i| keep[i]).collect())
}
