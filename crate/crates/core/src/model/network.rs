//! The attention encoder-decoder expressed as tape operations. Every
//! function works on a batch: activations are `[rows × width]` matrices.

use super::params::Model;
use crate::error::{NmtError, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Additive logit applied to masked positions before a softmax.
pub const MASK_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub b_h: Var,
}

/// Gate activations of one GRU step.
#[derive(Clone, Copy, Debug)]
pub struct GruTrace {
    pub z: Var,
    pub r: Var,
    pub candidate: Var,
}

/// Additive attention `v·tanh(W[q; h] + b)`. `W` is bound as its query
/// and key column blocks so the key half can be applied once per sentence.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_query: Var,
    pub w_key: Var,
    pub b: Var,
    pub v: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub emb: Var,
    pub fwd: GruVars,
    pub bwd: GruVars,
    pub w_s: Var,
    pub b_s: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub emb: Var,
    pub gru: GruVars,
    pub att: AttentionVars,
    pub w_t: Var,
    pub b_t: Var,
    pub w_f: Var,
    pub b_f: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct WpeVars {
    pub att: AttentionVars,
    pub w_t: Var,
    pub b_t: Var,
    pub w_f: Var,
    pub b_f: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct WpdVars {
    pub w_p: Var,
    pub b_p: Var,
}

/// A model's tensors bound onto a tape.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub enc: EncoderVars,
    pub dec: DecoderVars,
    pub wpe: Option<WpeVars>,
    pub wpd: Option<WpdVars>,
}

impl ModelVars {
    /// Binds every tensor; those for which `trainable(name)` holds are
    /// tracked for gradients.
    pub fn bind<'a, T: Real>(
        tape: &mut Tape<'a, T>,
        model: &'a Model<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<Self> {
        let hid = model.dims.hid;
        let ctx = model.dims.ctx();
        let mut get = |name: &str| -> Result<Var> {
            let t = model.params.get(name)?;
            Ok(if trainable(name) {
                tape.param(name, t)
            } else {
                tape.constant_ref(t)
            })
        };
        let mut gru = |prefix: &str| -> Result<GruVars> {
            Ok(GruVars {
                w_z: get(&format!("{prefix}.W_z"))?,
                b_z: get(&format!("{prefix}.b_z"))?,
                w_r: get(&format!("{prefix}.W_r"))?,
                b_r: get(&format!("{prefix}.b_r"))?,
                w_h: get(&format!("{prefix}.W_h"))?,
                b_h: get(&format!("{prefix}.b_h"))?,
            })
        };
        let fwd = gru("encoder.fwd")?;
        let bwd = gru("encoder.bwd")?;
        let dec_gru = gru("decoder.gru")?;
        let mut raw_att = |prefix: &str| -> Result<(Var, Var, Var)> {
            Ok((
                get(&format!("{prefix}.W"))?,
                get(&format!("{prefix}.b"))?,
                get(&format!("{prefix}.v"))?,
            ))
        };
        let dec_att = raw_att("decoder.att")?;
        let wpe_att = if model.has_wpe() {
            Some(raw_att("wpe.att")?)
        } else {
            None
        };

        let enc = EncoderVars {
            emb: get("encoder.emb")?,
            fwd,
            bwd,
            w_s: get("encoder.W_s")?,
            b_s: get("encoder.b_s")?,
        };
        let dec_rest = (
            get("decoder.emb")?,
            get("decoder.W_t")?,
            get("decoder.b_t")?,
            get("decoder.W_f")?,
            get("decoder.b_f")?,
        );
        let wpe_rest = if model.has_wpe() {
            Some((
                get("wpe.W_t")?,
                get("wpe.b_t")?,
                get("wpe.W_f")?,
                get("wpe.b_f")?,
            ))
        } else {
            None
        };
        let wpd = if model.has_wpd() {
            Some(WpdVars {
                w_p: get("wpd.W_p")?,
                b_p: get("wpd.b_p")?,
            })
        } else {
            None
        };

        let mut split = |(w, b, v): (Var, Var, Var)| -> Result<AttentionVars> {
            Ok(AttentionVars {
                w_query: tape.slice_cols(w, 0, hid)?,
                w_key: tape.slice_cols(w, hid, hid + ctx)?,
                b,
                v,
            })
        };
        let dec = DecoderVars {
            emb: dec_rest.0,
            gru: dec_gru,
            att: split(dec_att)?,
            w_t: dec_rest.1,
            b_t: dec_rest.2,
            w_f: dec_rest.3,
            b_f: dec_rest.4,
        };
        let wpe = match (wpe_att, wpe_rest) {
            (Some(att), Some((w_t, b_t, w_f, b_f))) => Some(WpeVars {
                att: split(att)?,
                w_t,
                b_t,
                w_f,
                b_f,
            }),
            _ => None,
        };
        Ok(ModelVars { enc, dec, wpe, wpd })
    }

    pub fn trainable<'a, T: Real>(tape: &mut Tape<'a, T>, model: &'a Model<T>) -> Result<Self> {
        Self::bind(tape, model, |_| true)
    }

    pub fn frozen<'a, T: Real>(tape: &mut Tape<'a, T>, model: &'a Model<T>) -> Result<Self> {
        Self::bind(tape, model, |_| false)
    }
}

/// One GRU transition: `(1 − z)⊙prev + z⊙h′` with
/// `z = σ(W_z[x; prev])`, `r = σ(W_r[x; prev])`, `h′ = tanh(W_h[x; r⊙prev])`.
pub fn gru_step<T: Real>(
    tape: &mut Tape<'_, T>,
    g: &GruVars,
    prev: Var,
    input: Var,
) -> Result<(Var, GruTrace)> {
    let xh = tape.concat(&[input, prev])?;
    let z = tape.linear(xh, g.w_z, Some(g.b_z))?;
    let z = tape.sigmoid(z);
    let r = tape.linear(xh, g.w_r, Some(g.b_r))?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, prev)?;
    let xrh = tape.concat(&[input, rh])?;
    let cand = tape.linear(xrh, g.w_h, Some(g.b_h))?;
    let cand = tape.tanh(cand);
    let keep = tape.one_minus(z);
    let kept = tape.mul(keep, prev)?;
    let fresh = tape.mul(z, cand)?;
    let new = tape.add(kept, fresh)?;
    Ok((
        new,
        GruTrace {
            z,
            r,
            candidate: cand,
        },
    ))
}

/// Encoder annotations, initial decoder state and the source mask.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T> {
    /// `h_i = [h_fwd_i; h_bwd_i]`, one `[rows × 2·hid]` node per position.
    pub annotations: Vec<Var>,
    pub s0: Var,
    /// Row-major `[rows × len]`, 1 on real tokens.
    pub mask: Vec<T>,
    pub rows: usize,
    pub len: usize,
}

impl<T: Real> EncoderOutput<T> {
    fn mask_logits(&self) -> Vec<T> {
        let neg = T::from_f64_lossy(MASK_LOGIT);
        self.mask
            .iter()
            .map(|&m| if m > T::zero() { T::zero() } else { neg })
            .collect()
    }
}

/// Runs the bidirectional encoder over a padded id matrix `[rows × len]`.
/// Both directions start from zero; padded positions carry the previous
/// state through unchanged, so the backward pass effectively starts at each
/// row's last real token.
pub fn encode<T: Real>(
    tape: &mut Tape<'_, T>,
    enc: &EncoderVars,
    ids: &[usize],
    mask: &[u8],
    rows: usize,
) -> Result<EncoderOutput<T>> {
    if rows == 0 || ids.is_empty() {
        return Err(NmtError::Empty("source sentence"));
    }
    if ids.len() % rows != 0 || mask.len() != ids.len() {
        return Err(NmtError::dim(
            "encode",
            format!("{} ids / {} mask entries for {rows} rows", ids.len(), mask.len()),
        ));
    }
    let len = ids.len() / rows;
    let lengths: Vec<usize> = (0..rows)
        .map(|r| mask[r * len..(r + 1) * len].iter().map(|&m| m as usize).sum())
        .collect();
    if lengths.contains(&0) {
        return Err(NmtError::Empty("source sentence"));
    }
    let hid = tape.value(enc.fwd.b_z).len();
    let column = |i: usize| -> Vec<usize> { (0..rows).map(|r| ids[r * len + i]).collect() };
    let take = |i: usize| -> Vec<T> {
        (0..rows)
            .map(|r| T::from_f64_lossy(mask[r * len + i] as f64))
            .collect()
    };

    let mut embedded = Vec::with_capacity(len);
    for i in 0..len {
        embedded.push(tape.gather_rows(enc.emb, &column(i))?);
    }

    let zero = tape.constant(Tensor::zeros(vec![rows, hid]));
    let mut fwd = Vec::with_capacity(len);
    let mut h = zero;
    for (i, &x) in embedded.iter().enumerate() {
        let (next, _) = gru_step(tape, &enc.fwd, h, x)?;
        h = tape.blend(next, h, take(i))?;
        fwd.push(h);
    }
    let mut bwd = vec![zero; len];
    let mut h = zero;
    for i in (0..len).rev() {
        let (next, _) = gru_step(tape, &enc.bwd, h, embedded[i])?;
        h = tape.blend(next, h, take(i))?;
        bwd[i] = h;
    }
    let mut annotations = Vec::with_capacity(len);
    for i in 0..len {
        annotations.push(tape.concat(&[fwd[i], bwd[i]])?);
    }

    let mask_t: Vec<T> = mask.iter().map(|&m| T::from_f64_lossy(m as f64)).collect();
    let mean_weights: Vec<T> = (0..rows * len)
        .map(|k| mask_t[k] / T::from_usize(lengths[k / len]).unwrap())
        .collect();
    let mean_weights = tape.constant(Tensor::matrix(rows, len, mean_weights)?);
    let mean = tape.weighted_sum(mean_weights, &annotations)?;
    let s0 = tape.linear(mean, enc.w_s, Some(enc.b_s))?;
    let s0 = tape.sigmoid(s0);
    Ok(EncoderOutput {
        annotations,
        s0,
        mask: mask_t,
        rows,
        len,
    })
}

/// Weights and context of one attention read.
#[derive(Clone, Copy, Debug)]
pub struct AttentionResult {
    /// Context `[rows × 2·hid]`.
    pub context: Var,
    /// Normalized weights `[rows × len]`; masked positions are 0.
    pub weights: Var,
    /// Raw scores `[rows × len]`.
    pub scores: Var,
}

/// Key projections `W_key·h_i`, computed once per encoder output.
pub fn attention_keys<T: Real>(
    tape: &mut Tape<'_, T>,
    att: &AttentionVars,
    enc: &EncoderOutput<T>,
) -> Result<Vec<Var>> {
    enc.annotations
        .iter()
        .map(|&h| tape.linear(h, att.w_key, None))
        .collect()
}

/// Masked softmax over raw scores followed by the weighted annotation sum.
pub fn attend<T: Real>(
    tape: &mut Tape<'_, T>,
    scores: Var,
    enc: &EncoderOutput<T>,
) -> Result<AttentionResult> {
    let masked = tape.add_const(scores, &enc.mask_logits())?;
    let weights = tape.softmax(masked);
    let context = tape.weighted_sum(weights, &enc.annotations)?;
    Ok(AttentionResult {
        context,
        weights,
        scores,
    })
}

/// `e_i = v·tanh(W[query; h_i] + b)`, then [`attend`].
pub fn attention<T: Real>(
    tape: &mut Tape<'_, T>,
    att: &AttentionVars,
    keys: &[Var],
    query: Var,
    enc: &EncoderOutput<T>,
) -> Result<AttentionResult> {
    let q = tape.linear(query, att.w_query, Some(att.b))?;
    let mut scores = Vec::with_capacity(keys.len());
    for &k in keys {
        let u = tape.add(q, k)?;
        let u = tape.tanh(u);
        scores.push(tape.linear(u, att.v, None)?);
    }
    let scores = tape.concat(&scores)?;
    attend(tape, scores, enc)
}

/// Attention queried with the previous state, then one GRU step over
/// `[emb(y_{j−1}); c_j]`.
pub fn decoder_step<T: Real>(
    tape: &mut Tape<'_, T>,
    dec: &DecoderVars,
    keys: &[Var],
    enc: &EncoderOutput<T>,
    prev_state: Var,
    prev_emb: Var,
) -> Result<(Var, AttentionResult)> {
    let att = attention(tape, &dec.att, keys, prev_state, enc)?;
    let input = tape.concat(&[prev_emb, att.context])?;
    let (state, _) = gru_step(tape, &dec.gru, prev_state, input)?;
    Ok((state, att))
}

/// Readout `t = tanh(W_t[emb(y_{j−1}); s_j; c_j] + b_t)`.
pub fn readout<T: Real>(
    tape: &mut Tape<'_, T>,
    dec: &DecoderVars,
    prev_emb: Var,
    state: Var,
    context: Var,
) -> Result<Var> {
    let v = tape.concat(&[prev_emb, state, context])?;
    let t = tape.linear(v, dec.w_t, Some(dec.b_t))?;
    Ok(tape.tanh(t))
}

/// Output logits `W_f·t + b_f`.
pub fn output_logits<T: Real>(tape: &mut Tape<'_, T>, dec: &DecoderVars, t: Var) -> Result<Var> {
    tape.linear(t, dec.w_f, Some(dec.b_f))
}

/// `softmax(W_f·(mask ⊙ t) + b_f)`; the optional dropout mask scales the
/// readout.
pub fn output_distribution<T: Real>(
    tape: &mut Tape<'_, T>,
    dec: &DecoderVars,
    state: Var,
    prev_emb: Var,
    att: &AttentionResult,
    dropout: Option<Vec<T>>,
) -> Result<Var> {
    let mut t = readout(tape, dec, prev_emb, state, att.context)?;
    if let Some(mask) = dropout {
        t = tape.mul_const(t, mask)?;
    }
    let logits = output_logits(tape, dec, t)?;
    Ok(tape.softmax(logits))
}
