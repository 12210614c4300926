//! Single-sentence forward evaluation for decoding. Parameters are bound
//! by reference; each decoder step is evaluated on the tape and rewound
//! afterwards so memory stays flat over long searches.

use super::network::{
    attention, attention_keys, decoder_step, encode, readout, EncoderOutput, ModelVars,
};
use super::params::Model;
use crate::error::{NmtError, Result};
use crate::numerics::{softmax, Real, Tape, Tensor, Tensor as T2, Var};
use crate::word_prediction;

/// Values produced by one decoder step.
#[derive(Clone, Debug)]
pub struct StepValues<T> {
    pub state: Vec<T>,
    /// Readout `t_j` feeding the output projection.
    pub readout: Vec<T>,
    pub attention: Vec<T>,
}

pub struct DecodeContext<'m, T: Real> {
    model: &'m Model<T>,
    tape: Tape<'m, T>,
    vars: ModelVars,
    enc: EncoderOutput<T>,
    keys: Vec<Var>,
    base: usize,
}

impl<'m, T: Real> DecodeContext<'m, T> {
    pub fn new(model: &'m Model<T>, source: &[usize]) -> Result<Self> {
        if source.is_empty() {
            return Err(NmtError::Empty("source sentence"));
        }
        let mut tape = Tape::new();
        let vars = ModelVars::frozen(&mut tape, model)?;
        let enc = encode(&mut tape, &vars.enc, source, &vec![1; source.len()], 1)?;
        let keys = attention_keys(&mut tape, &vars.dec.att, &enc)?;
        let base = tape.mark();
        Ok(DecodeContext {
            model,
            tape,
            vars,
            enc,
            keys,
            base,
        })
    }

    pub fn model(&self) -> &'m Model<T> {
        self.model
    }

    pub fn source_len(&self) -> usize {
        self.enc.len
    }

    pub fn initial_state(&self) -> Vec<T> {
        self.tape.value(self.enc.s0).to_vec()
    }

    /// Encoder annotations `h_i`, one vector per source position.
    pub fn annotations(&self) -> Vec<Vec<T>> {
        self.enc
            .annotations
            .iter()
            .map(|&h| self.tape.value(h).to_vec())
            .collect()
    }

    pub fn step(&mut self, prev_state: &[T], prev_token: usize) -> Result<StepValues<T>> {
        let tape = &mut self.tape;
        let prev = tape.constant(T2::matrix(1, prev_state.len(), prev_state.to_vec())?);
        let emb = tape.gather_rows(self.vars.dec.emb, &[prev_token])?;
        let (state, att) = decoder_step(tape, &self.vars.dec, &self.keys, &self.enc, prev, emb)?;
        let t = readout(tape, &self.vars.dec, emb, state, att.context)?;
        let out = StepValues {
            state: tape.value(state).to_vec(),
            readout: tape.value(t).to_vec(),
            attention: tape.value(att.weights).to_vec(),
        };
        tape.truncate(self.base);
        Ok(out)
    }

    /// Word-prediction distribution from the initial state and its
    /// attention weights over the source.
    pub fn wpe(&mut self) -> Result<(Vec<T>, Vec<T>)> {
        let wpe = self.vars.wpe.ok_or(NmtError::MissingHead {
            objective: "word prediction",
            head: "WP_E",
        })?;
        let tape = &mut self.tape;
        let keys = attention_keys(tape, &wpe.att, &self.enc)?;
        let att = attention(tape, &wpe.att, &keys, self.enc.s0, &self.enc)?;
        let logits = word_prediction::wpe_logits(tape, &wpe, self.enc.s0, att.context)?;
        let probs = softmax(tape.value(logits))?;
        let weights = tape.value(att.weights).to_vec();
        tape.truncate(self.base);
        Ok((probs, weights))
    }
}

/// The decoder's output layer `W_f·t + b_f`, evaluated outside the tape.
pub struct OutputLayer<'m, T> {
    weight: &'m Tensor<T>,
    bias: &'m Tensor<T>,
}

impl<'m, T: Real> OutputLayer<'m, T> {
    pub fn of(model: &'m Model<T>) -> Result<Self> {
        Ok(OutputLayer {
            weight: model.params.get("decoder.W_f")?,
            bias: model.params.get("decoder.b_f")?,
        })
    }

    pub fn vocab(&self) -> usize {
        self.bias.len()
    }

    pub fn logit(&self, t: &[T], id: usize) -> T {
        dot(self.weight.row(id), t) + self.bias.data()[id]
    }

    pub fn logits(&self, t: &[T]) -> Vec<T> {
        (0..self.vocab()).map(|id| self.logit(t, id)).collect()
    }

    /// Logits of the listed rows only.
    pub fn logits_for(&self, t: &[T], ids: &[usize]) -> Vec<T> {
        ids.iter().map(|&id| self.logit(t, id)).collect()
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] += a[c * 4 + k] * b[c * 4 + k];
        }
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in chunks * 4..a.len() {
        total += a[k] * b[k];
    }
    total
}
