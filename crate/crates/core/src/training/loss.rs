//! Training objectives as tape graphs. Every component is a negated
//! log-likelihood averaged per sentence and then over the batch, so all
//! values are minimized and non-negative.

use std::fmt;
use std::str::FromStr;

use crate::data::{Batch, BOS};
use crate::error::{NmtError, Result};
use crate::model::{
    attention_keys, decoder_step, encode, output_logits, readout, Heads, ModelVars,
};
use crate::numerics::{Real, Tape, Var};
use crate::word_prediction::{wpd_logits, wpe_log_distribution};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Base,
    L1,
    L2,
    L3,
}

impl Objective {
    pub fn heads(self) -> Heads {
        Heads {
            wpe: matches!(self, Objective::L1 | Objective::L3),
            wpd: matches!(self, Objective::L2 | Objective::L3),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Objective::Base => "base",
            Objective::L1 => "L1",
            Objective::L2 => "L2",
            Objective::L3 => "L3",
        }
    }
}

impl FromStr for Objective {
    type Err = NmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Objective::Base),
            "l1" => Ok(Objective::L1),
            "l2" => Ok(Objective::L2),
            "l3" => Ok(Objective::L3),
            _ => Err(NmtError::Config(format!(
                "unknown objective `{s}` (expected base, L1, L2 or L3)"
            ))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Loss values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_t: f64,
    pub l_wpe: Option<f64>,
    pub l_wpd: Option<f64>,
    pub composite: f64,
}

impl LossBreakdown {
    /// `self + w·other`, component-wise; used for weighted averaging.
    pub fn accumulate(&mut self, other: &LossBreakdown, w: f64) {
        self.l_t += w * other.l_t;
        self.composite += w * other.composite;
        if let Some(v) = other.l_wpe {
            *self.l_wpe.get_or_insert(0.0) += w * v;
        }
        if let Some(v) = other.l_wpd {
            *self.l_wpd.get_or_insert(0.0) += w * v;
        }
    }
}

/// Loss nodes on a tape. `composite` is the node to differentiate.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub l_t: Var,
    pub l_wpe: Option<Var>,
    pub l_wpd: Option<Var>,
    pub composite: Var,
}

impl LossGraph {
    pub fn values<T: Real>(&self, tape: &Tape<'_, T>) -> LossBreakdown {
        let f = |v: Var| tape.scalar(v).as_f64();
        LossBreakdown {
            l_t: f(self.l_t),
            l_wpe: self.l_wpe.map(f),
            l_wpd: self.l_wpd.map(f),
            composite: f(self.composite),
        }
    }
}

/// Per-step multiplicative masks applied to the decoder readout.
pub type DropoutFn<'r, T> = dyn FnMut(usize) -> Vec<T> + 'r;

/// Builds the selected objective over a batch with teacher forcing.
/// `dropout`, when given, returns a readout mask of the requested length
/// for each decoder step.
pub fn build_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    vars: &ModelVars,
    batch: &Batch,
    objective: Objective,
    dropout: Option<&mut DropoutFn<'_, T>>,
) -> Result<LossGraph> {
    Ok(build_loss_terms(tape, vars, batch, objective, dropout)?.0)
}

/// Scalar nodes whose sums make up each component: one per decoder step
/// for L_T and L_WPD, one for L_WPE.
#[derive(Clone, Debug, Default)]
pub(crate) struct LossTerms {
    pub l_t: Vec<Var>,
    pub l_wpe: Vec<Var>,
    pub l_wpd: Vec<Var>,
}

pub(crate) fn build_loss_terms<T: Real>(
    tape: &mut Tape<'_, T>,
    vars: &ModelVars,
    batch: &Batch,
    objective: Objective,
    mut dropout: Option<&mut DropoutFn<'_, T>>,
) -> Result<(LossGraph, LossTerms)> {
    let heads = objective.heads();
    let wpe = match (heads.wpe, vars.wpe) {
        (true, None) => {
            return Err(NmtError::MissingHead {
                objective: objective.name(),
                head: "WP_E",
            })
        }
        (true, Some(w)) => Some(w),
        (false, _) => None,
    };
    let wpd = match (heads.wpd, vars.wpd) {
        (true, None) => {
            return Err(NmtError::MissingHead {
                objective: objective.name(),
                head: "WP_D",
            })
        }
        (true, Some(w)) => Some(w),
        (false, _) => None,
    };

    let rows = batch.size;
    let inv_b = T::one() / T::from_usize(rows).unwrap();
    let lens: Vec<usize> = (0..rows).map(|r| batch.target_len(r)).collect();
    let enc = encode(tape, &vars.enc, &batch.source, &batch.source_mask, rows)?;
    let keys = attention_keys(tape, &vars.dec.att, &enc)?;

    let mut translation_terms = Vec::with_capacity(batch.tgt_width);
    let mut wpd_terms = Vec::new();
    let mut state = enc.s0;
    for j in 0..batch.tgt_width {
        let prev: Vec<usize> = if j == 0 {
            vec![BOS; rows]
        } else {
            batch.target_column(j - 1)
        };
        let emb = tape.gather_rows(vars.dec.emb, &prev)?;
        let (next, att) = decoder_step(tape, &vars.dec, &keys, &enc, state, emb)?;
        state = next;
        let t = readout(tape, &vars.dec, emb, state, att.context)?;
        let t_out = match dropout.as_mut() {
            Some(mask) => {
                let m = mask(tape.value(t).len());
                tape.mul_const(t, m)?
            }
            None => t,
        };
        let logits = output_logits(tape, &vars.dec, t_out)?;
        let logp = tape.log_softmax(logits);
        let gold = batch.target_column(j);
        let picks: Vec<(usize, usize, T)> = (0..rows)
            .filter(|&r| j < lens[r])
            .map(|r| (r, gold[r], -inv_b / T::from_usize(lens[r]).unwrap()))
            .collect();
        translation_terms.push(tape.pick_sum(logp, picks)?);

        if let Some(wpd) = wpd.as_ref() {
            let q = wpd_logits(tape, &vars.dec, wpd, t)?;
            let logq = tape.log_softmax(q);
            let mut picks = Vec::new();
            for r in (0..rows).filter(|&r| j < lens[r]) {
                let w = -inv_b / T::from_usize(lens[r] - j).unwrap();
                let y = batch.target_row(r);
                picks.extend(y[j..].iter().map(|&id| (r, id, w)));
            }
            wpd_terms.push(tape.pick_sum(logq, picks)?);
        }
    }
    let l_t = sum_all(tape, &translation_terms)?;

    let l_wpe = match wpe.as_ref() {
        Some(wpe) => {
            let logp = wpe_log_distribution(tape, wpe, &enc)?;
            let mut picks = Vec::new();
            for r in 0..rows {
                picks.extend(batch.target_row(r).iter().map(|&id| (r, id, -inv_b)));
            }
            Some(tape.pick_sum(logp, picks)?)
        }
        None => None,
    };
    let l_wpd = match wpd {
        Some(_) => Some(sum_all(tape, &wpd_terms)?),
        None => None,
    };

    let mut composite = l_t;
    for v in [l_wpe, l_wpd].into_iter().flatten() {
        composite = tape.add(composite, v)?;
    }
    let terms = LossTerms {
        l_t: translation_terms,
        l_wpe: l_wpe.into_iter().collect(),
        l_wpd: wpd_terms,
    };
    Ok((
        LossGraph {
            l_t,
            l_wpe,
            l_wpd,
            composite,
        },
        terms,
    ))
}

fn sum_all<T: Real>(tape: &mut Tape<'_, T>, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms.split_first().ok_or(NmtError::Empty("loss terms"))?;
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Loss values of a batch without recording gradients or dropout.
pub fn evaluate_loss<T: Real>(
    model: &crate::model::Model<T>,
    batch: &Batch,
    objective: Objective,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = ModelVars::frozen(&mut tape, model)?;
    Ok(build_loss(&mut tape, &vars, batch, objective, None)?.values(&tape))
}

/// L_T of a batch.
pub fn loss_translation<T: Real>(model: &crate::model::Model<T>, batch: &Batch) -> Result<f64> {
    Ok(evaluate_loss(model, batch, Objective::Base)?.l_t)
}

pub fn loss_l1<T: Real>(model: &crate::model::Model<T>, batch: &Batch) -> Result<LossBreakdown> {
    evaluate_loss(model, batch, Objective::L1)
}

pub fn loss_l2<T: Real>(model: &crate::model::Model<T>, batch: &Batch) -> Result<LossBreakdown> {
    evaluate_loss(model, batch, Objective::L2)
}

pub fn loss_l3<T: Real>(model: &crate::model::Model<T>, batch: &Batch) -> Result<LossBreakdown> {
    evaluate_loss(model, batch, Objective::L3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SentencePair, EOS};
    use crate::model::{Init, Model, ModelDims};
    use crate::rng::{stream_rng, Stream};

    fn model(std: f64) -> Model<f64> {
        let mut rng = stream_rng(11, Stream::Init);
        let mut m = Model::new(ModelDims::new(10, 10, 4, 5), Init { std }, &mut rng);
        m.add_heads(Heads::BOTH, Init { std }, &mut rng);
        m
    }

    fn zero_outputs(m: &mut Model<f64>) {
        for name in ["decoder.W_f", "decoder.b_f", "wpe.W_f", "wpe.b_f"] {
            m.params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
    }

    fn pairs() -> Vec<SentencePair> {
        vec![
            SentencePair::new(vec![4, 5, 6], vec![7, 8, 9]),
            SentencePair::new(vec![5], vec![6, 6]),
            SentencePair::new(vec![9, 8, 7, 6, 5], vec![4]),
        ]
    }

    #[test]
    fn uniform_model_values() {
        let mut m = model(0.3);
        zero_outputs(&mut m);
        let ps = pairs();
        let batch = Batch::from_pairs(&ps.iter().collect::<Vec<_>>()).unwrap();
        let b = loss_l3(&m, &batch).unwrap();
        let h = -(0.1f64.ln());
        assert!((b.l_t - h).abs() < 1e-12);
        // mean over sentences of |y| (EOS included): (4 + 3 + 2) / 3
        assert!((b.l_wpe.unwrap() - 3.0 * h).abs() < 1e-12);
        // each step contributes exactly one mean bag term
        assert!((b.l_wpd.unwrap() - 3.0 * h).abs() < 1e-12);
        assert!((b.composite - (b.l_t + b.l_wpe.unwrap() + b.l_wpd.unwrap())).abs() < 1e-12);
        let l1 = loss_l1(&m, &batch).unwrap();
        assert!((l1.composite - (b.composite - b.l_wpd.unwrap())).abs() < 1e-12);
        assert!(l1.l_wpd.is_none());
    }

    #[test]
    fn batched_equals_mean_of_unbatched() {
        let m = model(0.4);
        let ps = pairs();
        let batch = Batch::from_pairs(&ps.iter().collect::<Vec<_>>()).unwrap();
        let all = loss_l3(&m, &batch).unwrap();
        let mut mean = LossBreakdown::default();
        for p in &ps {
            let single = Batch::from_pairs(&[p]).unwrap();
            mean.accumulate(&loss_l3(&m, &single).unwrap(), 1.0 / 3.0);
        }
        assert!((all.l_t - mean.l_t).abs() < 1e-10);
        assert!((all.l_wpe.unwrap() - mean.l_wpe.unwrap()).abs() < 1e-10);
        assert!((all.l_wpd.unwrap() - mean.l_wpd.unwrap()).abs() < 1e-10);
    }

    #[test]
    fn wpd_coefficients() {
        // with a uniform WP_D distribution each step's term is
        // −(1/(|y|−j+1))·(|y|−j+1)·log(1/V), i.e. coefficients 1/3, 1/2, 1
        let mut m = model(0.3);
        zero_outputs(&mut m);
        let p = SentencePair::new(vec![4], vec![5, 6]);
        assert_eq!(p.target, vec![5, 6, EOS]);
        let batch = Batch::from_pairs(&[&p]).unwrap();
        let b = loss_l2(&m, &batch).unwrap();
        assert!((b.l_wpd.unwrap() - 3.0 * -(0.1f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn missing_heads_rejected() {
        let m = model(0.3).base_only();
        let ps = pairs();
        let batch = Batch::from_pairs(&[&ps[0]]).unwrap();
        assert!(loss_translation(&m, &batch).is_ok());
        for obj in [Objective::L1, Objective::L2, Objective::L3] {
            assert!(matches!(
                evaluate_loss(&m, &batch, obj),
                Err(NmtError::MissingHead { .. })
            ));
        }
        assert_eq!("l3".parse::<Objective>().unwrap(), Objective::L3);
        assert!("L4".parse::<Objective>().is_err());
    }

    #[test]
    fn certain_model_has_zero_translation_loss() {
        let mut m = model(0.3);
        // a huge bias on one token makes it certain at every step
        m.params.get_mut("decoder.W_f").unwrap().data_mut().fill(0.0);
        let bf = m.params.get_mut("decoder.b_f").unwrap().data_mut();
        bf.fill(0.0);
        bf[7] = 1e3;
        let p = SentencePair { source: vec![4], target: vec![7, 7] };
        let batch = Batch::from_pairs(&[&p]).unwrap();
        assert!(loss_translation(&m, &batch).unwrap().abs() < 1e-12);
    }
}
