//! Unbatched scalar-loop reimplementation of the forward pass.

use rand::Rng;
use wpnmt::data::{Batch, SentencePair, BOS, NUM_RESERVED};
use wpnmt::model::{
    attention_keys, decoder_step, encode, DecodeContext, Heads, Init, Model, ModelDims,
    ModelVars, OutputLayer,
};
use wpnmt::numerics::{Tape, Tensor};
use wpnmt::rng::{stream_rng, Stream};
use wpnmt::training::{evaluate_loss, Objective};
use wpnmt::word_prediction::{wpd_distribution, wpe_distribution};

pub struct Oracle<'m>(pub &'m Model<f64>);

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn cat(parts: &[&[f64]]) -> Vec<f64> {
    parts.concat()
}

/// `W[:, from..to]·x + b`
fn affine(w: &Tensor<f64>, cols: std::ops::Range<usize>, x: &[f64], b: Option<&Tensor<f64>>) -> Vec<f64> {
    let (rows, width) = (w.shape()[0], w.shape()[1]);
    assert_eq!(cols.len(), x.len());
    (0..rows)
        .map(|r| {
            let mut acc = b.map_or(0.0, |b| b.data()[r]);
            for (k, c) in cols.clone().enumerate() {
                acc += w.data()[r * width + c] * x[k];
            }
            acc
        })
        .collect()
}

pub struct Att {
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
}

impl<'m> Oracle<'m> {
    fn p(&self, name: &str) -> &'m Tensor<f64> {
        self.0.params.get(name).unwrap()
    }

    fn full(&self, name: &str, x: &[f64], bias: &str) -> Vec<f64> {
        let w = self.p(name);
        affine(w, 0..w.shape()[1], x, Some(self.p(bias)))
    }

    pub fn gru(&self, prefix: &str, prev: &[f64], x: &[f64]) -> Vec<f64> {
        let xh = cat(&[x, prev]);
        let z: Vec<f64> = self.full(&format!("{prefix}.W_z"), &xh, &format!("{prefix}.b_z")).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = self.full(&format!("{prefix}.W_r"), &xh, &format!("{prefix}.b_r")).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(prev).map(|(a, b)| a * b).collect();
        let cand: Vec<f64> = self
            .full(&format!("{prefix}.W_h"), &cat(&[x, &rh]), &format!("{prefix}.b_h"))
            .into_iter()
            .map(f64::tanh)
            .collect();
        (0..prev.len()).map(|k| (1.0 - z[k]) * prev[k] + z[k] * cand[k]).collect()
    }

    /// Annotations and initial state.
    pub fn encode(&self, src: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let hid = self.0.dims.hid;
        let emb = self.p("encoder.emb");
        let mut fwd = Vec::new();
        let mut h = vec![0.0; hid];
        for &x in src {
            h = self.gru("encoder.fwd", &h, emb.row(x));
            fwd.push(h.clone());
        }
        let mut bwd = vec![Vec::new(); src.len()];
        let mut h = vec![0.0; hid];
        for i in (0..src.len()).rev() {
            h = self.gru("encoder.bwd", &h, emb.row(src[i]));
            bwd[i] = h.clone();
        }
        let ann: Vec<Vec<f64>> = (0..src.len()).map(|i| cat(&[&fwd[i], &bwd[i]])).collect();
        let mut mean = vec![0.0; 2 * hid];
        for a in &ann {
            for (m, v) in mean.iter_mut().zip(a) {
                *m += v / src.len() as f64;
            }
        }
        let s0 = self.full("encoder.W_s", &mean, "encoder.b_s").into_iter().map(sigmoid).collect();
        (ann, s0)
    }

    pub fn attend(&self, prefix: &str, query: &[f64], ann: &[Vec<f64>]) -> Att {
        let hid = self.0.dims.hid;
        let w = self.p(&format!("{prefix}.W"));
        let q = affine(w, 0..hid, query, Some(self.p(&format!("{prefix}.b"))));
        let v = self.p(&format!("{prefix}.v")).data();
        let scores: Vec<f64> = ann
            .iter()
            .map(|h| {
                let k = affine(w, hid..w.shape()[1], h, None);
                (0..q.len()).map(|a| v[a] * (q[a] + k[a]).tanh()).sum()
            })
            .collect();
        let weights = softmax(&scores);
        let mut context = vec![0.0; ann[0].len()];
        for (a, h) in weights.iter().zip(ann) {
            for (c, x) in context.iter_mut().zip(h) {
                *c += a * x;
            }
        }
        Att { weights, context }
    }

    /// New state, attention weights and readout for one step.
    pub fn step(&self, prev: &[f64], prev_token: usize, ann: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let e = self.p("decoder.emb").row(prev_token);
        let att = self.attend("decoder.att", prev, ann);
        let state = self.gru("decoder.gru", prev, &cat(&[e, &att.context]));
        let t = self
            .full("decoder.W_t", &cat(&[e, &state, &att.context]), "decoder.b_t")
            .into_iter()
            .map(f64::tanh)
            .collect();
        (state, att.weights, t)
    }

    pub fn output(&self, t: &[f64]) -> Vec<f64> {
        softmax(&self.full("decoder.W_f", t, "decoder.b_f"))
    }

    pub fn wpe(&self, s0: &[f64], ann: &[Vec<f64>]) -> Vec<f64> {
        let att = self.attend("wpe.att", s0, ann);
        let t: Vec<f64> = self.full("wpe.W_t", &cat(&[s0, &att.context]), "wpe.b_t").into_iter().map(f64::tanh).collect();
        softmax(&self.full("wpe.W_f", &t, "wpe.b_f"))
    }

    pub fn wpd(&self, t: &[f64]) -> Vec<f64> {
        let p: Vec<f64> = self.full("wpd.W_p", t, "wpd.b_p").into_iter().map(f64::tanh).collect();
        softmax(&self.full("decoder.W_f", &p, "decoder.b_f"))
    }

    /// (L_T, L_WPE, L_WPD) of one pair; `y` ends with EOS.
    pub fn losses(&self, x: &[usize], y: &[usize]) -> (f64, f64, f64) {
        let (ann, s0) = self.encode(x);
        let n = y.len() as f64;
        let (mut lt, mut lwpd) = (0.0, 0.0);
        let mut state = s0.clone();
        let mut prev = BOS;
        for j in 0..y.len() {
            let (s, _, t) = self.step(&state, prev, &ann);
            lt -= self.output(&t)[y[j]].ln() / n;
            let q = self.wpd(&t);
            let rest = &y[j..];
            lwpd -= rest.iter().map(|&k| q[k].ln()).sum::<f64>() / rest.len() as f64;
            state = s;
            prev = y[j];
        }
        let p = self.wpe(&s0, &ann);
        let lwpe = -y.iter().map(|&k| p[k].ln()).sum::<f64>();
        (lt, lwpe, lwpd)
    }
}

/// Largest absolute difference; length mismatches count as infinite.
pub fn deviation(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub struct Instance {
    pub model: Model<f64>,
    pub pairs: Vec<SentencePair>,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = stream_rng(seed, Stream::Data);
    let src_v = rng.gen_range(6..14);
    let tgt_v = rng.gen_range(6..14);
    let dims = ModelDims::new(src_v, tgt_v, rng.gen_range(2..7), rng.gen_range(2..7));
    let init = Init { std: rng.gen_range(0.2..1.0) };
    let mut model = Model::new(dims, init, &mut stream_rng(seed, Stream::Init));
    model.add_heads(Heads::BOTH, init, &mut stream_rng(seed, Stream::Heads));
    // random biases so that zero-initialized terms are exercised too
    for (_, t) in model.params.iter_mut() {
        if t.shape().len() == 1 {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let rows = rng.gen_range(1..5);
    let pairs = (0..rows)
        .map(|_| {
            let mut sent = |v: usize| -> Vec<usize> {
                let n = rng.gen_range(1..6);
                (0..n).map(|_| rng.gen_range(NUM_RESERVED..v)).collect()
            };
            let x = sent(src_v);
            let y = sent(tgt_v);
            SentencePair::new(x, y)
        })
        .collect();
    Instance { model, pairs }
}


/// Per-quantity deviations of the library from the oracle on one instance.
#[derive(Clone, Copy, Debug, Default)]
pub struct Deviations {
    pub encode: f64,
    pub decoder_step: f64,
    pub wpe: f64,
    pub wpd: f64,
    pub losses: f64,
    pub inference: f64,
}

impl Deviations {
    pub fn max(&self) -> f64 {
        [self.encode, self.decoder_step, self.wpe, self.wpd, self.losses, self.inference]
            .into_iter()
            .fold(0.0, f64::max)
    }

    pub fn merge(&mut self, o: &Deviations) {
        self.encode = self.encode.max(o.encode);
        self.decoder_step = self.decoder_step.max(o.decoder_step);
        self.wpe = self.wpe.max(o.wpe);
        self.wpd = self.wpd.max(o.wpd);
        self.losses = self.losses.max(o.losses);
        self.inference = self.inference.max(o.inference);
    }
}

/// Runs the batched (padded, teacher-forced) path, the loss and the
/// single-sentence inference path against the oracle.
pub fn compare(seed: u64) -> Deviations {
    let Instance { model, pairs } = instance(seed);
    let oracle = Oracle(&model);
    let mut d = Deviations::default();
    let batch = Batch::from_pairs(&pairs.iter().collect::<Vec<_>>()).unwrap();
    let rows = batch.size;
    let hid = model.dims.hid;
    let tv = model.dims.tgt_vocab;
    let mut tape = Tape::new();
    let vars = ModelVars::frozen(&mut tape, &model).unwrap();
    let enc = encode(&mut tape, &vars.enc, &batch.source, &batch.source_mask, rows).unwrap();
    let keys = attention_keys(&mut tape, &vars.dec.att, &enc).unwrap();
    let wpe = wpe_distribution(&mut tape, vars.wpe.as_ref().unwrap(), &enc).unwrap();
    let wpe_vals = tape.value(wpe).to_vec();

    let expected: Vec<_> = pairs.iter().map(|p| oracle.encode(&p.source)).collect();
    for (r, (ann, s0)) in expected.iter().enumerate() {
        d.encode = d.encode.max(deviation(&tape.value(enc.s0)[r * hid..(r + 1) * hid], s0));
        for (i, a) in ann.iter().enumerate() {
            let got = &tape.value(enc.annotations[i])[r * 2 * hid..(r + 1) * 2 * hid];
            d.encode = d.encode.max(deviation(got, a));
        }
        d.wpe = d.wpe.max(deviation(&wpe_vals[r * tv..(r + 1) * tv], &oracle.wpe(s0, ann)));
    }

    let mut state = enc.s0;
    let mut oracle_states: Vec<Vec<f64>> = expected.iter().map(|e| e.1.clone()).collect();
    for j in 0..batch.tgt_width {
        let prev: Vec<usize> = if j == 0 { vec![BOS; rows] } else { batch.target_column(j - 1) };
        let emb = tape.gather_rows(vars.dec.emb, &prev).unwrap();
        let (next, att) = decoder_step(&mut tape, &vars.dec, &keys, &enc, state, emb).unwrap();
        let q = wpd_distribution(&mut tape, &vars.dec, vars.wpd.as_ref().unwrap(), next, emb, &att).unwrap();
        state = next;
        for r in 0..rows {
            if j >= pairs[r].target.len() {
                continue;
            }
            let (s, a, t) = oracle.step(&oracle_states[r], prev[r], &expected[r].0);
            let width = batch.src_width;
            let len = pairs[r].source.len();
            let weights = &tape.value(att.weights)[r * width..(r + 1) * width];
            d.decoder_step = d
                .decoder_step
                .max(deviation(&tape.value(next)[r * hid..(r + 1) * hid], &s))
                .max(deviation(&weights[..len], &a))
                // padded source positions get exactly zero weight
                .max(weights[len..].iter().map(|w| w.abs()).fold(0.0, f64::max));
            d.wpd = d.wpd.max(deviation(&tape.value(q)[r * tv..(r + 1) * tv], &oracle.wpd(&t)));
            oracle_states[r] = s;
        }
    }

    let got = evaluate_loss(&model, &batch, Objective::L3).unwrap();
    let b = pairs.len() as f64;
    let (mut lt, mut le, mut ld) = (0.0, 0.0, 0.0);
    for p in &pairs {
        let (a, e, w) = oracle.losses(&p.source, &p.target);
        lt += a / b;
        le += e / b;
        ld += w / b;
    }
    d.losses = deviation(
        &[got.l_t, got.l_wpe.unwrap(), got.l_wpd.unwrap(), got.composite],
        &[lt, le, ld, lt + le + ld],
    );

    let p = &pairs[0];
    let (ann, s0) = oracle.encode(&p.source);
    let mut ctx = DecodeContext::new(&model, &p.source).unwrap();
    let (wpe, _) = ctx.wpe().unwrap();
    d.inference = deviation(&ctx.initial_state(), &s0).max(deviation(&wpe, &oracle.wpe(&s0, &ann)));
    let out = OutputLayer::of(&model).unwrap();
    let (mut state, mut prev) = (s0.clone(), BOS);
    let mut oracle_state = s0;
    for &y in &p.target {
        let step = ctx.step(&state, prev).unwrap();
        let (s, a, t) = oracle.step(&oracle_state, prev, &ann);
        d.inference = d
            .inference
            .max(deviation(&step.state, &s))
            .max(deviation(&step.attention, &a))
            .max(deviation(&step.readout, &t))
            .max(deviation(&softmax(&out.logits(&step.readout)), &oracle.output(&t)));
        state = step.state;
        oracle_state = s;
        prev = y;
    }
    d
}
