use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{NmtError, Result};
use crate::numerics::{Real, Tensor};

pub const DEFAULT_EMB: usize = 512;
pub const DEFAULT_HID: usize = 1024;
/// Standard deviation of the Gaussian used for non-recurrent weights.
pub const DEFAULT_INIT_STD: f64 = 0.01;

/// Layer sizes. Attention uses `hid` units and the readout layer `emb`
/// units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub emb: usize,
    pub hid: usize,
}

impl ModelDims {
    pub fn new(src_vocab: usize, tgt_vocab: usize, emb: usize, hid: usize) -> Self {
        ModelDims {
            src_vocab,
            tgt_vocab,
            emb,
            hid,
        }
    }

    /// Width of an encoder annotation `[h_fwd; h_bwd]`.
    pub fn ctx(&self) -> usize {
        2 * self.hid
    }

    pub fn att(&self) -> usize {
        self.hid
    }

    pub fn readout(&self) -> usize {
        self.emb
    }
}

/// Which prediction heads a model carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Heads {
    pub wpe: bool,
    pub wpd: bool,
}

impl Heads {
    pub const NONE: Heads = Heads {
        wpe: false,
        wpd: false,
    };
    pub const BOTH: Heads = Heads {
        wpe: true,
        wpd: true,
    };
}

/// Named parameter tensors, kept sorted by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T>(BTreeMap<String, Tensor<T>>);

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore(BTreeMap::new())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.0
            .get(name)
            .ok_or_else(|| NmtError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.0
            .get_mut(name)
            .ok_or_else(|| NmtError::MissingParam(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.0.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.0.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore(self.0.iter().map(|(k, v)| (k.clone(), v.cast())).collect())
    }
}

/// Encoder-decoder parameters plus optional prediction heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub dims: ModelDims,
    pub params: ParamStore<T>,
}

/// How a tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    Gaussian,
    Zero,
    /// GRU weight over `[input; state]`: Gaussian input block, orthogonal
    /// `hid × hid` recurrent block.
    Gru { input: usize },
}

/// Every tensor of a model with the given heads: name, shape and init.
pub fn layout(dims: &ModelDims, heads: Heads) -> Vec<(String, Vec<usize>, InitKind)> {
    use InitKind::*;
    let ModelDims { emb, hid, .. } = *dims;
    let (ctx, att, read) = (dims.ctx(), dims.att(), dims.readout());
    let mut out: Vec<(String, Vec<usize>, InitKind)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind| out.push((name, shape, kind));
    let gru = |push: &mut dyn FnMut(String, Vec<usize>, InitKind), prefix: &str, input: usize| {
        for gate in ["z", "r", "h"] {
            push(format!("{prefix}.W_{gate}"), vec![hid, input + hid], Gru { input });
            push(format!("{prefix}.b_{gate}"), vec![hid], Zero);
        }
    };
    let attention = |push: &mut dyn FnMut(String, Vec<usize>, InitKind), prefix: &str| {
        push(format!("{prefix}.W"), vec![att, hid + ctx], Gaussian);
        push(format!("{prefix}.b"), vec![att], Zero);
        push(format!("{prefix}.v"), vec![1, att], Gaussian);
    };

    push("encoder.emb".into(), vec![dims.src_vocab, emb], Gaussian);
    gru(&mut push, "encoder.fwd", emb);
    gru(&mut push, "encoder.bwd", emb);
    push("encoder.W_s".into(), vec![hid, ctx], Gaussian);
    push("encoder.b_s".into(), vec![hid], Zero);

    push("decoder.emb".into(), vec![dims.tgt_vocab, emb], Gaussian);
    gru(&mut push, "decoder.gru", emb + ctx);
    attention(&mut push, "decoder.att");
    push("decoder.W_t".into(), vec![read, emb + hid + ctx], Gaussian);
    push("decoder.b_t".into(), vec![read], Zero);
    push("decoder.W_f".into(), vec![dims.tgt_vocab, read], Gaussian);
    push("decoder.b_f".into(), vec![dims.tgt_vocab], Zero);

    if heads.wpe {
        attention(&mut push, "wpe.att");
        push("wpe.W_t".into(), vec![read, hid + ctx], Gaussian);
        push("wpe.b_t".into(), vec![read], Zero);
        push("wpe.W_f".into(), vec![dims.tgt_vocab, read], Gaussian);
        push("wpe.b_f".into(), vec![dims.tgt_vocab], Zero);
    }
    if heads.wpd {
        push("wpd.W_p".into(), vec![read, read], Gaussian);
        push("wpd.b_p".into(), vec![read], Zero);
    }
    out
}

/// Initialization recipe: orthogonal square recurrent blocks, zero biases,
/// Gaussian `N(0, std²)` everything else.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub std: f64,
}

impl Default for Init {
    fn default() -> Self {
        Init {
            std: DEFAULT_INIT_STD,
        }
    }
}

impl Init {
    fn gaussian<T: Real, R: Rng>(&self, n: usize, rng: &mut R) -> Vec<T> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * self.std)
            })
            .collect()
    }

    pub fn tensor<T: Real, R: Rng>(&self, shape: Vec<usize>, kind: InitKind, rng: &mut R) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = match kind {
            InitKind::Zero => vec![T::zero(); n],
            InitKind::Gaussian => self.gaussian(n, rng),
            InitKind::Gru { input } => {
                let hid = shape[0];
                let g: Vec<T> = self.gaussian(hid * input, rng);
                let q = orthogonal(hid, rng);
                let mut data = Vec::with_capacity(n);
                for r in 0..hid {
                    data.extend_from_slice(&g[r * input..(r + 1) * input]);
                    data.extend(q[r * hid..(r + 1) * hid].iter().map(|&v| T::from_f64_lossy(v)));
                }
                data
            }
        };
        Tensor::new(shape, data).expect("layout shape")
    }
}

/// Random orthogonal `n×n` matrix (row-major `f64`) via modified
/// Gram-Schmidt on a Gaussian matrix.
pub fn orthogonal<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= dot * b;
                }
            }
            let norm = cols[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols[i].iter_mut().for_each(|a| *a /= norm);
        }
        if ok {
            let mut out = vec![0.0; n * n];
            for (c, col) in cols.iter().enumerate() {
                for (r, &v) in col.iter().enumerate() {
                    out[r * n + c] = v;
                }
            }
            return out;
        }
    }
}

impl<T: Real> Model<T> {
    /// Fresh baseline encoder-decoder without prediction heads.
    pub fn new<R: Rng>(dims: ModelDims, init: Init, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        for (name, shape, kind) in layout(&dims, Heads::NONE) {
            params.insert(name, init.tensor(shape, kind, rng));
        }
        Model { dims, params }
    }

    /// Adds freshly initialized prediction heads; existing heads are kept.
    pub fn add_heads<R: Rng>(&mut self, heads: Heads, init: Init, rng: &mut R) {
        let wanted = Heads {
            wpe: heads.wpe && !self.has_wpe(),
            wpd: heads.wpd && !self.has_wpd(),
        };
        for (name, shape, kind) in layout(&self.dims, wanted) {
            if is_head_param(&name) {
                self.params.insert(name, init.tensor(shape, kind, rng));
            }
        }
    }

    pub fn has_wpe(&self) -> bool {
        self.params.contains("wpe.W_f")
    }

    pub fn has_wpd(&self) -> bool {
        self.params.contains("wpd.W_p")
    }

    pub fn heads(&self) -> Heads {
        Heads {
            wpe: self.has_wpe(),
            wpd: self.has_wpd(),
        }
    }

    /// Copy holding only the baseline (non-head) tensors.
    pub fn base_only(&self) -> Self {
        let mut params = ParamStore::new();
        for (name, t) in self.params.iter() {
            if !is_head_param(name) {
                params.insert(name, t.clone());
            }
        }
        Model {
            dims: self.dims,
            params,
        }
    }

    /// Recovers the layer sizes from tensor shapes and checks that the
    /// store holds exactly the expected tensors.
    pub fn from_params(params: ParamStore<T>) -> Result<Self> {
        let emb = params.get("encoder.emb")?;
        let dec_emb = params.get("decoder.emb")?;
        let ws = params.get("encoder.W_s")?;
        let dims = ModelDims {
            src_vocab: emb.shape()[0],
            tgt_vocab: dec_emb.shape()[0],
            emb: emb.shape()[1],
            hid: ws.shape()[0],
        };
        let heads = Heads {
            wpe: params.contains("wpe.W_f"),
            wpd: params.contains("wpd.W_p"),
        };
        let expected = layout(&dims, heads);
        for (name, shape, _) in &expected {
            let got = params.get(name)?;
            if got.shape() != shape.as_slice() {
                return Err(NmtError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    got.shape()
                )));
            }
        }
        if params.len() != expected.len() {
            let extra = params
                .names()
                .find(|n| !expected.iter().any(|(e, _, _)| e == n))
                .unwrap_or_default();
            return Err(NmtError::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(Model { dims, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            dims: self.dims,
            params: self.params.cast(),
        }
    }
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("wpe.") || name.starts_with("wpd.")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn orthogonal_is_orthogonal() {
        let mut rng = stream_rng(3, Stream::Init);
        let n = 6;
        let q = orthogonal(n, &mut rng);
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| q[k * n + i] * q[k * n + j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn init_layout() {
        let dims = ModelDims::new(11, 13, 4, 5);
        let mut rng = stream_rng(1, Stream::Init);
        let mut m: Model<f64> = Model::new(dims, Init::default(), &mut rng);
        assert_eq!(m.params.get("encoder.fwd.W_z").unwrap().shape(), &[5, 9]);
        assert_eq!(m.params.get("decoder.gru.W_h").unwrap().shape(), &[5, 4 + 10 + 5]);
        assert_eq!(m.params.get("decoder.W_f").unwrap().shape(), &[13, 4]);
        assert!(m.params.get("decoder.b_f").unwrap().data().iter().all(|&v| v == 0.0));
        // recurrent block of a GRU weight is orthogonal
        let w = m.params.get("encoder.bwd.W_r").unwrap();
        for i in 0..5 {
            let row = &w.row(i)[4..];
            let norm: f64 = row.iter().map(|v| v * v).sum();
            assert!((norm - 1.0).abs() < 1e-10);
        }
        assert!(!m.has_wpe());
        m.add_heads(Heads::BOTH, Init::default(), &mut rng);
        assert!(m.has_wpe() && m.has_wpd());
        assert_eq!(m.params.get("wpd.W_p").unwrap().shape(), &[4, 4]);
        let rebuilt = Model::from_params(m.params.clone()).unwrap();
        assert_eq!(rebuilt.dims, dims);
        assert_eq!(m.base_only().params.len() + 9, m.params.len());
    }

    #[test]
    fn from_params_rejects_bad_shapes() {
        let dims = ModelDims::new(7, 7, 3, 4);
        let mut rng = stream_rng(1, Stream::Init);
        let mut m: Model<f32> = Model::new(dims, Init::default(), &mut rng);
        m.params.insert("decoder.b_f", Tensor::zeros(vec![6]));
        assert!(Model::from_params(m.params.clone()).is_err());
        m.params.insert("decoder.b_f", Tensor::zeros(vec![7]));
        m.params.insert("stray", Tensor::zeros(vec![1]));
        assert!(Model::from_params(m.params).is_err());
    }
}
