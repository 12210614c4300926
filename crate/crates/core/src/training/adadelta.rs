use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{NmtError, Result};
use crate::model::ParamStore;
use crate::numerics::{Gradients, Real};

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_CLIP: f64 = 1.0;

/// AdaDelta running averages, kept per named parameter in `f64`.
#[derive(Clone, Debug)]
pub struct AdaDelta {
    pub rho: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub clip: f64,
    sq_grad: BTreeMap<String, Vec<f64>>,
    sq_delta: BTreeMap<String, Vec<f64>>,
}

impl Default for AdaDelta {
    fn default() -> Self {
        AdaDelta::new(DEFAULT_RHO, DEFAULT_EPS, DEFAULT_CLIP)
    }
}

impl AdaDelta {
    pub fn new(rho: f64, eps: f64, clip: f64) -> Self {
        AdaDelta {
            rho,
            eps,
            clip,
            sq_grad: BTreeMap::new(),
            sq_delta: BTreeMap::new(),
        }
    }

    /// Applies one update from named gradients and returns the gradient
    /// norm before clipping. Parameters are untouched when any gradient is
    /// non-finite.
    pub fn step<T: Real>(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[(String, Vec<T>)],
    ) -> Result<f64> {
        let mut norm_sq = 0.0;
        for (name, g) in grads {
            for &v in g {
                let v = v.as_f64();
                if !v.is_finite() {
                    return Err(NmtError::NonFinite(format!("gradient of `{name}`")));
                }
                norm_sq += v * v;
            }
        }
        let norm = norm_sq.sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        let (rho, eps) = (self.rho, self.eps);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.len() != g.len() {
                return Err(NmtError::dim(
                    "adadelta",
                    format!("`{name}`: {} values, {} gradients", p.len(), g.len()),
                ));
            }
            let eg = self.sq_grad.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let ed = self.sq_delta.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                let gk = g[k].as_f64() * scale;
                eg[k] = rho * eg[k] + (1.0 - rho) * gk * gk;
                let delta = -((ed[k] + eps).sqrt() / (eg[k] + eps).sqrt()) * gk;
                ed[k] = rho * ed[k] + (1.0 - rho) * delta * delta;
                *x = T::from_f64_lossy(x.as_f64() + delta);
            }
        }
        Ok(norm)
    }

    /// Running averages of one parameter: `(E[g²], E[Δx²])`.
    pub fn state(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.sq_grad.get(name)?, self.sq_delta.get(name)?))
    }
}

/// Named gradients in parameter-name order.
pub fn collect_grads<T: Real>(grads: &Gradients<T>) -> Vec<(String, Vec<T>)> {
    let mut out: Vec<(String, Vec<T>)> = grads
        .params()
        .map(|(n, t)| (n.to_string(), t.into_data()))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Inverted dropout mask: 0 with probability `rate`, else `1/(1−rate)`.
pub fn dropout_mask<T: Real, R: Rng>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NmtError::Config(format!("dropout rate {rate} not in [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(vec![T::one(); len]);
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect())
}
