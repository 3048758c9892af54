use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 0.006, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.02 }
    }
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, ..Self::default() }
    }

    /// Updates every trainable block from its stored gradient. Gradients are
    /// left in place; the caller zeroes them.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some(b) = store.blocks().iter().find(|b| b.kind.trainable() && b.grad.is_none()) {
            return Err(Error::Optimizer(format!("no gradient for `{}`", b.name)));
        }
        let (lr, b1, b2, eps, wd) =
            (T::lit(self.lr), T::lit(self.beta1), T::lit(self.beta2), T::lit(self.eps), T::lit(self.weight_decay));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let b = store.block_mut(id);
            if !b.kind.trainable() {
                continue;
            }
            b.step += 1;
            let t = i32::try_from(b.step).unwrap_or(i32::MAX);
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            let n = b.value.as_slice().len();
            if b.m.len() != n {
                b.m = vec![T::zero(); n];
                b.v = vec![T::zero(); n];
            }
            let w = b.value.as_mut_slice();
            let g = b.grad.as_ref().expect("checked above").as_slice();
            let (m, v) = (&mut b.m, &mut b.v);
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                w[i] = w[i] - lr * wd * w[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
