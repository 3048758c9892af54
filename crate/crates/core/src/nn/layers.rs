//! Layers bound to blocks of a [`ParamStore`].
//!
//! Forward passes read parameters through a [`Ctx`] and return whatever the
//! matching backward needs. Backward passes add parameter gradients into a
//! [`Grads`] accumulator and return the input gradient.

use super::functional::{self as f, Mode, NormCache};
use super::params::{Grads, ParamId, ParamKind, ParamStore};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Read-only view of the parameters for one forward pass, plus the running
/// statistics it produced (drained with [`Ctx::into_updates`]).
pub struct Ctx<'a, T> {
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
    stat_updates: Vec<(ParamId, Vec<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self { store, mode, stat_updates: Vec::new() }
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &'a Matrix<T> {
        self.store.value(id)
    }

    /// Running-statistic updates in the order they were produced.
    pub fn into_updates(self) -> Vec<(ParamId, Vec<T>)> {
        self.stat_updates
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), &[in_dim, out_dim], ParamKind::Weight)?;
        let bias = bias.then(|| store.register(format!("{name}.bias"), &[out_dim], ParamKind::Bias)).transpose()?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Matrix<T>) -> Result<Matrix<T>> {
        f::linear(x, ctx.value(self.weight), self.bias.map(|b| ctx.value(b).as_slice()))
    }

    /// `x` is the forward input.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &Matrix<T>,
        dout: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        let (dx, dw, db) = f::linear_backward(x, store.value(self.weight), dout)?;
        grads.add(self.weight, dw)?;
        if let Some(b) = self.bias {
            grads.add_vec(b, db)?;
        }
        Ok(dx)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.register(format!("{name}.gamma"), &[dim], ParamKind::Gamma)?,
            beta: store.register(format!("{name}.beta"), &[dim], ParamKind::Beta)?,
            dim,
        })
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Matrix<T>) -> Result<(Matrix<T>, NormCache<T>)> {
        f::layer_norm(x, ctx.value(self.gamma).as_slice(), ctx.value(self.beta).as_slice(), T::lit(f::NORM_EPS))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &NormCache<T>,
        dout: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        let (dx, dg, db) = f::layer_norm_backward(cache, store.value(self.gamma).as_slice(), dout)?;
        grads.add_vec(self.gamma, dg)?;
        grads.add_vec(self.beta, db)?;
        Ok(dx)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    norm: NormCache<T>,
    mode: Mode,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.register(format!("{name}.gamma"), &[dim], ParamKind::Gamma)?,
            beta: store.register(format!("{name}.beta"), &[dim], ParamKind::Beta)?,
            running_mean: store.register(format!("{name}.running_mean"), &[dim], ParamKind::RunningMean)?,
            running_var: store.register(format!("{name}.running_var"), &[dim], ParamKind::RunningVar)?,
            dim,
        })
    }

    /// Trainable entries only.
    pub fn param_count(&self) -> usize {
        2 * self.dim
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: &Matrix<T>) -> Result<(Matrix<T>, BatchNormCache<T>)> {
        let out = f::batch_norm(
            x,
            ctx.value(self.gamma).as_slice(),
            ctx.value(self.beta).as_slice(),
            ctx.value(self.running_mean).as_slice(),
            ctx.value(self.running_var).as_slice(),
            ctx.mode,
            T::lit(f::NORM_EPS),
        )?;
        if let Some((m, v)) = out.running {
            ctx.stat_updates.push((self.running_mean, m));
            ctx.stat_updates.push((self.running_var, v));
        }
        Ok((out.out, BatchNormCache { norm: out.cache, mode: ctx.mode }))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &BatchNormCache<T>,
        dout: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        let (dx, dg, db) = f::batch_norm_backward(&cache.norm, store.value(self.gamma).as_slice(), cache.mode, dout)?;
        grads.add_vec(self.gamma, dg)?;
        grads.add_vec(self.beta, db)?;
        Ok(dx)
    }
}

/// `Linear(C→hidden) → GELU → Linear(hidden→C)`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    x: Matrix<T>,
    h: Matrix<T>,
    a: Matrix<T>,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out, true)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Matrix<T>) -> Result<(Matrix<T>, MlpCache<T>)> {
        let h = self.fc1.forward(ctx, x)?;
        let a = f::gelu(&h);
        let out = self.fc2.forward(ctx, &a)?;
        Ok((out, MlpCache { x: x.clone(), h, a }))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &MlpCache<T>,
        dout: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        let da = self.fc2.backward(store, grads, &cache.a, dout)?;
        let dh = f::gelu_backward(&cache.h, &da)?;
        self.fc1.backward(store, grads, &cache.x, &dh)
    }
}
