use super::kernels::SparseConv;
use super::neighbors::NeighborMap;
use crate::error::Result;
use crate::nn::functional::{gelu, gelu_backward};
use crate::nn::{BatchNorm, BatchNormCache, Ctx, Grads, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// `GELU(x + BN(Conv(GELU(BN(Conv(x))))))` with two bias-free 3×3×3 convs.
#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    pub conv1: SparseConv,
    pub bn1: BatchNorm,
    pub conv2: SparseConv,
    pub bn2: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct ResBlockCache<T> {
    x: Matrix<T>,
    bn1: BatchNormCache<T>,
    h1: Matrix<T>,
    a1: Matrix<T>,
    bn2: BatchNormCache<T>,
    sum: Matrix<T>,
}

impl ResBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: SparseConv::new(store, &format!("{name}.conv1"), channels, channels, false)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), channels)?,
            conv2: SparseConv::new(store, &format!("{name}.conv2"), channels, channels, false)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), channels)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.bn1.param_count() + self.conv2.param_count() + self.bn2.param_count()
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        nbrs: &NeighborMap,
        x: &Matrix<T>,
    ) -> Result<(Matrix<T>, ResBlockCache<T>)> {
        let c1 = self.conv1.forward(ctx, nbrs, x)?;
        let (h1, bn1) = self.bn1.forward(ctx, &c1)?;
        let a1 = gelu(&h1);
        let c2 = self.conv2.forward(ctx, nbrs, &a1)?;
        let (h2, bn2) = self.bn2.forward(ctx, &c2)?;
        let sum = x.add(&h2)?;
        let out = gelu(&sum);
        Ok((out, ResBlockCache { x: x.clone(), bn1, h1, a1, bn2, sum }))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        nbrs: &NeighborMap,
        cache: &ResBlockCache<T>,
        dout: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        let dsum = gelu_backward(&cache.sum, dout)?;
        let dc2 = self.bn2.backward(store, grads, &cache.bn2, &dsum)?;
        let da1 = self.conv2.backward(store, grads, nbrs, &cache.a1, &dc2)?;
        let dh1 = gelu_backward(&cache.h1, &da1)?;
        let dc1 = self.bn1.backward(store, grads, &cache.bn1, &dh1)?;
        let mut dx = self.conv1.backward(store, grads, nbrs, &cache.x, &dc1)?;
        dx.add_assign(&dsum)?;
        Ok(dx)
    }
}
