use super::kernels::DepthwiseConv;
use super::neighbors::NeighborMap;
use crate::error::{Error, Result};
use crate::nn::functional::{gelu, gelu_backward};
use crate::nn::{BatchNorm, BatchNormCache, Ctx, Grads, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Local structure enhancement:
/// `[BN(Linear(x)) ⊕ BN(Linear(GELU(BN(DConv(x)))))]`, each branch `C/2` wide.
#[derive(Clone, Copy, Debug)]
pub struct Lse {
    pub point_linear: Linear,
    pub point_bn: BatchNorm,
    pub dconv: DepthwiseConv,
    pub dconv_bn: BatchNorm,
    pub local_linear: Linear,
    pub local_bn: BatchNorm,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct LseCache<T> {
    x: Matrix<T>,
    point_bn: BatchNormCache<T>,
    dconv_bn: BatchNormCache<T>,
    pre_gelu: Matrix<T>,
    post_gelu: Matrix<T>,
    local_bn: BatchNormCache<T>,
}

impl Lse {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::Config(format!("LSE needs an even channel count, got {channels}")));
        }
        let half = channels / 2;
        Ok(Self {
            point_linear: Linear::new(store, &format!("{name}.point.linear"), channels, half, false)?,
            point_bn: BatchNorm::new(store, &format!("{name}.point.bn"), half)?,
            dconv: DepthwiseConv::new(store, &format!("{name}.local.dconv"), channels)?,
            dconv_bn: BatchNorm::new(store, &format!("{name}.local.dconv_bn"), channels)?,
            local_linear: Linear::new(store, &format!("{name}.local.linear"), channels, half, false)?,
            local_bn: BatchNorm::new(store, &format!("{name}.local.bn"), half)?,
            channels,
        })
    }

    pub fn param_count(&self) -> usize {
        self.point_linear.param_count()
            + self.point_bn.param_count()
            + self.dconv.param_count()
            + self.dconv_bn.param_count()
            + self.local_linear.param_count()
            + self.local_bn.param_count()
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        nbrs: &NeighborMap,
        x: &Matrix<T>,
    ) -> Result<(Matrix<T>, LseCache<T>)> {
        let a = self.point_linear.forward(ctx, x)?;
        let (a, point_bn) = self.point_bn.forward(ctx, &a)?;

        let d = self.dconv.forward(ctx, nbrs, x)?;
        let (pre_gelu, dconv_bn) = self.dconv_bn.forward(ctx, &d)?;
        let post_gelu = gelu(&pre_gelu);
        let b = self.local_linear.forward(ctx, &post_gelu)?;
        let (b, local_bn) = self.local_bn.forward(ctx, &b)?;

        let out = Matrix::hconcat(&[&a, &b])?;
        Ok((out, LseCache { x: x.clone(), point_bn, dconv_bn, pre_gelu, post_gelu, local_bn }))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        nbrs: &NeighborMap,
        cache: &LseCache<T>,
        dout: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        let half = self.channels / 2;
        let parts = dout.hsplit(&[half, half])?;

        let da = self.point_bn.backward(store, grads, &cache.point_bn, &parts[0])?;
        let mut dx = self.point_linear.backward(store, grads, &cache.x, &da)?;

        let db = self.local_bn.backward(store, grads, &cache.local_bn, &parts[1])?;
        let dg = self.local_linear.backward(store, grads, &cache.post_gelu, &db)?;
        let dpre = gelu_backward(&cache.pre_gelu, &dg)?;
        let dd = self.dconv_bn.backward(store, grads, &cache.dconv_bn, &dpre)?;
        dx.add_assign(&self.dconv.backward(store, grads, nbrs, &cache.x, &dd)?)?;
        Ok(dx)
    }
}
