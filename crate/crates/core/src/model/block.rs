use super::config::{ModelConfig, StageSpec};
use super::op::{AttentionOp, AttentionOpCache};
use super::sample::StageGeometry;
use crate::error::Result;
use crate::nn::functional::NormCache;
use crate::nn::{Ctx, Grads, LayerNorm, Mlp, MlpCache, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Pre-norm residual block: `x + Op(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub op: AttentionOp,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    /// Uses the half-window-shifted partition.
    pub shifted: bool,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    n1: NormCache<T>,
    h1: Matrix<T>,
    op: AttentionOpCache<T>,
    n2: NormCache<T>,
    mlp: MlpCache<T>,
}

impl Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        st: &StageSpec,
        index: usize,
    ) -> Result<Self> {
        let c = st.channels;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c)?,
            op: AttentionOp::new(store, &format!("{name}.op"), cfg, st)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), c, c * cfg.mlp_ratio, c)?,
            shifted: cfg.shift_enabled && index % 2 == 1,
        })
    }

    pub fn param_count(&self) -> usize {
        self.norm1.param_count() + self.op.param_count() + self.norm2.param_count() + self.mlp.param_count()
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        geo: &StageGeometry,
        x: &Matrix<T>,
    ) -> Result<(Matrix<T>, BlockCache<T>)> {
        let (h1, n1) = self.norm1.forward(ctx, x)?;
        let (a, op) = self.op.forward(ctx, geo, self.shifted, &h1)?;
        let y = x.add(&a)?;
        let (h2, n2) = self.norm2.forward(ctx, &y)?;
        let (m, mlp) = self.mlp.forward(ctx, &h2)?;
        Ok((y.add(&m)?, BlockCache { n1, h1, op, n2, mlp }))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        geo: &StageGeometry,
        cache: &BlockCache<T>,
        dout: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        let dh2 = self.mlp.backward(store, grads, &cache.mlp, dout)?;
        let mut dy = self.norm2.backward(store, grads, &cache.n2, &dh2)?;
        dy.add_assign(dout)?;
        let dh1 = self.op.backward(store, grads, geo, self.shifted, &cache.h1, &cache.op, &dy)?;
        let mut dx = self.norm1.backward(store, grads, &cache.n1, &dh1)?;
        dx.add_assign(&dy)?;
        Ok(dx)
    }
}
