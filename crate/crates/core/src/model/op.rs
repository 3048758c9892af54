use super::config::{ModelConfig, StageSpec, Variant};
use super::sample::{StageGeometry, WindowSet};
use crate::attention::{CubicAttention, CubicAttentionCache, DisassembledAttention, DisassembledCache};
use crate::conv::{Lse, LseCache};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Grads, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub enum Mixer {
    Cubic(CubicAttention),
    Planes {
        attn: DisassembledAttention,
        pre_lse: Option<Lse>,
        post_lse: Option<Lse>,
        proj: Linear,
    },
}

/// The attention operator of one block.
///
/// ConDaFormer: `Linear(LSE(merge(planes(LSE(x)))))`. DaFormer drops both
/// LSE modules. Cubic runs a single cubic-window attention with its own
/// output projection.
#[derive(Clone, Debug)]
pub struct AttentionOp {
    pub mixer: Mixer,
    pub variant: Variant,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub enum AttentionOpCache<T> {
    Cubic(CubicAttentionCache<T>),
    Planes {
        pre: Option<LseCache<T>>,
        attn_in: Matrix<T>,
        attn: DisassembledCache<T>,
        post: Option<LseCache<T>>,
        proj_in: Matrix<T>,
    },
}

impl AttentionOp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, st: &StageSpec) -> Result<Self> {
        let c = st.channels;
        let mixer = match cfg.variant {
            Variant::Cubic => Mixer::Cubic(CubicAttention::new(store, &format!("{name}.attn"), c, st.heads, st.window_voxels)?),
            Variant::DaFormer | Variant::ConDaFormer => {
                let lse = cfg.variant == Variant::ConDaFormer;
                let pre_lse = lse.then(|| Lse::new(store, &format!("{name}.pre_lse"), c)).transpose()?;
                let attn = DisassembledAttention::new(
                    store,
                    &format!("{name}.attn"),
                    c,
                    st.heads,
                    st.window_voxels,
                    cfg.merge,
                    cfg.rpe_share,
                    false,
                )?;
                let post_lse = lse.then(|| Lse::new(store, &format!("{name}.post_lse"), c)).transpose()?;
                let proj = Linear::new(store, &format!("{name}.proj"), c, c, true)?;
                Mixer::Planes { attn, pre_lse, post_lse, proj }
            }
        };
        Ok(Self { mixer, variant: cfg.variant, channels: c })
    }

    /// The last linear layer of the operator.
    pub fn output_projection(&self) -> Linear {
        match &self.mixer {
            Mixer::Cubic(a) => a.proj,
            Mixer::Planes { proj, .. } => *proj,
        }
    }

    pub fn lse_param_count(&self) -> usize {
        match &self.mixer {
            Mixer::Cubic(_) => 0,
            Mixer::Planes { pre_lse, post_lse, .. } => {
                pre_lse.as_ref().map_or(0, Lse::param_count) + post_lse.as_ref().map_or(0, Lse::param_count)
            }
        }
    }

    pub fn rpe_param_count(&self) -> usize {
        match &self.mixer {
            Mixer::Cubic(a) => a.rpe.param_count(),
            Mixer::Planes { attn, .. } => attn.rpe_param_count(),
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.mixer {
            Mixer::Cubic(a) => a.param_count(),
            Mixer::Planes { attn, proj, .. } => attn.param_count() + proj.param_count() + self.lse_param_count(),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        geo: &StageGeometry,
        shifted: bool,
        x: &Matrix<T>,
    ) -> Result<(Matrix<T>, AttentionOpCache<T>)> {
        let coords = geo.grid.coords();
        match (&self.mixer, geo.windows_for(shifted)) {
            (Mixer::Cubic(a), WindowSet::Cubic(wm)) => {
                let (out, c) = a.forward(ctx, x, coords, wm)?;
                Ok((out, AttentionOpCache::Cubic(c)))
            }
            (Mixer::Planes { attn, pre_lse, post_lse, proj }, WindowSet::Planes(maps)) => {
                let (attn_in, pre) = match pre_lse {
                    Some(l) => {
                        let (y, c) = l.forward(ctx, &geo.neighbors, x)?;
                        (y, Some(c))
                    }
                    None => (x.clone(), None),
                };
                let (merged, attn_cache) = attn.forward(ctx, &attn_in, coords, [&maps[0], &maps[1], &maps[2]])?;
                let (proj_in, post) = match post_lse {
                    Some(l) => {
                        let (y, c) = l.forward(ctx, &geo.neighbors, &merged)?;
                        (y, Some(c))
                    }
                    None => (merged, None),
                };
                let out = proj.forward(ctx, &proj_in)?;
                Ok((out, AttentionOpCache::Planes { pre, attn_in, attn: attn_cache, post, proj_in }))
            }
            _ => Err(Error::Config(format!("{:?} operator given mismatched window maps", self.variant))),
        }
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        geo: &StageGeometry,
        shifted: bool,
        x: &Matrix<T>,
        cache: &AttentionOpCache<T>,
        dout: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        let coords = geo.grid.coords();
        match (&self.mixer, geo.windows_for(shifted), cache) {
            (Mixer::Cubic(a), WindowSet::Cubic(wm), AttentionOpCache::Cubic(c)) => {
                a.backward(store, grads, x, coords, wm, c, dout)
            }
            (
                Mixer::Planes { attn, pre_lse, post_lse, proj },
                WindowSet::Planes(maps),
                AttentionOpCache::Planes { pre, attn_in, attn: attn_cache, post, proj_in },
            ) => {
                let mut d = proj.backward(store, grads, proj_in, dout)?;
                if let (Some(l), Some(c)) = (post_lse, post) {
                    d = l.backward(store, grads, &geo.neighbors, c, &d)?;
                }
                d = attn.backward(store, grads, attn_in, coords, [&maps[0], &maps[1], &maps[2]], attn_cache, &d)?;
                if let (Some(l), Some(c)) = (pre_lse, pre) {
                    d = l.backward(store, grads, &geo.neighbors, c, &d)?;
                }
                Ok(d)
            }
            _ => Err(Error::Config(format!("{:?} operator given mismatched window maps or cache", self.variant))),
        }
    }
}
