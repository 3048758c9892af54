use serde::{Deserialize, Serialize};

use super::kernel::{window_attention, window_attention_backward, AttentionKernelCache};
use super::rpe::RpeTables;
use crate::error::{Error, Result};
use crate::geometry::{Coord, WindowMap, WindowMode};
use crate::nn::{Ctx, Grads, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// How the three plane results are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Merge {
    /// Each plane works on `C/3` channels with `H/3` heads; outputs are concatenated.
    Split,
    /// Each plane works on all `C` channels with `H` heads; outputs are summed.
    NoSplit,
}

/// Attention restricted to one window orientation: `C → width` projections
/// feeding the windowed kernel.
#[derive(Clone, Copy, Debug)]
pub struct PlaneAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub heads: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct PlaneAttentionCache<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    pub kernel: AttentionKernelCache<T>,
}

impl PlaneAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), channels, width, true)?,
            k: Linear::new(store, &format!("{name}.k"), channels, width, true)?,
            v: Linear::new(store, &format!("{name}.v"), channels, width, true)?,
            heads,
            width,
        })
    }

    pub fn param_count(&self) -> usize {
        self.q.param_count() + self.k.param_count() + self.v.param_count()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        ctx: &Ctx<'_, T>,
        x: &Matrix<T>,
        coords: &[Coord],
        wm: &WindowMap,
        rpe: &RpeTables,
        scale: T,
    ) -> Result<(Matrix<T>, PlaneAttentionCache<T>)> {
        let q = self.q.forward(ctx, x)?;
        let k = self.k.forward(ctx, x)?;
        let v = self.v.forward(ctx, x)?;
        let (out, kernel) = window_attention(&q, &k, &v, coords, wm, self.heads, scale, &rpe.view(ctx.store))?;
        Ok((out, PlaneAttentionCache { q, k, v, kernel }))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &Matrix<T>,
        coords: &[Coord],
        wm: &WindowMap,
        rpe: &RpeTables,
        scale: T,
        cache: &PlaneAttentionCache<T>,
        dout: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        let kg = window_attention_backward(
            &cache.q,
            &cache.k,
            &cache.v,
            coords,
            wm,
            self.heads,
            scale,
            &rpe.view(store),
            &cache.kernel,
            dout,
        )?;
        for a in 0..3 {
            grads.add(rpe.q[a], kg.table_q[a].clone())?;
            grads.add(rpe.k[a], kg.table_k[a].clone())?;
            grads.add(rpe.v[a], kg.table_v[a].clone())?;
        }
        let mut dx = self.q.backward(store, grads, x, &kg.dq)?;
        dx.add_assign(&self.k.backward(store, grads, x, &kg.dk)?)?;
        dx.add_assign(&self.v.backward(store, grads, x, &kg.dv)?)?;
        Ok(dx)
    }
}

/// Three plane attentions `(xy, yz, xz)` merged by concatenation or sum,
/// optionally followed by the output projection.
#[derive(Clone, Debug)]
pub struct DisassembledAttention {
    pub planes: [PlaneAttention; 3],
    /// One shared table set, or one per plane.
    pub rpe: Vec<RpeTables>,
    pub merge: Merge,
    pub proj: Option<Linear>,
    pub channels: usize,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct DisassembledCache<T> {
    planes: Vec<PlaneAttentionCache<T>>,
    merged: Matrix<T>,
}

impl DisassembledAttention {
    /// `channels` = C and `heads` = H of the whole operator.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        window_voxels: u32,
        merge: Merge,
        share_rpe: bool,
        with_proj: bool,
    ) -> Result<Self> {
        if channels % heads != 0 {
            return Err(Error::Config(format!("{channels} channels not divisible by {heads} heads")));
        }
        let (width, plane_heads) = match merge {
            Merge::Split => {
                if channels % 3 != 0 || heads % 3 != 0 || (channels / 3) % (heads / 3) != 0 {
                    return Err(Error::Config(format!(
                        "plane split needs C and H divisible by 3 (C = {channels}, H = {heads})"
                    )));
                }
                (channels / 3, heads / 3)
            }
            Merge::NoSplit => (channels, heads),
        };
        let rpe = if share_rpe {
            vec![RpeTables::new(store, &format!("{name}.rpe"), window_voxels, width)?]
        } else {
            WindowMode::PLANES
                .iter()
                .map(|m| RpeTables::new(store, &format!("{name}.rpe_{}", m.tag()), window_voxels, width))
                .collect::<Result<_>>()?
        };
        let mut plane = |m: WindowMode| PlaneAttention::new(store, &format!("{name}.{}", m.tag()), channels, width, plane_heads);
        let planes = [plane(WindowMode::PLANES[0])?, plane(WindowMode::PLANES[1])?, plane(WindowMode::PLANES[2])?];
        let proj = with_proj.then(|| Linear::new(store, &format!("{name}.proj"), channels, channels, true)).transpose()?;
        Ok(Self { planes, rpe, merge, proj, channels, heads })
    }

    /// `√(C/H)`.
    pub fn scale<T: Scalar>(&self) -> T {
        T::from_usize_lossy(self.channels / self.heads).sqrt()
    }

    pub fn rpe_for(&self, plane: usize) -> &RpeTables {
        &self.rpe[if self.rpe.len() == 1 { 0 } else { plane }]
    }

    pub fn rpe_param_count(&self) -> usize {
        self.rpe.iter().map(RpeTables::param_count).sum()
    }

    pub fn param_count(&self) -> usize {
        self.planes.iter().map(PlaneAttention::param_count).sum::<usize>()
            + self.rpe_param_count()
            + self.proj.map_or(0, |p| p.param_count())
    }

    fn check_maps(maps: [&WindowMap; 3]) -> Result<()> {
        for (m, want) in maps.iter().zip(WindowMode::PLANES) {
            if m.spec().mode != want {
                return Err(Error::Config(format!("plane map {:?} where {want:?} is expected", m.spec().mode)));
            }
        }
        Ok(())
    }

    /// `maps` in merge order `(xy, yz, xz)`.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &Ctx<'_, T>,
        x: &Matrix<T>,
        coords: &[Coord],
        maps: [&WindowMap; 3],
    ) -> Result<(Matrix<T>, DisassembledCache<T>)> {
        Self::check_maps(maps)?;
        if x.cols() != self.channels {
            return Err(Error::Shape(format!("attention over {} channels got {}", self.channels, x.cols())));
        }
        let scale = self.scale::<T>();
        let mut outs = Vec::with_capacity(3);
        let mut caches = Vec::with_capacity(3);
        for (p, (plane, wm)) in self.planes.iter().zip(maps).enumerate() {
            let (o, c) = plane.forward(ctx, x, coords, wm, self.rpe_for(p), scale)?;
            outs.push(o);
            caches.push(c);
        }
        let merged = match self.merge {
            Merge::Split => Matrix::hconcat(&[&outs[0], &outs[1], &outs[2]])?,
            Merge::NoSplit => outs[0].add(&outs[1])?.add(&outs[2])?,
        };
        let out = match &self.proj {
            Some(p) => p.forward(ctx, &merged)?,
            None => merged.clone(),
        };
        Ok((out, DisassembledCache { planes: caches, merged }))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &Matrix<T>,
        coords: &[Coord],
        maps: [&WindowMap; 3],
        cache: &DisassembledCache<T>,
        dout: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        let dmerged = match &self.proj {
            Some(p) => p.backward(store, grads, &cache.merged, dout)?,
            None => dout.clone(),
        };
        let dplanes = match self.merge {
            Merge::Split => {
                let w = self.planes[0].width;
                dmerged.hsplit(&[w, w, w])?
            }
            Merge::NoSplit => vec![dmerged.clone(), dmerged.clone(), dmerged],
        };
        let scale = self.scale::<T>();
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        for (p, plane) in self.planes.iter().enumerate() {
            let d = plane.backward(
                store,
                grads,
                x,
                coords,
                maps[p],
                self.rpe_for(p),
                scale,
                &cache.planes[p],
                &dplanes[p],
            )?;
            dx.add_assign(&d)?;
        }
        Ok(dx)
    }
}

/// Cubic-window attention: `C → C` projections, `H` heads, output projection.
#[derive(Clone, Debug)]
pub struct CubicAttention {
    pub attn: PlaneAttention,
    pub rpe: RpeTables,
    pub proj: Linear,
    pub channels: usize,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct CubicAttentionCache<T> {
    attn: PlaneAttentionCache<T>,
    merged: Matrix<T>,
}

impl CubicAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        window_voxels: u32,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!("{channels} channels not divisible by {heads} heads")));
        }
        Ok(Self {
            attn: PlaneAttention::new(store, &format!("{name}.cubic"), channels, channels, heads)?,
            rpe: RpeTables::new(store, &format!("{name}.rpe"), window_voxels, channels)?,
            proj: Linear::new(store, &format!("{name}.proj"), channels, channels, true)?,
            channels,
            heads,
        })
    }

    pub fn scale<T: Scalar>(&self) -> T {
        T::from_usize_lossy(self.channels / self.heads).sqrt()
    }

    pub fn param_count(&self) -> usize {
        self.attn.param_count() + self.rpe.param_count() + self.proj.param_count()
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &Ctx<'_, T>,
        x: &Matrix<T>,
        coords: &[Coord],
        wm: &WindowMap,
    ) -> Result<(Matrix<T>, CubicAttentionCache<T>)> {
        if wm.spec().mode != WindowMode::Cubic {
            return Err(Error::Config(format!("cubic attention given a {:?} window map", wm.spec().mode)));
        }
        let (merged, attn) = self.attn.forward(ctx, x, coords, wm, &self.rpe, self.scale())?;
        let out = self.proj.forward(ctx, &merged)?;
        Ok((out, CubicAttentionCache { attn, merged }))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &Matrix<T>,
        coords: &[Coord],
        wm: &WindowMap,
        cache: &CubicAttentionCache<T>,
        dout: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        let dm = self.proj.backward(store, grads, &cache.merged, dout)?;
        self.attn.backward(store, grads, x, coords, wm, &self.rpe, self.scale(), &cache.attn, &dm)
    }
}
