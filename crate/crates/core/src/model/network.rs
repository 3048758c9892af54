use super::block::{Block, BlockCache};
use super::config::{ModelConfig, StageSpec};
use super::sample::Sample;
use crate::conv::{ResBlock, ResBlockCache, SparseConv};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{max_pool_backward, max_pool_with, unpool, unpool_backward};
use crate::nn::functional::{gelu, gelu_backward, Mode};
use crate::nn::{init_params, BatchNorm, BatchNormCache, Ctx, Grads, InitScheme, Linear, Mlp, MlpCache, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Sparse convolution `C_in → C` followed by a residual conv block.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub conv: SparseConv,
    pub res: ResBlock,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub spec: StageSpec,
    /// Channel-raising linear applied before max pooling; absent at stage 1.
    pub down: Option<Linear>,
    pub blocks: Vec<Block>,
}

/// One decoder level: `y = unpool(up(y')) + skip(f)`, then
/// `y += GELU(BN(refine(y)))`.
#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub up: Linear,
    pub skip: Linear,
    pub refine: Linear,
    pub refine_bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    pub embed: Embedding,
    pub stages: Vec<Stage>,
    /// `decoder[s]` produces stage-`s` features from stage `s + 1`.
    pub decoder: Vec<DecoderLevel>,
    pub head: Mlp,
}

/// Per-stage encoder features, finest first. Grids and pool maps live in
/// the [`Sample`] the features were computed on.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T> {
    pub features: Vec<Matrix<T>>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    embed_res: ResBlockCache<T>,
    argmax: Vec<Option<Vec<usize>>>,
    blocks: Vec<Vec<BlockCache<T>>>,
}

#[derive(Clone, Debug)]
struct LevelCache<T> {
    coarse: Matrix<T>,
    z: Matrix<T>,
    pre_gelu: Matrix<T>,
    bn: BatchNormCache<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    levels: Vec<Option<LevelCache<T>>>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub encoder_output: EncoderOutput<T>,
    encoder: EncoderCache<T>,
    decoder: DecoderCache<T>,
    head: MlpCache<T>,
}

impl Network {
    /// Registers every parameter block in `store`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let specs = cfg.stages();
        let c0 = specs[0].channels;
        let embed = Embedding {
            conv: SparseConv::new(store, "embed.conv", cfg.in_channels, c0, true)?,
            res: ResBlock::new(store, "embed.res", c0)?,
        };
        let mut stages = Vec::with_capacity(specs.len());
        for (s, spec) in specs.iter().enumerate() {
            let down = (s > 0)
                .then(|| Linear::new(store, &format!("stage{}.down", s + 1), specs[s - 1].channels, spec.channels, true))
                .transpose()?;
            let blocks = (0..spec.depth)
                .map(|b| Block::new(store, &format!("stage{}.block{}", s + 1, b + 1), cfg, spec, b))
                .collect::<Result<_>>()?;
            stages.push(Stage { spec: *spec, down, blocks });
        }
        let decoder = (0..specs.len() - 1)
            .map(|s| {
                let (c, c_deep) = (specs[s].channels, specs[s + 1].channels);
                let name = format!("decoder{}", s + 1);
                Ok(DecoderLevel {
                    up: Linear::new(store, &format!("{name}.up"), c_deep, c, false)?,
                    skip: Linear::new(store, &format!("{name}.skip"), c, c, true)?,
                    refine: Linear::new(store, &format!("{name}.refine"), c, c, false)?,
                    refine_bn: BatchNorm::new(store, &format!("{name}.refine_bn"), c)?,
                })
            })
            .collect::<Result<_>>()?;
        let head = Mlp::new(store, "head", c0, c0, cfg.num_classes)?;
        Ok(Self { cfg: cfg.clone(), embed, stages, decoder, head })
    }

    /// Fresh store with every block registered and initialized from `seed`.
    pub fn build<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new(seed);
        let net = Self::new(&mut store, cfg)?;
        init_params(&mut store, &InitScheme { seed, ..InitScheme::default() });
        Ok((net, store))
    }

    pub fn param_count(&self) -> usize {
        let embed = self.embed.conv.param_count() + self.embed.res.param_count();
        let stages: usize = self
            .stages
            .iter()
            .map(|s| s.down.map_or(0, |d| d.param_count()) + s.blocks.iter().map(Block::param_count).sum::<usize>())
            .sum();
        let decoder: usize = self
            .decoder
            .iter()
            .map(|l| l.up.param_count() + l.skip.param_count() + l.refine.param_count() + l.refine_bn.param_count())
            .sum();
        embed + stages + decoder + self.head.param_count()
    }

    fn check_sample<T: Scalar>(&self, sample: &Sample<T>, mode: Mode) -> Result<()> {
        if sample.stages.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "sample prepared for {} stages, network has {}",
                sample.stages.len(),
                self.stages.len()
            )));
        }
        if sample.features.cols() != self.cfg.in_channels {
            return Err(shape_err!("{} input channels, expected {}", sample.features.cols(), self.cfg.in_channels));
        }
        if mode == Mode::Train {
            if let Some((s, g)) = sample.stages.iter().enumerate().find(|(_, g)| g.grid.len() < 2) {
                return Err(Error::Scale { stage: s + 1, voxels: g.grid.len() });
            }
        }
        Ok(())
    }

    pub fn encoder_forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        sample: &Sample<T>,
    ) -> Result<(EncoderOutput<T>, EncoderCache<T>)> {
        self.check_sample(sample, ctx.mode)?;
        let geo0 = &sample.stages[0];
        let embed_conv = self.embed.conv.forward(ctx, &geo0.neighbors, &sample.features)?;
        let (mut x, embed_res) = self.embed.res.forward(ctx, &geo0.neighbors, &embed_conv)?;

        let mut features = Vec::with_capacity(self.stages.len());
        let mut argmax = Vec::with_capacity(self.stages.len());
        let mut block_caches = Vec::with_capacity(self.stages.len());
        for (stage, geo) in self.stages.iter().zip(&sample.stages) {
            let mut am = None;
            if let (Some(down), Some(map)) = (&stage.down, &geo.pool_from_prev) {
                let h = down.forward(ctx, &x)?;
                let (pooled, a) = max_pool_with(map, &h)?;
                x = pooled;
                am = Some(a);
            }
            let mut caches = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (y, c) = block.forward(ctx, geo, &x)?;
                x = y;
                caches.push(c);
            }
            features.push(x.clone());
            argmax.push(am);
            block_caches.push(caches);
        }
        Ok((
            EncoderOutput { features },
            EncoderCache { embed_res, argmax, blocks: block_caches },
        ))
    }

    /// `dfeatures[s]` is the loss gradient at stage-`s` output features.
    /// Returns the gradient at the input voxel features.
    pub fn encoder_backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        sample: &Sample<T>,
        enc: &EncoderOutput<T>,
        cache: &EncoderCache<T>,
        mut dfeatures: Vec<Matrix<T>>,
    ) -> Result<Matrix<T>> {
        if dfeatures.len() != self.stages.len() {
            return Err(shape_err!("{} stage gradients for {} stages", dfeatures.len(), self.stages.len()));
        }
        let mut d = dfeatures.pop().expect("at least one stage");
        for s in (0..self.stages.len()).rev() {
            let stage = &self.stages[s];
            let geo = &sample.stages[s];
            for (b, block) in stage.blocks.iter().enumerate().rev() {
                d = block.backward(store, grads, geo, &cache.blocks[s][b], &d)?;
            }
            if let (Some(down), Some(map), Some(am)) = (&stage.down, &geo.pool_from_prev, &cache.argmax[s]) {
                let dh = max_pool_backward(am, map, &d)?;
                d = down.backward(store, grads, &enc.features[s - 1], &dh)?;
                d.add_assign(&dfeatures.pop().expect("one gradient per stage"))?;
            }
        }
        let geo0 = &sample.stages[0];
        let dc = self.embed.res.backward(store, grads, &geo0.neighbors, &cache.embed_res, &d)?;
        self.embed.conv.backward(store, grads, &geo0.neighbors, &sample.features, &dc)
    }

    pub fn decoder_forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        sample: &Sample<T>,
        enc: &EncoderOutput<T>,
    ) -> Result<(Matrix<T>, DecoderCache<T>)> {
        let n = self.stages.len();
        if enc.features.len() != n {
            return Err(shape_err!("{} encoder stages for a {n}-stage decoder", enc.features.len()));
        }
        let mut y = enc.features[n - 1].clone();
        let mut levels: Vec<Option<LevelCache<T>>> = vec![None; self.decoder.len()];
        for s in (0..self.decoder.len()).rev() {
            let level = &self.decoder[s];
            let map = sample.stages[s + 1]
                .pool_from_prev
                .as_ref()
                .ok_or_else(|| shape_err!("stage {} has no pool map", s + 2))?;
            let up = level.up.forward(ctx, &y)?;
            let mut z = unpool(&up, map)?;
            z.add_assign(&level.skip.forward(ctx, &enc.features[s])?)?;
            let r = level.refine.forward(ctx, &z)?;
            let (pre_gelu, bn) = level.refine_bn.forward(ctx, &r)?;
            let coarse = std::mem::replace(&mut y, z.add(&gelu(&pre_gelu))?);
            levels[s] = Some(LevelCache { coarse, z, pre_gelu, bn });
        }
        Ok((y, DecoderCache { levels }))
    }

    /// Returns the gradient at every encoder stage output.
    pub fn decoder_backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        sample: &Sample<T>,
        enc: &EncoderOutput<T>,
        cache: &DecoderCache<T>,
        dout: &Matrix<T>,
    ) -> Result<Vec<Matrix<T>>> {
        let mut dfeatures = Vec::with_capacity(self.stages.len());
        let mut dy = dout.clone();
        for (s, level) in self.decoder.iter().enumerate() {
            let lc = cache.levels[s].as_ref().ok_or_else(|| shape_err!("decoder level {} not run", s + 1))?;
            let map = sample.stages[s + 1].pool_from_prev.as_ref().expect("checked in forward");
            let dg = gelu_backward(&lc.pre_gelu, &dy)?;
            let dr = level.refine_bn.backward(store, grads, &lc.bn, &dg)?;
            let mut dz = level.refine.backward(store, grads, &lc.z, &dr)?;
            dz.add_assign(&dy)?;
            dfeatures.push(level.skip.backward(store, grads, &enc.features[s], &dz)?);
            let dup = unpool_backward(&dz, map)?;
            dy = level.up.backward(store, grads, &lc.coarse, &dup)?;
        }
        dfeatures.push(dy);
        Ok(dfeatures)
    }

    /// Per-voxel class logits on the finest grid.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, sample: &Sample<T>) -> Result<(Matrix<T>, ForwardCache<T>)> {
        let (encoder_output, encoder) = self.encoder_forward(ctx, sample)?;
        let (decoded, decoder) = self.decoder_forward(ctx, sample, &encoder_output)?;
        let (logits, head) = self.head.forward(ctx, &decoded)?;
        Ok((logits, ForwardCache { encoder_output, encoder, decoder, head }))
    }

    /// Returns the gradient at the input voxel features.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        sample: &Sample<T>,
        cache: &ForwardCache<T>,
        dlogits: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        let ddec = self.head.backward(store, grads, &cache.head, dlogits)?;
        let dfeat = self.decoder_backward(store, grads, sample, &cache.encoder_output, &cache.decoder, &ddec)?;
        self.encoder_backward(store, grads, sample, &cache.encoder_output, &cache.encoder, dfeat)
    }

    /// Per-point logits: every point takes the logits of its voxel.
    pub fn segment<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, sample: &Sample<T>) -> Result<Matrix<T>> {
        let (logits, _) = self.forward(ctx, sample)?;
        Ok(logits.select_rows(&sample.point_to_voxel))
    }
}

/// Sums per-point gradients into their voxels.
pub fn points_to_voxels_backward<T: Scalar>(dpoints: &Matrix<T>, point_to_voxel: &[usize], voxels: usize) -> Result<Matrix<T>> {
    if dpoints.rows() != point_to_voxel.len() {
        return Err(shape_err!("{} point gradients for {} points", dpoints.rows(), point_to_voxel.len()));
    }
    let mut d = Matrix::zeros(voxels, dpoints.cols());
    for (p, &v) in point_to_voxel.iter().enumerate() {
        for (a, &g) in d.row_mut(v).iter_mut().zip(dpoints.row(p)) {
            *a += g;
        }
    }
    Ok(d)
}
