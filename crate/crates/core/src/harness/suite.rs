//! The gradient-check suite: one case per learnable operation plus
//! end-to-end cases whose coverage is checked against the parameter registry.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::gradcheck::{
    check_input_grad, check_param_grads, probe_loss, probe_matrix, randomize_for_check, GradCheckOptions,
    GradCheckReport,
};
use crate::attention::{DisassembledAttention, Merge, PlaneAttention, RpeTables};
use crate::conv::{DepthwiseConv, Lse, NeighborMap, ResBlock, SparseConv};
use crate::error::Result;
use crate::geometry::{assign_windows, max_pool_backward, max_pool_with, pool_grid, Coord, PointCloud, SparseGrid, WindowMode, WindowSpec};
use crate::model::{AttentionOp, Block, ModelConfig, Network, Sample, Variant};
use crate::nn::functional::{cross_entropy, Mode};
use crate::nn::{BatchNorm, Ctx, Grads, LayerNorm, Linear, Mlp, ParamStore};
use crate::tensor::Matrix;

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for whole-model cases.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Probed coordinates per block for single operations.
    pub op_coords: usize,
    /// Probed coordinates per block for whole-model cases.
    pub model_coords: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { seed: 7, op_coords: 24, model_coords: 6 }
    }
}

type Store = ParamStore<f64>;

/// `m` distinct voxels in `[0, extent)³`, rows in `(z, y, x)` order.
pub fn random_grid(m: usize, extent: i32, seed: u64) -> SparseGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<Coord> = (0..extent)
        .flat_map(|z| (0..extent).flat_map(move |y| (0..extent).map(move |x| [x, y, z])))
        .collect();
    all.shuffle(&mut rng);
    let mut coords: Vec<Coord> = all.into_iter().take(m).collect();
    coords.sort_unstable_by_key(|c| (c[2], c[1], c[0]));
    SparseGrid::new(coords, 1.0, [0.0; 3]).expect("distinct coords")
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    probe_matrix(rows, cols, seed)
}

/// Small configuration with every divisibility rule satisfied and voxel
/// size 1 so integer coordinates land exactly on voxels.
pub fn gradcheck_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        base_channels: 12,
        depths: vec![2, 1],
        head_dim: 4,
        num_classes: 4,
        voxel_size: 1.0,
        window_size: 3.0,
        mlp_ratio: 2,
        variant,
        ..ModelConfig::default()
    }
}

struct Case<'a> {
    name: &'a str,
    tolerance: f64,
    opts: GradCheckOptions,
    /// Blocks the loss is exactly invariant to.
    invariant: Vec<String>,
}

fn invariant_blocks(store: &Store, grads: &Grads<f64>, names: &[String]) -> Vec<(String, f64)> {
    names
        .iter()
        .map(|n| {
            let id = store.id(n).unwrap_or_else(|| panic!("no block `{n}`"));
            let g = grads.get(id).map_or(0.0, |g| g.as_slice().iter().fold(0.0_f64, |m, v| m.max(v.abs())));
            (n.clone(), g)
        })
        .collect()
}

/// Query-side position table along the slab axis of a thickness-1 plane
/// window. Every pair in such a window has offset 0 along that axis, so the
/// table adds one constant to a whole row of logits and softmax cancels it.
fn slab_query_table(prefix: &str, mode: WindowMode) -> Option<String> {
    let axis = ["x", "y", "z"][mode.slab_axis()?];
    Some(format!("{prefix}.q_{axis}"))
}

impl Case<'_> {
    /// Randomizes `store`, probes the output with a fixed random matrix and
    /// checks every trainable block passing `filter` plus the input.
    fn run<C>(
        &self,
        mut store: Store,
        x: Matrix<f64>,
        filter: impl Fn(&str) -> bool,
        fwd: impl Fn(&Store, &Matrix<f64>) -> Result<(Matrix<f64>, C)>,
        bwd: impl Fn(&Store, &mut Grads<f64>, &Matrix<f64>, &C, &Matrix<f64>) -> Result<Matrix<f64>>,
    ) -> Result<GradCheckReport> {
        randomize_for_check(&mut store, self.opts.seed);
        let (out, cache) = fwd(&store, &x)?;
        let r = probe_matrix(out.rows(), out.cols(), self.opts.seed.wrapping_add(1));
        let mut grads = Grads::for_store(&store);
        let dx = bwd(&store, &mut grads, &x, &cache, &r)?;
        let invariant = invariant_blocks(&store, &grads, &self.invariant);
        let probed = |n: &str| filter(n) && !self.invariant.iter().any(|i| i == n);
        let mut blocks =
            check_param_grads(&mut store, &grads, probed, |s| probe_loss(&fwd(s, &x)?.0, &r), &self.opts)?;
        blocks.push(check_input_grad("input", &x, &dx, |xx| probe_loss(&fwd(&store, xx)?.0, &r), &self.opts)?);
        Ok(GradCheckReport {
            case: self.name.to_string(),
            tolerance: self.tolerance,
            blocks,
            uncovered: Vec::new(),
            invariant,
        })
    }
}

fn all(_: &str) -> bool {
    true
}

/// Runs every case and returns one report per case.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<GradCheckReport>> {
    let seed = opts.seed;
    let op = |name: &'static str, salt: u64| Case {
        name,
        tolerance: OP_TOLERANCE,
        opts: GradCheckOptions { max_coords: Some(opts.op_coords), seed: seed ^ salt, ..Default::default() },
        invariant: Vec::new(),
    };
    let mut reports = Vec::new();

    // dense layers
    {
        let mut s = Store::new(0);
        let l = Linear::new(&mut s, "linear", 5, 4, true)?;
        reports.push(op("linear", 1).run(
            s,
            random_matrix(7, 5, seed),
            all,
            |s, x| Ok((l.forward(&Ctx::new(s, Mode::Train), x)?, ())),
            |s, g, x, _, d| l.backward(s, g, x, d),
        )?);
    }
    {
        let mut s = Store::new(0);
        let l = LayerNorm::new(&mut s, "layer_norm", 6)?;
        reports.push(op("layer_norm", 2).run(
            s,
            random_matrix(5, 6, seed + 1),
            all,
            |s, x| l.forward(&Ctx::new(s, Mode::Train), x),
            |s, g, _, c, d| l.backward(s, g, c, d),
        )?);
    }
    {
        let mut s = Store::new(0);
        let l = BatchNorm::new(&mut s, "batch_norm", 4)?;
        reports.push(op("batch_norm", 3).run(
            s,
            random_matrix(9, 4, seed + 2),
            all,
            |s, x| l.forward(&mut Ctx::new(s, Mode::Train), x),
            |s, g, _, c, d| l.backward(s, g, c, d),
        )?);
    }
    {
        let mut s = Store::new(0);
        let l = Mlp::new(&mut s, "mlp", 5, 8, 3)?;
        reports.push(op("mlp", 4).run(
            s,
            random_matrix(6, 5, seed + 3),
            all,
            |s, x| l.forward(&Ctx::new(s, Mode::Train), x),
            |s, g, _, c, d| l.backward(s, g, c, d),
        )?);
    }

    // sparse convolutions
    let grid = random_grid(24, 4, seed + 10);
    let nbrs = NeighborMap::new(&grid);
    let m = grid.len();
    {
        let mut s = Store::new(0);
        let l = SparseConv::new(&mut s, "sparse_conv", 3, 4, true)?;
        reports.push(op("sparse_conv", 5).run(
            s,
            random_matrix(m, 3, seed + 4),
            all,
            |s, x| Ok((l.forward(&Ctx::new(s, Mode::Train), &nbrs, x)?, ())),
            |s, g, x, _, d| l.backward(s, g, &nbrs, x, d),
        )?);
    }
    {
        let mut s = Store::new(0);
        let l = DepthwiseConv::new(&mut s, "depthwise_conv", 4)?;
        reports.push(op("depthwise_conv", 6).run(
            s,
            random_matrix(m, 4, seed + 5),
            all,
            |s, x| Ok((l.forward(&Ctx::new(s, Mode::Train), &nbrs, x)?, ())),
            |s, g, x, _, d| l.backward(s, g, &nbrs, x, d),
        )?);
    }
    {
        let mut s = Store::new(0);
        let l = ResBlock::new(&mut s, "res_block", 4)?;
        reports.push(op("res_block", 7).run(
            s,
            random_matrix(m, 4, seed + 6),
            all,
            |s, x| l.forward(&mut Ctx::new(s, Mode::Train), &nbrs, x),
            |s, g, _, c, d| l.backward(s, g, &nbrs, c, d),
        )?);
    }
    {
        let mut s = Store::new(0);
        let l = Lse::new(&mut s, "lse", 6)?;
        reports.push(op("lse", 8).run(
            s,
            random_matrix(m, 6, seed + 7),
            all,
            |s, x| l.forward(&mut Ctx::new(s, Mode::Train), &nbrs, x),
            |s, g, _, c, d| l.backward(s, g, &nbrs, c, d),
        )?);
    }

    // windowed attention with contextual position tables, one case per window shape
    let agrid = random_grid(30, 5, seed + 20);
    let am = agrid.len();
    for (mode, name, salt) in [
        (WindowMode::PlaneXY, "attention_xy", 9u64),
        (WindowMode::PlaneYZ, "attention_yz", 10),
        (WindowMode::PlaneXZ, "attention_xz", 11),
        (WindowMode::Cubic, "attention_cubic", 12),
    ] {
        let wm = assign_windows(&agrid, WindowSpec::new(mode, 3, 1, false)?);
        let mut s = Store::new(0);
        let a = PlaneAttention::new(&mut s, "attn", 6, 6, 2)?;
        let rpe = RpeTables::new(&mut s, "rpe", 3, 6)?;
        let scale = 3f64.sqrt();
        let coords = agrid.coords();
        let case = Case { invariant: slab_query_table("rpe", mode).into_iter().collect(), ..op(name, salt) };
        reports.push(case.run(
            s,
            random_matrix(am, 6, seed + salt),
            all,
            |s, x| a.forward(&Ctx::new(s, Mode::Train), x, coords, &wm, &rpe, scale),
            |s, g, x, c, d| a.backward(s, g, x, coords, &wm, &rpe, scale, c, d),
        )?);
    }
    let plane_maps: Vec<_> = WindowMode::PLANES
        .iter()
        .map(|&m| Ok(assign_windows(&agrid, WindowSpec::new(m, 3, 1, false)?)))
        .collect::<Result<_>>()?;
    let maps = [&plane_maps[0], &plane_maps[1], &plane_maps[2]];
    for (merge, share, name, salt) in [
        (Merge::Split, true, "disassembled_split_shared", 13u64),
        (Merge::Split, false, "disassembled_split_separate", 14),
        (Merge::NoSplit, true, "disassembled_nosplit_shared", 15),
    ] {
        let mut s = Store::new(0);
        let a = DisassembledAttention::new(&mut s, "attn", 6, 3, 3, merge, share, true)?;
        let coords = agrid.coords();
        let invariant = if share {
            Vec::new()
        } else {
            WindowMode::PLANES.iter().filter_map(|&m| slab_query_table(&format!("attn.rpe_{}", m.tag()), m)).collect()
        };
        let case = Case { invariant, ..op(name, salt) };
        reports.push(case.run(
            s,
            random_matrix(am, 6, seed + salt),
            all,
            |s, x| a.forward(&Ctx::new(s, Mode::Train), x, coords, maps),
            |s, g, x, c, d| a.backward(s, g, x, coords, maps, c, d),
        )?);
    }

    // model-level operators on a 13-voxel stage
    for (variant, op_name, block_name, salt) in [
        (Variant::ConDaFormer, "op_condaformer", "block_condaformer", 16u64),
        (Variant::DaFormer, "op_daformer", "block_daformer", 17),
        (Variant::Cubic, "op_cubic", "block_cubic", 18),
    ] {
        let cfg = gradcheck_config(variant);
        let st = cfg.stages()[0];
        let grid = random_grid(13, 4, seed + salt);
        let sample = Sample::from_voxels(grid, random_matrix(13, 3, seed), None, &cfg)?;
        let geo = &sample.stages[0];
        let x = random_matrix(13, st.channels, seed + salt);
        {
            let mut s = Store::new(0);
            let o = AttentionOp::new(&mut s, "op", &cfg, &st)?;
            reports.push(op(op_name, salt).run(
                s,
                x.clone(),
                all,
                |s, x| o.forward(&mut Ctx::new(s, Mode::Train), geo, false, x),
                |s, g, x, c, d| o.backward(s, g, geo, false, x, c, d),
            )?);
        }
        for index in [0usize, 1] {
            let mut s = Store::new(0);
            let b = Block::new(&mut s, "block", &cfg, &st, index)?;
            let name = if index == 0 { block_name.to_string() } else { format!("{block_name}_shifted") };
            let case = Case { name: &name, ..op(op_name, salt + 100 * index as u64) };
            reports.push(case.run(
                s,
                x.clone(),
                all,
                |s, x| b.forward(&mut Ctx::new(s, Mode::Train), geo, x),
                |s, g, _, c, d| b.backward(s, g, geo, c, d),
            )?);
        }
    }

    // embedding, downsampling, decoder
    {
        let mut s = Store::new(0);
        let conv = SparseConv::new(&mut s, "embed.conv", 3, 6, true)?;
        let res = ResBlock::new(&mut s, "embed.res", 6)?;
        reports.push(op("embedding", 19).run(
            s,
            random_matrix(m, 3, seed + 19),
            all,
            |s, x| {
                let mut ctx = Ctx::new(s, Mode::Train);
                let c = conv.forward(&ctx, &nbrs, x)?;
                res.forward(&mut ctx, &nbrs, &c)
            },
            |s, g, x, c, d| {
                let dc = res.backward(s, g, &nbrs, c, d)?;
                conv.backward(s, g, &nbrs, x, &dc)
            },
        )?);
    }
    {
        let (_, map) = pool_grid(&grid)?;
        let mut s = Store::new(0);
        let l = Linear::new(&mut s, "down", 4, 6, true)?;
        reports.push(op("downsample", 20).run(
            s,
            random_matrix(m, 4, seed + 20),
            all,
            |s, x| {
                let h = l.forward(&Ctx::new(s, Mode::Train), x)?;
                max_pool_with(&map, &h)
            },
            |s, g, x, am, d| {
                let dh = max_pool_backward(am, &map, d)?;
                l.backward(s, g, x, &dh)
            },
        )?);
    }
    {
        let cfg = gradcheck_config(Variant::DaFormer);
        let grid = random_grid(40, 6, seed + 21);
        let sample = Sample::<f64>::from_voxels(grid, random_matrix(40, 3, seed), None, &cfg)?;
        let mut s = Store::new(0);
        let net = Network::new(&mut s, &cfg)?;
        let specs = cfg.stages();
        let deep = random_matrix(sample.stages[1].grid.len(), specs[1].channels, seed + 22);
        let enc = |x: &Matrix<f64>| crate::model::EncoderOutput { features: vec![x.clone(), deep.clone()] };
        reports.push(op("decoder", 21).run(
            s,
            random_matrix(sample.voxels(), specs[0].channels, seed + 21),
            |n| n.starts_with("decoder"),
            |s, x| net.decoder_forward(&mut Ctx::new(s, Mode::Train), &sample, &enc(x)),
            |s, g, x, c, d| {
                let mut df = net.decoder_backward(s, g, &sample, &enc(x), c, d)?;
                Ok(df.swap_remove(0))
            },
        )?);
    }

    // whole network, cross-entropy loss on per-point logits
    for (variant, name, salt) in [
        (Variant::ConDaFormer, "model_condaformer", 30u64),
        (Variant::DaFormer, "model_daformer", 31),
        (Variant::Cubic, "model_cubic", 32),
    ] {
        let cfg = gradcheck_config(variant);
        let case = Case {
            name,
            tolerance: MODEL_TOLERANCE,
            opts: GradCheckOptions { max_coords: Some(opts.model_coords), seed: seed ^ salt, ..Default::default() },
            invariant: Vec::new(),
        };
        reports.push(check_model(&case, &cfg, seed + salt)?);
    }
    Ok(reports)
}

/// Random labeled cloud of `n` points in a `extent³` box (voxel size 1).
pub fn random_cloud(n: usize, extent: f64, classes: usize, seed: u64) -> PointCloud<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(0.0, extent).expect("valid range");
    let positions: Vec<[f64; 3]> = (0..n).map(|_| [u.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng)]).collect();
    let features = Matrix::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
    let labels = (0..n).map(|i| (i % classes) as i64).collect();
    PointCloud::new(positions, features, Some(labels)).expect("valid cloud")
}

fn check_model(case: &Case<'_>, cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let cloud = random_cloud(90, 6.0, cfg.num_classes, seed);
    let sample = Sample::prepare(&cloud, cfg)?;
    let labels = sample.point_labels.clone().expect("labeled");
    let mut store = Store::new(0);
    let net = Network::new(&mut store, cfg)?;
    randomize_for_check(&mut store, case.opts.seed);

    let loss_with = |s: &Store, features: &Matrix<f64>| -> Result<f64> {
        let sm = Sample { features: features.clone(), ..sample.clone() };
        let logits = net.segment(&mut Ctx::new(s, Mode::Train), &sm)?;
        Ok(cross_entropy(&logits, &labels)?.0)
    };
    let mut ctx = Ctx::new(&store, Mode::Train);
    let (logits, cache) = net.forward(&mut ctx, &sample)?;
    let (_, dpoints) = cross_entropy(&logits.select_rows(&sample.point_to_voxel), &labels)?;
    let dvox = crate::model::points_to_voxels_backward(&dpoints, &sample.point_to_voxel, sample.voxels())?;
    let mut grads = Grads::for_store(&store);
    let dx = net.backward(&store, &mut grads, &sample, &cache, &dvox)?;

    let mut blocks = check_param_grads(&mut store, &grads, all, |s| loss_with(s, &sample.features), &case.opts)?;
    blocks.push(check_input_grad("input", &sample.features, &dx, |x| loss_with(&store, x), &case.opts)?);
    let checked: std::collections::HashSet<&str> = blocks.iter().map(|b| b.name.as_str()).collect();
    let uncovered = store
        .blocks()
        .iter()
        .filter(|b| b.kind.trainable() && !checked.contains(b.name.as_str()))
        .map(|b| b.name.clone())
        .collect();
    Ok(GradCheckReport {
        case: case.name.to_string(),
        tolerance: case.tolerance,
        blocks,
        uncovered,
        invariant: Vec::new(),
    })
}
