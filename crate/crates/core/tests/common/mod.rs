//! Independent reference implementations shared by the integration tests.
//! Everything here is written with plain loops over dense data so it shares
//! no code path with the library kernels it checks.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use condaformer::attention::{CubicAttention, DisassembledAttention, Merge, RpeTables};
use condaformer::conv::{depthwise_sparse_conv, sparse_conv, NeighborMap};
use condaformer::geometry::{assign_windows, Coord, SparseGrid, WindowMap, WindowMode, WindowSpec};
use condaformer::harness::brute_force_pairs;
use condaformer::harness::suite::{gradcheck_config, random_cloud, random_grid};
use condaformer::model::{ModelConfig, Network, Sample, Variant};
use condaformer::nn::functional::Mode;
use condaformer::nn::{Ctx, Linear, ParamId, ParamKind, ParamStore};
use condaformer::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Every parameter (trainable or not) drawn from `N(0, 0.5²)`.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let kind = store.block(id).kind;
        for v in store.value_mut(id).as_mut_slice() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = if kind == ParamKind::RunningVar { 1.0 + 0.25 * z.abs() } else { 0.5 * z };
        }
    }
}

pub fn max_abs_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- windows

/// Window key by direct per-axis flooring.
pub fn oracle_key(mode: WindowMode, w: i64, t: i64, shifted: bool, c: &Coord) -> [i64; 3] {
    let thin = match mode {
        WindowMode::Cubic => 3,
        WindowMode::PlaneXY => 2,
        WindowMode::PlaneXZ => 1,
        WindowMode::PlaneYZ => 0,
    };
    let mut k = [0; 3];
    for a in 0..3 {
        let e = if a == thin { t } else { w };
        let shift = if shifted { e / 2 } else { 0 };
        k[a] = ((c[a] as i64 + shift) as f64 / e as f64).floor() as i64;
    }
    k
}

/// Groups rows by oracle key; each group lists rows in ascending order.
pub fn oracle_windows(coords: &[Coord], mode: WindowMode, w: i64, t: i64, shifted: bool) -> Vec<Vec<usize>> {
    let mut by_key: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (r, c) in coords.iter().enumerate() {
        by_key.entry(oracle_key(mode, w, t, shifted, c)).or_default().push(r);
    }
    let mut groups: Vec<Vec<usize>> = by_key.into_values().collect();
    groups.sort();
    groups
}

pub const MODES: [WindowMode; 4] = [WindowMode::Cubic, WindowMode::PlaneXY, WindowMode::PlaneXZ, WindowMode::PlaneYZ];

/// Partition of all rows into groups whose members share the oracle key,
/// with distinct keys per group and an exact pair count.
pub fn check_partition(grid: &SparseGrid, wm: &WindowMap, spec: &WindowSpec) -> Result<(), String> {
    let mut seen = vec![0u32; grid.len()];
    let mut keys = BTreeSet::new();
    for (gi, g) in wm.groups().iter().enumerate() {
        if !keys.insert(g.key) {
            return Err(format!("key {:?} repeated", g.key));
        }
        if g.rows.is_empty() || g.rows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!("group {gi} rows not strictly ascending"));
        }
        for &r in &g.rows {
            seen[r] += 1;
            let want = oracle_key(spec.mode, spec.window_voxels as i64, spec.slab_voxels as i64, spec.shifted, &grid.coord(r));
            if want != g.key || wm.group_of(r) != gi {
                return Err(format!("row {r} in group {:?}, oracle key {want:?}", g.key));
            }
        }
    }
    if seen.iter().any(|&n| n != 1) {
        return Err("rows not covered exactly once".into());
    }
    if wm.pair_count() != brute_force_pairs(grid, spec) {
        return Err("pair count differs from enumeration".into());
    }
    Ok(())
}

/// Exhaustive over dense grids from `1³` to `8³`: partition, pair counts,
/// and the plane coverage rule. With `T = 1` and no shift, two voxels share
/// some plane window exactly when they share a cubic window and agree on at
/// least one coordinate.
pub fn dense_window_check(max_extent: i32) -> Result<usize, String> {
    let mut checked = 0;
    for n in 1..=max_extent {
        let grid = SparseGrid::dense([n; 3], 1.0);
        for w in 1..=(n as u32 + 1) {
            for t in [1, 2] {
                for shifted in [false, true] {
                    for mode in MODES {
                        let spec = WindowSpec::new(mode, w, t, shifted).unwrap();
                        check_partition(&grid, &assign_windows(&grid, spec), &spec).map_err(|e| format!("{n}³ {spec:?}: {e}"))?;
                        checked += 1;
                    }
                }
            }
            let cubic = assign_windows(&grid, WindowSpec::cubic(w));
            let planes = WindowMode::PLANES.map(|m| assign_windows(&grid, WindowSpec::plane(m, w, 1)));
            let coords = grid.coords();
            for i in 0..grid.len() {
                for j in 0..grid.len() {
                    let any_plane = planes.iter().any(|p| p.same_window(i, j));
                    let shares_axis = (0..3).any(|a| coords[i][a] == coords[j][a]);
                    if any_plane != (cubic.same_window(i, j) && shares_axis) {
                        return Err(format!("{n}³ W={w}: plane coverage wrong for rows {i}, {j}"));
                    }
                }
            }
        }
    }
    Ok(checked)
}

// -------------------------------------------------------------- attention

fn linear(x: &Matrix<f64>, store: &ParamStore<f64>, l: &Linear) -> Matrix<f64> {
    let w = store.value(l.weight);
    let b = l.bias.map(|b| store.value(b).as_slice().to_vec());
    Matrix::from_fn(x.rows(), l.out_dim, |i, o| {
        let mut s = b.as_ref().map_or(0.0, |b| b[o]);
        for k in 0..l.in_dim {
            s += x[(i, k)] * w[(k, o)];
        }
        s
    })
}

/// Multi-head attention with contextual relative positions, evaluated pair
/// by pair inside every group of `windows`.
#[allow(clippy::too_many_arguments)]
pub fn naive_attention(
    q: &Matrix<f64>,
    k: &Matrix<f64>,
    v: &Matrix<f64>,
    coords: &[Coord],
    windows: &[Vec<usize>],
    heads: usize,
    scale: f64,
    store: &ParamStore<f64>,
    rpe: &RpeTables,
) -> Matrix<f64> {
    let c = q.cols();
    let d = c / heads;
    let w = rpe.w_max as i64;
    let bin = |r: i64| (r + w).max(0).min(2 * w) as usize;
    let table = |ids: &[ParamId; 3], axis: usize, b: usize, ch: usize| store.value(ids[axis])[(b, ch)];
    let mut out = Matrix::zeros(q.rows(), c);
    for group in windows {
        for h in 0..heads {
            let chans = h * d..(h + 1) * d;
            for &i in group {
                let logits: Vec<f64> = group
                    .iter()
                    .map(|&j| {
                        let mut l = 0.0;
                        for ch in chans.clone() {
                            l += q[(i, ch)] * k[(j, ch)];
                            for a in 0..3 {
                                let b = bin(coords[i][a] as i64 - coords[j][a] as i64);
                                l += q[(i, ch)] * table(&rpe.q, a, b, ch) + k[(j, ch)] * table(&rpe.k, a, b, ch);
                            }
                        }
                        l / scale
                    })
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (jj, &j) in group.iter().enumerate() {
                    let p = e[jj] / z;
                    for ch in chans.clone() {
                        let mut val = v[(j, ch)];
                        for a in 0..3 {
                            val += table(&rpe.v, a, bin(coords[i][a] as i64 - coords[j][a] as i64), ch);
                        }
                        out[(i, ch)] += p * val;
                    }
                }
            }
        }
    }
    out
}

pub fn naive_cubic(
    m: &CubicAttention,
    store: &ParamStore<f64>,
    x: &Matrix<f64>,
    coords: &[Coord],
    window: u32,
    shifted: bool,
) -> Matrix<f64> {
    let groups = oracle_windows(coords, WindowMode::Cubic, window as i64, 1, shifted);
    let (q, k, v) = (linear(x, store, &m.attn.q), linear(x, store, &m.attn.k), linear(x, store, &m.attn.v));
    let scale = ((m.channels / m.heads) as f64).sqrt();
    let merged = naive_attention(&q, &k, &v, coords, &groups, m.heads, scale, store, &m.rpe);
    linear(&merged, store, &m.proj)
}

#[allow(clippy::too_many_arguments)]
pub fn naive_disassembled(
    m: &DisassembledAttention,
    store: &ParamStore<f64>,
    x: &Matrix<f64>,
    coords: &[Coord],
    window: u32,
    slab: u32,
    shifted: bool,
) -> Matrix<f64> {
    let scale = ((m.channels / m.heads) as f64).sqrt();
    let outs: Vec<Matrix<f64>> = (0..3)
        .map(|p| {
            let plane = &m.planes[p];
            let groups = oracle_windows(coords, WindowMode::PLANES[p], window as i64, slab as i64, shifted);
            let (q, k, v) = (linear(x, store, &plane.q), linear(x, store, &plane.k), linear(x, store, &plane.v));
            naive_attention(&q, &k, &v, coords, &groups, plane.heads, scale, store, m.rpe_for(p))
        })
        .collect();
    let merged = match m.merge {
        Merge::Split => {
            let w = outs[0].cols();
            Matrix::from_fn(x.rows(), 3 * w, |i, j| outs[j / w][(i, j % w)])
        }
        Merge::NoSplit => Matrix::from_fn(x.rows(), m.channels, |i, j| outs[0][(i, j)] + outs[1][(i, j)] + outs[2][(i, j)]),
    };
    match &m.proj {
        Some(p) => linear(&merged, store, p),
        None => merged,
    }
}

/// Distinct random voxels inside one unshifted cubic window of extent `w`,
/// placed at a random window position.
pub fn one_window_grid(n: usize, w: i32, rng: &mut ChaCha8Rng) -> SparseGrid {
    let base = [rng.random_range(-3..3) * w, rng.random_range(-3..3) * w, rng.random_range(-3..3) * w];
    let mut seen = std::collections::BTreeSet::new();
    while seen.len() < n.min((w * w * w) as usize) {
        seen.insert([
            base[0] + rng.random_range(0..w),
            base[1] + rng.random_range(0..w),
            base[2] + rng.random_range(0..w),
        ]);
    }
    SparseGrid::new(seen.into_iter().collect(), 1.0, [0.0; 3]).expect("distinct voxels")
}

#[derive(Debug, Default)]
pub struct OracleReport {
    pub max_err: f64,
    /// Unshifted cubic windows covered, one per case.
    pub windows: usize,
    /// All windows compared across layouts and shifts.
    pub compared_windows: usize,
    pub largest_window: usize,
}

/// Compares every attention layout against the naive reference on `cases`
/// random windows of at most 12 voxels: cubic, and the plane triple under
/// split and summed merging with shared and separate position tables,
/// each unshifted and shifted.
pub fn attention_oracle(cases: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = OracleReport::default();
    let (c, h) = (12, 3);
    for case in 0..cases {
        let n = rng.random_range(1..=12);
        let w = rng.random_range(2..=4);
        let grid = one_window_grid(n, w, &mut rng);
        let coords = grid.coords();
        rep.windows += 1;
        rep.largest_window = rep.largest_window.max(grid.len());
        let x = normal_matrix(grid.len(), c, &mut rng);

        let mut store = ParamStore::<f64>::new(0);
        let cubic = CubicAttention::new(&mut store, "cubic", c, h, w as u32).unwrap();
        let layouts: Vec<DisassembledAttention> = [(Merge::Split, true), (Merge::Split, false), (Merge::NoSplit, true), (Merge::NoSplit, false)]
            .iter()
            .enumerate()
            .map(|(i, &(merge, share))| {
                DisassembledAttention::new(&mut store, &format!("planes{i}"), c, h, w as u32, merge, share, true).unwrap()
            })
            .collect();
        randomize(&mut store, seed ^ case as u64);
        let ctx = Ctx::new(&store, Mode::Eval);

        for shifted in [false, true] {
            let cm = assign_windows(&grid, WindowSpec::new(WindowMode::Cubic, w as u32, 1, shifted).unwrap());
            let (got, _) = cubic.forward(&ctx, &x, coords, &cm).unwrap();
            rep.max_err = rep.max_err.max(max_abs_diff(&got, &naive_cubic(&cubic, &store, &x, coords, w as u32, shifted)));
            rep.compared_windows += cm.len();
            let maps = WindowMode::PLANES.map(|m| assign_windows(&grid, WindowSpec::new(m, w as u32, 1, shifted).unwrap()));
            for l in &layouts {
                let (got, _) = l.forward(&ctx, &x, coords, [&maps[0], &maps[1], &maps[2]]).unwrap();
                let want = naive_disassembled(l, &store, &x, coords, w as u32, 1, shifted);
                rep.max_err = rep.max_err.max(max_abs_diff(&got, &want));
                rep.compared_windows += maps.iter().map(|m| m.len()).sum::<usize>();
            }
        }
    }
    rep
}

// ------------------------------------------------------------ convolution

/// Dense zero-padded volume holding the rows of `x` at their voxels.
struct Dense {
    lo: Coord,
    dims: [i32; 3],
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    fn new(grid: &SparseGrid, x: &Matrix<f64>) -> Self {
        let mut lo = [i32::MAX; 3];
        let mut hi = [i32::MIN; 3];
        for c in grid.coords() {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a] - 1);
                hi[a] = hi[a].max(c[a] + 1);
            }
        }
        let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
        let cols = x.cols();
        let mut d = Self { lo, dims, cols, data: vec![0.0; (dims[0] * dims[1] * dims[2]) as usize * cols] };
        for (r, c) in grid.coords().iter().enumerate() {
            let at = d.index(c);
            d.data[at..at + cols].copy_from_slice(x.row(r));
        }
        d
    }

    fn index(&self, c: &Coord) -> usize {
        let [x, y, z] = [c[0] - self.lo[0], c[1] - self.lo[1], c[2] - self.lo[2]];
        (((x * self.dims[1] + y) * self.dims[2] + z) as usize) * self.cols
    }

    fn at(&self, c: &Coord, ch: usize) -> f64 {
        self.data[self.index(c) + ch]
    }
}

/// Tap index of offset `d ∈ {-1, 0, 1}³`: lexicographic in `(dx, dy, dz)`.
pub fn tap_of(d: [i32; 3]) -> usize {
    ((d[0] + 1) * 9 + (d[1] + 1) * 3 + (d[2] + 1)) as usize
}

fn offsets() -> impl Iterator<Item = [i32; 3]> {
    (-1..=1).flat_map(|a| (-1..=1).flat_map(move |b| (-1..=1).map(move |c| [a, b, c])))
}

/// `out[p] = b + Σ_d W[tap(d)]ᵀ x[p + d]` with zero padding, at occupied `p`.
pub fn dense_conv(grid: &SparseGrid, x: &Matrix<f64>, w: &Matrix<f64>, bias: Option<&[f64]>) -> Matrix<f64> {
    let dense = Dense::new(grid, x);
    let (cin, cout) = (x.cols(), w.cols());
    Matrix::from_fn(grid.len(), cout, |r, o| {
        let p = grid.coord(r);
        let mut s = bias.map_or(0.0, |b| b[o]);
        for d in offsets() {
            let n = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
            for i in 0..cin {
                s += dense.at(&n, i) * w[(tap_of(d) * cin + i, o)];
            }
        }
        s
    })
}

/// Per-channel version: `out[p, c] = Σ_d W[tap(d), c] · x[p + d, c]`.
pub fn dense_depthwise(grid: &SparseGrid, x: &Matrix<f64>, w: &Matrix<f64>) -> Matrix<f64> {
    let dense = Dense::new(grid, x);
    Matrix::from_fn(grid.len(), x.cols(), |r, c| {
        let p = grid.coord(r);
        offsets().map(|d| dense.at(&[p[0] + d[0], p[1] + d[1], p[2] + d[2]], c) * w[(tap_of(d), c)]).sum()
    })
}

/// Largest deviation of both sparse convolutions from the dense references
/// on `cases` random grids inside `5³`.
pub fn conv_oracle(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let m = rng.random_range(1..=125);
        let grid = random_grid(m, 5, seed ^ (case as u64 + 1));
        let nbrs = NeighborMap::new(&grid);
        let (cin, cout) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let x = normal_matrix(grid.len(), cin, &mut rng);
        let w = normal_matrix(27 * cin, cout, &mut rng);
        let b: Vec<f64> = (0..cout).map(|_| StandardNormal.sample(&mut rng)).collect();
        let got = sparse_conv(&nbrs, &x, &w, Some(&b)).unwrap();
        worst = worst.max(max_abs_diff(&got, &dense_conv(&grid, &x, &w, Some(&b))));
        let wd = normal_matrix(27, cin, &mut rng);
        let got = depthwise_sparse_conv(&nbrs, &x, &wd).unwrap();
        worst = worst.max(max_abs_diff(&got, &dense_depthwise(&grid, &x, &wd)));
    }
    worst
}

// ------------------------------------------------------- parameter counts

pub fn linear_count(i: usize, o: usize, bias: bool) -> usize {
    i * o + if bias { o } else { 0 }
}

/// Nine tables of `2W + 1` bins.
pub fn rpe_count(w: usize, width: usize) -> usize {
    9 * (2 * w + 1) * width
}

/// Two half-width linear branches with batch norms and a 27-tap depthwise conv.
pub fn lse_count(c: usize) -> usize {
    2 * linear_count(c, c / 2, false) + 2 * 2 * (c / 2) + 27 * c + 2 * c
}

/// Attention operator of one block, counted from the layer definitions.
pub fn op_count(c: usize, w: usize, variant: Variant, merge: Merge, share: bool) -> usize {
    match variant {
        Variant::Cubic => 3 * linear_count(c, c, true) + rpe_count(w, c) + linear_count(c, c, true),
        _ => {
            let width = if merge == Merge::Split { c / 3 } else { c };
            let planes = 3 * 3 * linear_count(c, width, true);
            let tables = if share { 1 } else { 3 } * rpe_count(w, width);
            let lse = if variant == Variant::ConDaFormer { 2 * lse_count(c) } else { 0 };
            planes + tables + lse + linear_count(c, c, true)
        }
    }
}

/// `Σ_blocks op_count` over all stages of `cfg`.
pub fn ops_total(cfg: &ModelConfig) -> usize {
    cfg.stages()
        .iter()
        .map(|s| s.depth * op_count(s.channels, s.window_voxels as usize, cfg.variant, cfg.merge, cfg.rpe_share))
        .sum()
}

// ------------------------------------------------------------- invariants

/// Largest deviation of block outputs from block inputs once every output
/// projection and second MLP layer is zeroed, over all stages and both modes.
pub fn residual_identity_err(variant: Variant) -> f64 {
    let cfg = gradcheck_config(variant);
    let sample = Sample::prepare(&random_cloud(120, 6.0, cfg.num_classes, 1), &cfg).unwrap();
    let mut store = ParamStore::<f64>::new(0);
    let net = Network::new(&mut store, &cfg).unwrap();
    randomize(&mut store, 2);
    for stage in &net.stages {
        for b in &stage.blocks {
            let proj = b.op.output_projection();
            for id in [Some(proj.weight), proj.bias, Some(b.mlp.fc2.weight), b.mlp.fc2.bias].into_iter().flatten() {
                store.value_mut(id).as_mut_slice().fill(0.0);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for (s, stage) in net.stages.iter().enumerate() {
        let geo = &sample.stages[s];
        let x = normal_matrix(geo.grid.len(), stage.spec.channels, &mut rng);
        for b in &stage.blocks {
            for mode in [Mode::Train, Mode::Eval] {
                let mut ctx = Ctx::new(&store, mode);
                worst = worst.max(max_abs_diff(&b.forward(&mut ctx, geo, &x).unwrap().0, &x));
            }
        }
    }
    worst
}

/// Largest deviation between the logits of a permuted cloud and the
/// permuted logits of the original, in train and eval mode.
pub fn permutation_err(variant: Variant) -> f64 {
    let cfg = gradcheck_config(variant);
    let cloud = random_cloud(120, 6.0, cfg.num_classes, 4);
    let sample = Sample::prepare(&cloud, &cfg).unwrap();
    let mut store = ParamStore::<f64>::new(0);
    let net = Network::new(&mut store, &cfg).unwrap();
    randomize(&mut store, 5);
    let n = cloud.len();
    let perm: Vec<usize> = (0..n).map(|i| (i * 37 + 11) % n).collect();
    let permuted = Sample::prepare(&cloud.permuted(&perm).unwrap(), &cfg).unwrap();
    let mut worst: f64 = 0.0;
    for mode in [Mode::Train, Mode::Eval] {
        let a = net.segment(&mut Ctx::new(&store, mode), &sample).unwrap();
        let b = net.segment(&mut Ctx::new(&store, mode), &permuted).unwrap();
        worst = worst.max(max_abs_diff(&a.select_rows(&perm), &b));
    }
    worst
}

/// Conv outputs on a grid and on the same grid moved by an arbitrary offset.
pub fn conv_translation_err(seed: u64) -> f64 {
    let grid = random_grid(60, 5, seed);
    let moved = grid.translated([-7, 3, 11]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal_matrix(60, 3, &mut rng);
    let w = normal_matrix(27 * 3, 2, &mut rng);
    let wd = normal_matrix(27, 3, &mut rng);
    let (a, b) = (NeighborMap::new(&grid), NeighborMap::new(&moved));
    let full = max_abs_diff(&sparse_conv(&a, &x, &w, None).unwrap(), &sparse_conv(&b, &x, &w, None).unwrap());
    full.max(max_abs_diff(&depthwise_sparse_conv(&a, &x, &wd).unwrap(), &depthwise_sparse_conv(&b, &x, &wd).unwrap()))
}
