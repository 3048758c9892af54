//! Pair-count sweep over dense grids, plus wall-clock timing of the two
//! attention layouts. Pair counts are exact and deterministic; timings are
//! reported separately and never asserted.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::pairs::{brute_force_pairs, count_grid_pairs, predicted_ratio};
use crate::attention::{CubicAttention, DisassembledAttention, Merge};
use crate::error::{Error, Result};
use crate::geometry::{assign_windows, SparseGrid, WindowMode, WindowSpec};
use crate::nn::functional::Mode;
use crate::nn::{init_params, Ctx, InitScheme, ParamStore};
use crate::tensor::Matrix;

/// One `(extent, W)` point of the sweep on a dense `extent³` grid with `T = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSweepRow {
    pub extent: i32,
    pub window: u32,
    pub voxels: usize,
    pub cubic_windows: usize,
    pub cubic_pairs: u64,
    /// In merge order `(xy, yz, xz)`.
    pub plane_pairs: [u64; 3],
    pub disassembled_pairs: u64,
    pub ratio: f64,
    pub predicted: f64,
    /// Every counted map agrees with direct pair enumeration.
    pub brute_force_match: bool,
}

pub fn pair_sweep(extents: &[i32], windows: &[u32]) -> Result<Vec<PairSweepRow>> {
    let mut rows = Vec::new();
    for &e in extents {
        if e <= 0 {
            return Err(Error::Config(format!("grid extent must be positive, got {e}")));
        }
        let grid = SparseGrid::dense([e; 3], 1.0);
        for &w in windows {
            let r = count_grid_pairs(&grid, w, 1)?;
            let mut matched = brute_force_pairs(&grid, &WindowSpec::cubic(w)) == r.cubic.pairs;
            for (mode, mc) in WindowMode::PLANES.iter().zip(&r.planes) {
                matched &= brute_force_pairs(&grid, &WindowSpec::plane(*mode, w, 1)) == mc.pairs;
            }
            rows.push(PairSweepRow {
                extent: e,
                window: w,
                voxels: grid.len(),
                cubic_windows: r.cubic.windows,
                cubic_pairs: r.cubic.pairs,
                plane_pairs: r.planes.map(|p| p.pairs),
                disassembled_pairs: r.disassembled_pairs,
                ratio: r.ratio,
                predicted: predicted_ratio(w),
                brute_force_match: matched,
            });
        }
    }
    Ok(rows)
}

pub fn pair_sweep_csv(rows: &[PairSweepRow]) -> String {
    let mut s = String::from(
        "extent,window,voxels,cubic_windows,cubic_pairs,xy_pairs,yz_pairs,xz_pairs,disassembled_pairs,ratio,predicted,brute_force_match\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.extent,
            r.window,
            r.voxels,
            r.cubic_windows,
            r.cubic_pairs,
            r.plane_pairs[0],
            r.plane_pairs[1],
            r.plane_pairs[2],
            r.disassembled_pairs,
            r.ratio,
            r.predicted,
            r.brute_force_match
        );
    }
    s
}

/// Forward time of one attention layout on a dense grid.
#[derive(Clone, Debug)]
pub struct TimingRow {
    pub extent: i32,
    pub window: u32,
    pub layout: &'static str,
    pub pairs: u64,
    pub seconds: f64,
}

pub const TIMING_CHANNELS: usize = 12;
pub const TIMING_HEADS: usize = 3;

/// Times cubic and disassembled attention forward passes (`C = 12`, `H = 3`)
/// on the current rayon pool; the median of `repeats` runs is reported.
pub fn time_attention(extent: i32, window: u32, repeats: usize, seed: u64) -> Result<Vec<TimingRow>> {
    let grid = SparseGrid::dense([extent; 3], 1.0);
    let mut store = ParamStore::<f64>::new(seed);
    let cubic = CubicAttention::new(&mut store, "cubic", TIMING_CHANNELS, TIMING_HEADS, window)?;
    let planes =
        DisassembledAttention::new(&mut store, "planes", TIMING_CHANNELS, TIMING_HEADS, window, Merge::Split, true, true)?;
    init_params(&mut store, &InitScheme { seed, ..InitScheme::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(grid.len(), TIMING_CHANNELS, |_, _| StandardNormal.sample(&mut rng));
    let cubic_map = assign_windows(&grid, WindowSpec::cubic(window));
    let [a, b, c] = WindowMode::PLANES.map(|m| assign_windows(&grid, WindowSpec::plane(m, window, 1)));
    let ctx = Ctx::new(&store, Mode::Eval);

    let median = |mut f: Box<dyn FnMut() -> Result<()> + '_>| -> Result<f64> {
        let mut t = Vec::with_capacity(repeats.max(1));
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            f()?;
            t.push(start.elapsed().as_secs_f64());
        }
        t.sort_by(f64::total_cmp);
        Ok(t[t.len() / 2])
    };
    let cubic_s = median(Box::new(|| cubic.forward(&ctx, &x, grid.coords(), &cubic_map).map(|_| ())))?;
    let planes_s = median(Box::new(|| planes.forward(&ctx, &x, grid.coords(), [&a, &b, &c]).map(|_| ())))?;
    Ok(vec![
        TimingRow { extent, window, layout: "cubic", pairs: cubic_map.pair_count(), seconds: cubic_s },
        TimingRow {
            extent,
            window,
            layout: "disassembled",
            pairs: a.pair_count() + b.pair_count() + c.pair_count(),
            seconds: planes_s,
        },
    ])
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut s = String::from("extent,window,layout,pairs,seconds\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{:.6}", r.extent, r.window, r.layout, r.pairs, r.seconds);
    }
    s
}
