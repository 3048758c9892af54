use crate::error::Result;
use crate::geometry::{assign_windows, SparseGrid, WindowMap, WindowMode, WindowSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModeCount {
    pub mode: WindowMode,
    pub windows: usize,
    /// `Σ_t N_t²`, ordered pairs including the diagonal.
    pub pairs: u64,
}

impl ModeCount {
    pub fn of(wm: &WindowMap) -> Self {
        Self { mode: wm.spec().mode, windows: wm.len(), pairs: wm.pair_count() }
    }
}

/// Attention cost of cubic windows versus the three plane windows on the
/// same grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PairCountReport {
    pub cubic: ModeCount,
    /// In merge order `(xy, yz, xz)`.
    pub planes: [ModeCount; 3],
    pub disassembled_pairs: u64,
    /// `disassembled_pairs / cubic.pairs`.
    pub ratio: f64,
}

pub fn count_attention_pairs(cubic: &WindowMap, planes: [&WindowMap; 3]) -> PairCountReport {
    let cubic = ModeCount::of(cubic);
    let planes = planes.map(ModeCount::of);
    let disassembled_pairs = planes.iter().map(|p| p.pairs).sum();
    PairCountReport { cubic, planes, disassembled_pairs, ratio: disassembled_pairs as f64 / cubic.pairs as f64 }
}

/// Builds the four partitions of `grid` and counts their pairs.
pub fn count_grid_pairs(grid: &SparseGrid, window_voxels: u32, slab_voxels: u32) -> Result<PairCountReport> {
    let cubic = assign_windows(grid, WindowSpec::new(WindowMode::Cubic, window_voxels, 1, false)?);
    let [a, b, c] = WindowMode::PLANES.map(|m| WindowSpec::new(m, window_voxels, slab_voxels, false));
    let planes = [assign_windows(grid, a?), assign_windows(grid, b?), assign_windows(grid, c?)];
    Ok(count_attention_pairs(&cubic, [&planes[0], &planes[1], &planes[2]]))
}

/// Ordered pairs `(i, j)` whose window keys agree, by direct enumeration.
pub fn brute_force_pairs(grid: &SparseGrid, spec: &WindowSpec) -> u64 {
    let keys: Vec<[i64; 3]> = grid.coords().iter().map(|c| spec.key(c)).collect();
    let mut n = 0u64;
    for a in &keys {
        for b in &keys {
            n += u64::from(a == b);
        }
    }
    n
}

/// Disassembled-to-cubic pair ratio on a dense grid whose extent is a
/// multiple of `W`, with slab thickness 1: each cubic window of `W³`
/// voxels costs `W⁶` pairs, the planes cost `3 · W · (W²)² = 3W⁵`.
pub fn predicted_ratio(window_voxels: u32) -> f64 {
    3.0 / f64::from(window_voxels)
}
