use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::grid::SparseGrid;
use crate::error::{Error, Result};

/// Window shape: the full cube, or a slab thin along one axis.
///
/// `PlaneXY` windows span `W × W` voxels in x and y and `T` voxels in z;
/// `PlaneXZ` is thin along y and `PlaneYZ` along x.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WindowMode {
    Cubic,
    PlaneXY,
    PlaneXZ,
    PlaneYZ,
}

impl WindowMode {
    /// The three disassembled planes in merge order `(xy, yz, xz)`.
    pub const PLANES: [WindowMode; 3] = [WindowMode::PlaneXY, WindowMode::PlaneYZ, WindowMode::PlaneXZ];

    /// Axis along which the window is a thin slab, if any.
    pub fn slab_axis(self) -> Option<usize> {
        match self {
            WindowMode::Cubic => None,
            WindowMode::PlaneXY => Some(2),
            WindowMode::PlaneXZ => Some(1),
            WindowMode::PlaneYZ => Some(0),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            WindowMode::Cubic => "cubic",
            WindowMode::PlaneXY => "xy",
            WindowMode::PlaneXZ => "xz",
            WindowMode::PlaneYZ => "yz",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowSpec {
    pub mode: WindowMode,
    /// Window extent `W` in voxels along the windowed axes.
    pub window_voxels: u32,
    /// Slab thickness `T` in voxels; ignored for cubic windows.
    pub slab_voxels: u32,
    pub shifted: bool,
}

impl WindowSpec {
    pub fn new(mode: WindowMode, window_voxels: u32, slab_voxels: u32, shifted: bool) -> Result<Self> {
        if window_voxels == 0 || slab_voxels == 0 {
            return Err(Error::Config(format!(
                "window extent ({window_voxels}) and slab thickness ({slab_voxels}) must be positive"
            )));
        }
        Ok(Self { mode, window_voxels, slab_voxels, shifted })
    }

    pub fn cubic(window_voxels: u32) -> Self {
        Self::new(WindowMode::Cubic, window_voxels, 1, false).expect("positive extent")
    }

    pub fn plane(mode: WindowMode, window_voxels: u32, slab_voxels: u32) -> Self {
        Self::new(mode, window_voxels, slab_voxels, false).expect("positive extent")
    }

    pub fn with_shift(self, shifted: bool) -> Self {
        Self { shifted, ..self }
    }

    /// Per-axis window extent in voxels.
    pub fn extents(&self) -> [i64; 3] {
        let w = i64::from(self.window_voxels);
        let mut e = [w; 3];
        if let Some(a) = self.mode.slab_axis() {
            e[a] = i64::from(self.slab_voxels);
        }
        e
    }

    /// Per-axis lattice displacement (half extent, floored) when shifted.
    pub fn offsets(&self) -> [i64; 3] {
        if self.shifted {
            self.extents().map(|e| e / 2)
        } else {
            [0; 3]
        }
    }

    pub fn key(&self, c: &[i32; 3]) -> [i64; 3] {
        let e = self.extents();
        let o = self.offsets();
        let mut k = [0i64; 3];
        for a in 0..3 {
            k[a] = (i64::from(c[a]) + o[a]).div_euclid(e[a]);
        }
        k
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowGroup {
    pub key: [i64; 3],
    /// Grid rows in ascending order.
    pub rows: Vec<usize>,
}

/// Partition of grid rows into attention windows, sorted by window key.
#[derive(Clone, Debug)]
pub struct WindowMap {
    spec: WindowSpec,
    groups: Vec<WindowGroup>,
    row_group: Vec<usize>,
}

impl WindowMap {
    pub fn spec(&self) -> &WindowSpec {
        &self.spec
    }

    pub fn groups(&self) -> &[WindowGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Number of grid rows covered.
    pub fn rows(&self) -> usize {
        self.row_group.len()
    }

    /// Index into [`WindowMap::groups`] of the window holding `row`.
    pub fn group_of(&self, row: usize) -> usize {
        self.row_group[row]
    }

    pub fn same_window(&self, a: usize, b: usize) -> bool {
        self.row_group[a] == self.row_group[b]
    }

    /// Attention pair count `Σ_t N_t²`.
    pub fn pair_count(&self) -> u64 {
        self.groups.iter().map(|g| (g.rows.len() as u64).pow(2)).sum()
    }
}

pub fn assign_windows(grid: &SparseGrid, spec: WindowSpec) -> WindowMap {
    let mut buckets: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (row, c) in grid.coords().iter().enumerate() {
        buckets.entry(spec.key(c)).or_default().push(row);
    }
    let mut row_group = vec![0usize; grid.len()];
    let groups: Vec<WindowGroup> = buckets
        .into_iter()
        .enumerate()
        .map(|(gi, (key, rows))| {
            for &r in &rows {
                row_group[r] = gi;
            }
            WindowGroup { key, rows }
        })
        .collect();
    WindowMap { spec, groups, row_group }
}
