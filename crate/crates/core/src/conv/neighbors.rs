use crate::geometry::SparseGrid;

pub const KERNEL_VOLUME: usize = 27;

/// The 27 kernel taps in lexicographic `(dx, dy, dz)` order; tap `k` and tap
/// `26 - k` are opposite offsets and tap 13 is the center.
pub const KERNEL_OFFSETS: [[i32; 3]; KERNEL_VOLUME] = {
    let mut o = [[0i32; 3]; KERNEL_VOLUME];
    let mut i = 0;
    while i < KERNEL_VOLUME {
        o[i] = [(i / 9) as i32 - 1, ((i / 3) % 3) as i32 - 1, (i % 3) as i32 - 1];
        i += 1;
    }
    o
};

pub const CENTER_TAP: usize = 13;

/// Row of the neighbor at each kernel tap, for every grid row.
#[derive(Clone, Debug)]
pub struct NeighborMap {
    table: Vec<u32>,
}

const ABSENT: u32 = u32::MAX;

impl NeighborMap {
    pub fn new(grid: &SparseGrid) -> Self {
        let mut table = Vec::with_capacity(grid.len() * KERNEL_VOLUME);
        for c in grid.coords() {
            for o in &KERNEL_OFFSETS {
                let n = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                table.push(grid.row_of(&n).map_or(ABSENT, |r| r as u32));
            }
        }
        Self { table }
    }

    pub fn rows(&self) -> usize {
        self.table.len() / KERNEL_VOLUME
    }

    #[inline]
    pub fn get(&self, row: usize, tap: usize) -> Option<usize> {
        let v = self.table[row * KERNEL_VOLUME + tap];
        (v != ABSENT).then_some(v as usize)
    }

    /// `(tap, neighbor row)` pairs for the occupied taps of `row`.
    #[inline]
    pub fn taps(&self, row: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.table[row * KERNEL_VOLUME..(row + 1) * KERNEL_VOLUME]
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != ABSENT)
            .map(|(k, &v)| (k, v as usize))
    }
}
