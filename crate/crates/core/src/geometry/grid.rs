use std::collections::HashMap;

use crate::error::{Error, Result};

/// Integer voxel coordinate `(x, y, z)`.
pub type Coord = [i32; 3];

/// Occupied voxels of a cubic lattice, each owning one feature row.
///
/// `index` is a bijection between `coords` and `0..len()`. The grid origin is
/// the world-space position of voxel `(0, 0, 0)`'s minimum corner.
#[derive(Clone, Debug)]
pub struct SparseGrid {
    voxel_size: f64,
    origin: [f64; 3],
    coords: Vec<Coord>,
    index: HashMap<Coord, usize>,
}

impl SparseGrid {
    /// Builds a grid whose rows follow `coords` order. Coordinates must be unique.
    pub fn new(coords: Vec<Coord>, voxel_size: f64, origin: [f64; 3]) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::RejectedInput("sparse grid needs at least one voxel".into()));
        }
        if !(voxel_size.is_finite() && voxel_size > 0.0) {
            return Err(Error::RejectedInput(format!("voxel size {voxel_size} must be positive")));
        }
        let mut index = HashMap::with_capacity(coords.len());
        for (row, &c) in coords.iter().enumerate() {
            if index.insert(c, row).is_some() {
                return Err(Error::RejectedInput(format!("duplicate voxel coordinate {c:?}")));
            }
        }
        Ok(Self { voxel_size, origin, coords, index })
    }

    /// Dense `nx × ny × nz` block starting at the origin, rows in (z, y, x) order.
    pub fn dense(extent: [i32; 3], voxel_size: f64) -> Self {
        let mut coords = Vec::new();
        for z in 0..extent[2] {
            for y in 0..extent[1] {
                for x in 0..extent[0] {
                    coords.push([x, y, z]);
                }
            }
        }
        Self::new(coords, voxel_size, [0.0; 3]).expect("dense grid is valid")
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    #[inline]
    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    #[inline]
    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    #[inline]
    pub fn coord(&self, row: usize) -> Coord {
        self.coords[row]
    }

    #[inline]
    pub fn row_of(&self, c: &Coord) -> Option<usize> {
        self.index.get(c).copied()
    }

    /// Same occupancy shifted by an integer vector; row order is preserved.
    pub fn translated(&self, by: Coord) -> Self {
        let coords = self
            .coords
            .iter()
            .map(|c| [c[0] + by[0], c[1] + by[1], c[2] + by[2]])
            .collect();
        Self::new(coords, self.voxel_size, self.origin).expect("translation keeps coordinates unique")
    }
}

/// Lexicographic `(z, y, x)` ordering key.
#[inline]
pub(crate) fn zyx(c: &Coord) -> (i32, i32, i32) {
    (c[2], c[1], c[0])
}
