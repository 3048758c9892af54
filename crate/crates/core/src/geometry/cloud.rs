use std::collections::HashMap;

use super::grid::{zyx, Coord, SparseGrid};
use super::scene_io::IGNORE_LABEL;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Raw point cloud: positions in meters, per-point input features, optional labels.
#[derive(Clone, Debug)]
pub struct PointCloud<T> {
    positions: Vec<[T; 3]>,
    features: Matrix<T>,
    labels: Option<Vec<i64>>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(positions: Vec<[T; 3]>, features: Matrix<T>, labels: Option<Vec<i64>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::RejectedInput("point cloud is empty".into()));
        }
        if features.rows() != positions.len() {
            return Err(shape_err!(
                "{} feature rows for {} points",
                features.rows(),
                positions.len()
            ));
        }
        if let Some(l) = &labels {
            if l.len() != positions.len() {
                return Err(shape_err!("{} labels for {} points", l.len(), positions.len()));
            }
        }
        if let Some(i) = positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::RejectedInput(format!("point {i} has a non-finite position")));
        }
        Ok(Self { positions, features, labels })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[T; 3]] {
        &self.positions
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    /// Per-axis minimum position.
    pub fn min_corner(&self) -> [T; 3] {
        let mut lo = self.positions[0];
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
            }
        }
        lo
    }

    /// Points reordered so that new point `i` is old point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(shape_err!("permutation of length {} for {} points", perm.len(), self.len()));
        }
        Self::new(
            perm.iter().map(|&i| self.positions[i]).collect(),
            self.features.select_rows(perm),
            self.labels.as_ref().map(|l| perm.iter().map(|&i| l[i]).collect()),
        )
    }
}

/// Result of quantizing a cloud onto a sparse grid.
#[derive(Clone, Debug)]
pub struct Voxelized<T> {
    pub grid: SparseGrid,
    /// Mean of member point features, one row per voxel.
    pub features: Matrix<T>,
    /// Majority label per voxel; [`IGNORE_LABEL`] when no member is labeled.
    pub labels: Vec<i64>,
    /// Voxel row of every input point.
    pub point_to_voxel: Vec<usize>,
}

/// Voxelizes with the origin at the cloud's per-axis minimum.
pub fn voxelize<T: Scalar>(cloud: &PointCloud<T>, voxel_size: f64) -> Result<Voxelized<T>> {
    let lo = cloud.min_corner();
    voxelize_with_origin(cloud, voxel_size, [lo[0].as_f64(), lo[1].as_f64(), lo[2].as_f64()])
}

pub fn voxelize_with_origin<T: Scalar>(
    cloud: &PointCloud<T>,
    voxel_size: f64,
    origin: [f64; 3],
) -> Result<Voxelized<T>> {
    if !(voxel_size.is_finite() && voxel_size > 0.0) {
        return Err(Error::RejectedInput(format!("voxel size {voxel_size} must be positive")));
    }
    if origin.iter().any(|v| !v.is_finite()) {
        return Err(Error::RejectedInput("grid origin must be finite".into()));
    }

    let point_coords: Vec<Coord> = cloud
        .positions()
        .iter()
        .map(|p| {
            let mut c = [0i32; 3];
            for a in 0..3 {
                c[a] = ((p[a].as_f64() - origin[a]) / voxel_size).floor() as i32;
            }
            c
        })
        .collect();

    let mut coords = point_coords.clone();
    coords.sort_unstable_by_key(zyx);
    coords.dedup();
    let grid = SparseGrid::new(coords, voxel_size, origin)?;

    let m = grid.len();
    let cin = cloud.features().cols();
    let mut sums = Matrix::<T>::zeros(m, cin);
    let mut counts = vec![0usize; m];
    let mut votes: Vec<HashMap<i64, usize>> = vec![HashMap::new(); m];
    let mut point_to_voxel = Vec::with_capacity(cloud.len());

    for (i, c) in point_coords.iter().enumerate() {
        let row = grid.row_of(c).expect("every point coordinate is in the grid");
        point_to_voxel.push(row);
        counts[row] += 1;
        for (s, &f) in sums.row_mut(row).iter_mut().zip(cloud.features().row(i)) {
            *s += f;
        }
        if let Some(labels) = cloud.labels() {
            if labels[i] != IGNORE_LABEL {
                *votes[row].entry(labels[i]).or_default() += 1;
            }
        }
    }

    for (row, &n) in counts.iter().enumerate() {
        let inv = T::one() / T::from_usize_lossy(n);
        for v in sums.row_mut(row) {
            *v *= inv;
        }
    }

    let labels = votes
        .iter()
        .map(|v| {
            v.iter()
                .max_by(|(la, ca), (lb, cb)| ca.cmp(cb).then(lb.cmp(la)))
                .map_or(IGNORE_LABEL, |(&l, _)| l)
        })
        .collect();

    Ok(Voxelized { grid, features: sums, labels, point_to_voxel })
}
