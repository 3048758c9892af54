use super::grid::{zyx, Coord, SparseGrid};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Child → parent assignment between a fine grid and its 2× coarser image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolMap {
    parents: usize,
    assignment: Vec<usize>,
}

impl PoolMap {
    pub fn new(parents: usize, assignment: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; parents];
        for &p in &assignment {
            if p >= parents {
                return Err(shape_err!("pool assignment to parent {p} of {parents}"));
            }
            seen[p] = true;
        }
        if let Some(p) = seen.iter().position(|s| !s) {
            return Err(shape_err!("parent {p} has no children"));
        }
        Ok(Self { parents, assignment })
    }

    pub fn parent_rows(&self) -> usize {
        self.parents
    }

    pub fn child_rows(&self) -> usize {
        self.assignment.len()
    }

    #[inline]
    pub fn parent_of(&self, child: usize) -> usize {
        self.assignment[child]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }
}

/// Output of [`max_pool_down`].
#[derive(Clone, Debug)]
pub struct Pooled<T> {
    pub grid: SparseGrid,
    pub features: Matrix<T>,
    pub map: PoolMap,
    /// Winning child row per (parent, channel), row-major.
    pub argmax: Vec<usize>,
}

/// Coarse grid of `div_euclid(coord, 2)` parents with doubled voxel size.
///
/// Parent rows are ordered `(z, y, x)`.
pub fn pool_grid(grid: &SparseGrid) -> Result<(SparseGrid, PoolMap)> {
    let parent_of = |c: &Coord| -> Coord { [c[0].div_euclid(2), c[1].div_euclid(2), c[2].div_euclid(2)] };
    let mut coords: Vec<Coord> = grid.coords().iter().map(parent_of).collect();
    coords.sort_unstable_by_key(zyx);
    coords.dedup();
    let coarse = SparseGrid::new(coords, grid.voxel_size() * 2.0, grid.origin())?;
    let assignment: Vec<usize> = grid
        .coords()
        .iter()
        .map(|c| coarse.row_of(&parent_of(c)).expect("parent exists"))
        .collect();
    let map = PoolMap::new(coarse.len(), assignment)?;
    Ok((coarse, map))
}

/// Channel-wise max over the children of each parent. Returns the pooled
/// features and the winning child per (parent, channel), row-major; ties
/// pick the lowest child row.
pub fn max_pool_with<T: Scalar>(map: &PoolMap, x: &Matrix<T>) -> Result<(Matrix<T>, Vec<usize>)> {
    if x.rows() != map.child_rows() {
        return Err(shape_err!("max_pool: {} rows for {} children", x.rows(), map.child_rows()));
    }
    let c = x.cols();
    let parents = map.parent_rows();
    let mut features = Matrix::<T>::filled(parents, c, T::neg_infinity());
    let mut argmax = vec![usize::MAX; parents * c];
    for (child, &p) in map.assignment().iter().enumerate() {
        let src = x.row(child);
        let dst = features.row_mut(p);
        for ch in 0..c {
            // strict > keeps the earliest child on ties
            if argmax[p * c + ch] == usize::MAX || src[ch] > dst[ch] {
                dst[ch] = src[ch];
                argmax[p * c + ch] = child;
            }
        }
    }
    Ok((features, argmax))
}

/// Kernel-2 stride-2 max pooling on the sparse grid.
pub fn max_pool_down<T: Scalar>(grid: &SparseGrid, x: &Matrix<T>) -> Result<Pooled<T>> {
    if x.rows() != grid.len() {
        return Err(shape_err!("max_pool_down: {} rows for {} voxels", x.rows(), grid.len()));
    }
    let (coarse, map) = pool_grid(grid)?;
    let (features, argmax) = max_pool_with(&map, x)?;
    Ok(Pooled { grid: coarse, features, map, argmax })
}

/// Routes each parent gradient entirely to its argmax child.
pub fn max_pool_backward<T: Scalar>(pooled_argmax: &[usize], map: &PoolMap, dout: &Matrix<T>) -> Result<Matrix<T>> {
    if dout.rows() != map.parent_rows() || pooled_argmax.len() != dout.rows() * dout.cols() {
        return Err(shape_err!("max_pool_backward: {} rows for {} parents", dout.rows(), map.parent_rows()));
    }
    let c = dout.cols();
    let mut dx = Matrix::zeros(map.child_rows(), c);
    for p in 0..dout.rows() {
        for ch in 0..c {
            dx[(pooled_argmax[p * c + ch], ch)] += dout[(p, ch)];
        }
    }
    Ok(dx)
}

/// Copies each parent row to all of its children.
pub fn unpool<T: Scalar>(coarse: &Matrix<T>, map: &PoolMap) -> Result<Matrix<T>> {
    if coarse.rows() != map.parent_rows() {
        return Err(shape_err!("unpool: {} rows for {} parents", coarse.rows(), map.parent_rows()));
    }
    Ok(coarse.select_rows(map.assignment()))
}

/// Sums child gradients into their parents.
pub fn unpool_backward<T: Scalar>(dfine: &Matrix<T>, map: &PoolMap) -> Result<Matrix<T>> {
    if dfine.rows() != map.child_rows() {
        return Err(shape_err!("unpool_backward: {} rows for {} children", dfine.rows(), map.child_rows()));
    }
    let mut d = Matrix::zeros(map.parent_rows(), dfine.cols());
    for (child, &p) in map.assignment().iter().enumerate() {
        for (a, &g) in d.row_mut(p).iter_mut().zip(dfine.row(child)) {
            *a += g;
        }
    }
    Ok(d)
}
