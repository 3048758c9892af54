use super::config::{ModelConfig, Variant};
use crate::conv::NeighborMap;
use crate::error::{Error, Result};
use crate::geometry::{assign_windows, IGNORE_LABEL, pool_grid, voxelize, PointCloud, PoolMap, SparseGrid, WindowMap, WindowMode, WindowSpec};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Window partitions used by one block.
#[derive(Clone, Debug)]
pub enum WindowSet {
    Cubic(WindowMap),
    /// In merge order `(xy, yz, xz)`.
    Planes([WindowMap; 3]),
}

impl WindowSet {
    fn build(grid: &SparseGrid, variant: Variant, window_voxels: u32, slab_voxels: u32, shifted: bool) -> Result<Self> {
        Ok(if variant.is_planar() {
            let map = |m: WindowMode| -> Result<WindowMap> {
                Ok(assign_windows(grid, WindowSpec::new(m, window_voxels, slab_voxels, shifted)?))
            };
            let [a, b, c] = WindowMode::PLANES;
            WindowSet::Planes([map(a)?, map(b)?, map(c)?])
        } else {
            WindowSet::Cubic(assign_windows(grid, WindowSpec::new(WindowMode::Cubic, window_voxels, 1, shifted)?))
        })
    }

    pub fn maps(&self) -> Vec<&WindowMap> {
        match self {
            WindowSet::Cubic(m) => vec![m],
            WindowSet::Planes(ms) => ms.iter().collect(),
        }
    }
}

/// Everything about one stage that depends only on the voxel layout.
#[derive(Clone, Debug)]
pub struct StageGeometry {
    pub grid: SparseGrid,
    pub neighbors: NeighborMap,
    pub windows: WindowSet,
    /// Present only when shifting is enabled.
    pub shifted_windows: Option<WindowSet>,
    /// Map from the previous (finer) stage; `None` at stage 1.
    pub pool_from_prev: Option<PoolMap>,
}

impl StageGeometry {
    pub fn windows_for(&self, shifted: bool) -> &WindowSet {
        match (&self.shifted_windows, shifted) {
            (Some(s), true) => s,
            _ => &self.windows,
        }
    }
}

fn build_stages(finest: SparseGrid, cfg: &ModelConfig) -> Result<Vec<StageGeometry>> {
    let specs = cfg.stages();
    let mut stages: Vec<StageGeometry> = Vec::with_capacity(specs.len());
    for spec in &specs {
        let (grid, pool_from_prev) = match stages.last() {
            None => (finest.clone(), None),
            Some(prev) => {
                let (g, m) = pool_grid(&prev.grid)?;
                (g, Some(m))
            }
        };
        let windows = WindowSet::build(&grid, cfg.variant, spec.window_voxels, cfg.slab_voxels, false)?;
        let shifted_windows = (cfg.shift_enabled && spec.depth > 1)
            .then(|| WindowSet::build(&grid, cfg.variant, spec.window_voxels, cfg.slab_voxels, true))
            .transpose()?;
        stages.push(StageGeometry { neighbors: NeighborMap::new(&grid), grid, windows, shifted_windows, pool_from_prev });
    }
    Ok(stages)
}

/// A voxelized cloud with its stage hierarchy, ready for the network.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    /// Mean point features per finest voxel.
    pub features: Matrix<T>,
    pub voxel_labels: Vec<i64>,
    pub point_labels: Option<Vec<i64>>,
    pub point_to_voxel: Vec<usize>,
    pub stages: Vec<StageGeometry>,
}

impl<T: Scalar> Sample<T> {
    pub fn prepare(cloud: &PointCloud<T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        if cloud.features().cols() != cfg.in_channels {
            return Err(Error::Shape(format!(
                "cloud has {} feature channels, config expects {}",
                cloud.features().cols(),
                cfg.in_channels
            )));
        }
        let vox = voxelize(cloud, cfg.voxel_size)?;
        let stages = build_stages(vox.grid, cfg)?;
        Ok(Self {
            features: vox.features,
            voxel_labels: vox.labels,
            point_labels: cloud.labels().map(<[i64]>::to_vec),
            point_to_voxel: vox.point_to_voxel,
            stages,
        })
    }

    /// One point per voxel, already on `grid`.
    pub fn from_voxels(grid: SparseGrid, features: Matrix<T>, labels: Option<Vec<i64>>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        if features.rows() != grid.len() || features.cols() != cfg.in_channels {
            return Err(Error::Shape(format!(
                "{:?} features for {} voxels and {} channels",
                features.shape(),
                grid.len(),
                cfg.in_channels
            )));
        }
        if labels.as_ref().is_some_and(|l| l.len() != grid.len()) {
            return Err(Error::Shape("one label per voxel required".into()));
        }
        let m = grid.len();
        Ok(Self {
            features,
            voxel_labels: labels.clone().unwrap_or_else(|| vec![IGNORE_LABEL; m]),
            point_labels: labels,
            point_to_voxel: (0..m).collect(),
            stages: build_stages(grid, cfg)?,
        })
    }

    pub fn voxels(&self) -> usize {
        self.features.rows()
    }

    pub fn points(&self) -> usize {
        self.point_to_voxel.len()
    }
}
