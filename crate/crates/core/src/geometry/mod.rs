//! Voxel geometry: point clouds, sparse grids, window partitions and pooling.

mod cloud;
mod grid;
mod pool;
mod scene_io;
mod window;

pub use cloud::{voxelize, voxelize_with_origin, PointCloud, Voxelized};
pub use grid::{Coord, SparseGrid};
pub use pool::{max_pool_backward, max_pool_down, max_pool_with, pool_grid, unpool, unpool_backward, PoolMap, Pooled};
pub use scene_io::{format_scene, parse_scene, read_scene, write_scene, IGNORE_LABEL};
pub use window::{assign_windows, WindowGroup, WindowMap, WindowMode, WindowSpec};
