//! Submanifold sparse 3×3×3 convolutions and the local structure enhancement module.

mod kernels;
mod lse;
mod neighbors;
mod resblock;

pub use kernels::{
    depthwise_sparse_conv, depthwise_sparse_conv_backward, sparse_conv, sparse_conv_backward, DepthwiseConv,
    SparseConv,
};
pub use lse::{Lse, LseCache};
pub use neighbors::{NeighborMap, CENTER_TAP, KERNEL_OFFSETS, KERNEL_VOLUME};
pub use resblock::{ResBlock, ResBlockCache};
