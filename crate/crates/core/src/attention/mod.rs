//! Window self-attention with contextual relative position encoding: the
//! cubic-window baseline and the three-plane disassembled operator.

mod kernel;
mod modules;
mod rpe;

pub use kernel::{window_attention, window_attention_backward, AttentionKernelCache, KernelGrads};
pub use modules::{
    CubicAttention, CubicAttentionCache, DisassembledAttention, DisassembledCache, Merge, PlaneAttention,
    PlaneAttentionCache,
};
pub use rpe::{rpe_bin, RpeTables, RpeView};
