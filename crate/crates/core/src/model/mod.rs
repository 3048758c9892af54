//! Network assembly: configuration, per-cloud geometry, the attention
//! operator and block, the U-Net encoder/decoder, and training.

mod block;
mod config;
mod network;
mod op;
mod sample;
mod train;

pub use block::{Block, BlockCache};
pub use config::{ModelConfig, StageSpec, Variant, STAGE_MULTIPLIERS};
pub use network::{
    points_to_voxels_backward, DecoderCache, DecoderLevel, Embedding, EncoderCache, EncoderOutput, ForwardCache,
    Network, Stage,
};
pub use op::{AttentionOp, AttentionOpCache, Mixer};
pub use sample::{Sample, StageGeometry, WindowSet};
pub use train::{batch_loss_and_grads, eval_loss, final_epoch_loss, fit, predict, train_step, TrainConfig};
