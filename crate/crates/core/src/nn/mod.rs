//! Dense layers with hand-written backward passes, AdamW, and checkpoints.

pub mod checkpoint;
pub mod functional;
mod layers;
mod optim;
mod params;

pub use functional::Mode;
pub use layers::{BatchNorm, BatchNormCache, Ctx, LayerNorm, Linear, Mlp, MlpCache};
pub use optim::AdamW;
pub use params::{init_params, Grads, InitScheme, ParamBlock, ParamId, ParamKind, ParamStore};
