//! Verification and experiment tooling: finite-difference oracle and its
//! suite, attention pair counting and timing, synthetic scenes and metrics.

pub mod bench;
pub mod gradcheck;
mod metrics;
mod pairs;
mod scene;
pub mod suite;

pub use gradcheck::{finite_diff_grad, rel_err, BlockReport, GradCheckOptions, GradCheckReport, FD_STEP, INVARIANT_TOLERANCE};
pub use metrics::{miou, SegMetrics};
pub use pairs::{brute_force_pairs, count_attention_pairs, count_grid_pairs, predicted_ratio, ModeCount, PairCountReport};
pub use scene::{gen_scene, SceneRecipe};
pub use suite::{run_suite, SuiteOptions};
