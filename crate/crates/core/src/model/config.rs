use serde::{Deserialize, Serialize};

use crate::attention::Merge;
use crate::error::{Error, Result};

/// Channel multipliers of the (up to four) encoder stages.
pub const STAGE_MULTIPLIERS: [usize; 4] = [1, 2, 4, 4];

/// Attention operator used inside every block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Single cubic window per block.
    Cubic,
    /// Three plane windows, no local structure enhancement.
    DaFormer,
    /// Three plane windows wrapped by two LSE modules.
    ConDaFormer,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Cubic, Variant::DaFormer, Variant::ConDaFormer];

    pub fn is_planar(self) -> bool {
        !matches!(self, Variant::Cubic)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cubic => "cubic",
            Variant::DaFormer => "daformer",
            Variant::ConDaFormer => "condaformer",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Blocks per stage; its length is the number of stages (1 to 4).
    pub depths: Vec<usize>,
    /// Channels per attention head.
    pub head_dim: usize,
    pub num_classes: usize,
    /// Finest voxel edge in meters; doubles at every stage.
    pub voxel_size: f64,
    /// Stage-1 window edge in meters; doubles at every stage.
    pub window_size: f64,
    pub mlp_ratio: usize,
    pub variant: Variant,
    pub rpe_share: bool,
    pub merge: Merge,
    pub shift_enabled: bool,
    pub slab_voxels: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 96,
            depths: vec![2, 2, 6, 2],
            head_dim: 16,
            num_classes: 20,
            voxel_size: 0.02,
            window_size: 0.16,
            mlp_ratio: 4,
            variant: Variant::ConDaFormer,
            rpe_share: true,
            merge: Merge::Split,
            shift_enabled: true,
            slab_voxels: 1,
        }
    }
}

/// Resolved per-stage hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSpec {
    pub channels: usize,
    pub heads: usize,
    pub depth: usize,
    pub voxel_size: f64,
    pub window_size: f64,
    pub window_voxels: u32,
}

impl ModelConfig {
    /// Smallest configuration meeting every divisibility rule: `C = 48`,
    /// two stages of one block each, three heads (one per plane) at stage 1.
    pub fn toy(num_classes: usize, variant: Variant) -> Self {
        Self {
            base_channels: 48,
            depths: vec![1, 1],
            num_classes,
            voxel_size: 0.1,
            window_size: 0.8,
            variant,
            ..Self::default()
        }
    }

    pub fn stages(&self) -> Vec<StageSpec> {
        self.depths
            .iter()
            .enumerate()
            .map(|(s, &depth)| {
                let channels = self.base_channels * STAGE_MULTIPLIERS[s.min(3)];
                let scale = f64::from(1u32 << s);
                let voxel_size = self.voxel_size * scale;
                let window_size = self.window_size * scale;
                StageSpec {
                    channels,
                    heads: if self.head_dim == 0 { 0 } else { channels / self.head_dim },
                    depth,
                    voxel_size,
                    window_size,
                    window_voxels: (window_size / voxel_size).round() as u32,
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.depths.is_empty() || self.depths.len() > STAGE_MULTIPLIERS.len() {
            return bad(format!("1 to 4 stages supported, got {}", self.depths.len()));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return bad("in_channels, num_classes and mlp_ratio must be positive".into());
        }
        if self.head_dim == 0 || self.base_channels % self.head_dim != 0 {
            return bad(format!("base_channels {} not a multiple of head_dim {}", self.base_channels, self.head_dim));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite() && self.window_size.is_finite()) {
            return bad("voxel_size and window_size must be positive and finite".into());
        }
        if self.slab_voxels == 0 {
            return bad("slab_voxels must be positive".into());
        }
        for (s, st) in self.stages().iter().enumerate() {
            let stage = s + 1;
            if st.depth == 0 {
                return bad(format!("stage {stage}: depth must be at least 1"));
            }
            if st.heads == 0 || st.channels % st.heads != 0 {
                return bad(format!("stage {stage}: {} channels, {} heads", st.channels, st.heads));
            }
            if st.window_voxels == 0 {
                return bad(format!("stage {stage}: window smaller than half a voxel"));
            }
            if self.variant == Variant::ConDaFormer && st.channels % 2 != 0 {
                return bad(format!("stage {stage}: LSE needs even channels, got {}", st.channels));
            }
            if self.variant.is_planar() && self.merge == Merge::Split {
                if st.channels % 3 != 0 || st.heads % 3 != 0 || (st.channels / 3) % (st.heads / 3) != 0 {
                    return bad(format!(
                        "stage {stage}: plane split needs channels and heads divisible by 3 ({} / {})",
                        st.channels, st.heads
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
