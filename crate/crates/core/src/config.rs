//! Model configuration, loadable from JSON.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msformer::AttentionMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Flags {
    pub structure_branch: bool,
    pub motion_compensation: bool,
    pub attention_mode: AttentionMode,
    pub refine_net: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Flags {
            structure_branch: true,
            motion_compensation: true,
            attention_mode: AttentionMode::DualCross,
            refine_net: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Feature width at each of the three U-Net resolutions.
    pub channels: Vec<usize>,
    /// Resolution reduction between consecutive U-Net stages.
    pub divisor: usize,
    /// Neighborhood size of the point-transformer blocks.
    pub attn_k: usize,
    /// Neighborhood size of the downsampling max-pool.
    pub pool_k: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            channels: vec![16, 32, 48],
            divisor: 4,
            attn_k: 16,
            pool_k: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub points: usize,
    pub divisors: Vec<usize>,
    pub channels: Vec<usize>,
    pub attn_dim: usize,
    pub knn_k: usize,
    pub cost_channels: usize,
    pub predictor_channels: usize,
    pub upsample_k: usize,
    pub fusion_k: usize,
    pub fusion_hidden: usize,
    pub refine: RefineConfig,
    pub flags: Flags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            points: 1024,
            divisors: vec![1, 4, 32],
            channels: vec![32, 64, 128],
            attn_dim: 64,
            knn_k: 8,
            cost_channels: 32,
            predictor_channels: 64,
            upsample_k: 3,
            fusion_k: 8,
            fusion_hidden: 16,
            refine: RefineConfig::default(),
            flags: Flags::default(),
        }
    }
}

impl ModelConfig {
    /// Full-resolution variant with wider layers.
    pub fn paper_scale() -> Self {
        ModelConfig {
            points: 8192,
            channels: vec![64, 128, 256],
            attn_dim: 128,
            cost_channels: 64,
            predictor_channels: 128,
            refine: RefineConfig {
                channels: vec![32, 64, 128],
                ..RefineConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    /// Small widths for gradient checks and fast tests.
    pub fn tiny(points: usize) -> Self {
        ModelConfig {
            points,
            channels: vec![4, 5, 6],
            attn_dim: 3,
            knn_k: 4,
            cost_channels: 4,
            predictor_channels: 4,
            fusion_k: 4,
            fusion_hidden: 4,
            refine: RefineConfig {
                channels: vec![3, 4, 5],
                divisor: 2,
                attn_k: 4,
                pool_k: 3,
            },
            ..ModelConfig::default()
        }
    }

    /// Point count of every pyramid level.
    pub fn level_sizes(&self) -> Vec<usize> {
        self.divisors.iter().map(|d| self.points / d).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.divisors.len() != 3 || self.channels.len() != 3 {
            return bad(format!(
                "expected 3 divisors and 3 channel widths, got {:?} and {:?}",
                self.divisors, self.channels
            ));
        }
        if self.divisors[0] != 1 || self.divisors.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("divisors {:?} must start at 1 and strictly increase", self.divisors));
        }
        if self.points / self.divisors[2] == 0 {
            return bad(format!(
                "{} points leave no points at divisor {}",
                self.points, self.divisors[2]
            ));
        }
        let widths = [
            ("attn_dim", self.attn_dim),
            ("knn_k", self.knn_k),
            ("cost_channels", self.cost_channels),
            ("predictor_channels", self.predictor_channels),
            ("upsample_k", self.upsample_k),
            ("fusion_k", self.fusion_k),
            ("fusion_hidden", self.fusion_hidden),
            ("refine.divisor", self.refine.divisor),
            ("refine.attn_k", self.refine.attn_k),
            ("refine.pool_k", self.refine.pool_k),
        ];
        for (name, v) in widths {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.channels.contains(&0) || self.refine.channels.len() != 3 || self.refine.channels.contains(&0) {
            return bad("channel widths must be positive, with 3 refine widths".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_partial_configs() {
        let cfg = ModelConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&text).unwrap(), cfg);
        let partial: ModelConfig = serde_json::from_str(r#"{"points": 256, "flags": {"attention_mode": "self"}}"#).unwrap();
        assert_eq!(partial.points, 256);
        assert_eq!(partial.flags.attention_mode, AttentionMode::SelfAttention);
        assert!(partial.flags.refine_net);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"pionts": 3}"#).is_err());
    }

    #[test]
    fn level_sizes_follow_divisors() {
        assert_eq!(ModelConfig::default().level_sizes(), vec![1024, 256, 32]);
        assert_eq!(ModelConfig::paper_scale().level_sizes(), vec![8192, 2048, 256]);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::tiny(32).validate().is_ok());
        let mut c = ModelConfig::default();
        c.divisors = vec![1, 32, 4];
        assert!(c.validate().is_err());
        c = ModelConfig::default();
        c.points = 16;
        assert!(c.validate().is_err());
    }
}
