use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featstore::AlignPolicy;
use crate::objectives::LossKind;

/// Which streams feed the model and how.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    VisualOnly,
    AudioOnly,
    /// Streams aligned on the visual timeline and concatenated feature-wise.
    Concat,
    /// One encoder stack per modality, each attending to the other.
    CrossAttention,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual_only" => Ok(FusionMode::VisualOnly),
            "audio_only" => Ok(FusionMode::AudioOnly),
            "concat" => Ok(FusionMode::Concat),
            "cross_attention" => Ok(FusionMode::CrossAttention),
            other => Err(Error::config("fusion", format!("unknown fusion mode `{other}`"))),
        }
    }
}

/// Sequence model used for single-input fusion modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Temporal conv front-end + transformer encoder.
    Te,
    /// Seven-block 1-D residual network.
    Resnet1d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
    pub loss_kind: LossKind,
    pub fusion_mode: FusionMode,
    pub max_epochs: usize,
    pub seed: u64,
    pub backbone: Backbone,
    pub positional_encoding: bool,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub visual_streams: Vec<String>,
    pub audio_streams: Vec<String>,
    pub align: AlignPolicy,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 1e-3,
            batch_size: 8,
            hidden_dim: 64,
            num_heads: 4,
            num_layers: 2,
            conv_kernel: 3,
            dropout: 0.1,
            loss_kind: LossKind::Mse,
            fusion_mode: FusionMode::VisualOnly,
            max_epochs: 10,
            seed: 0,
            backbone: Backbone::Te,
            positional_encoding: true,
            patience: 3,
            visual_streams: vec!["visual".into()],
            audio_streams: vec!["audio".into()],
            align: AlignPolicy::Nearest,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: String| Err(Error::config(f, m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be >= 1".into());
        }
        if self.loss_kind == LossKind::Pcc && self.batch_size < 2 {
            return bad("batch_size", "PCC loss needs batches of at least 2".into());
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad(
                "hidden_dim",
                format!(
                    "{} is not divisible by num_heads = {}",
                    self.hidden_dim, self.num_heads
                ),
            );
        }
        if self.num_layers == 0 && self.backbone == Backbone::Te {
            return bad("num_layers", "must be >= 1".into());
        }
        if self.conv_kernel % 2 == 0 {
            return bad("conv_kernel", format!("must be odd, got {}", self.conv_kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("must be in [0, 1), got {}", self.dropout));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be >= 1".into());
        }
        if self.backbone == Backbone::Resnet1d && self.fusion_mode == FusionMode::CrossAttention {
            return bad("backbone", "resnet1d cannot be used with cross_attention fusion".into());
        }
        let needs_visual = self.fusion_mode != FusionMode::AudioOnly;
        let needs_audio = matches!(
            self.fusion_mode,
            FusionMode::AudioOnly | FusionMode::Concat | FusionMode::CrossAttention
        );
        if needs_visual && self.visual_streams.is_empty() {
            return bad("visual_streams", "fusion mode needs at least one visual stream".into());
        }
        if needs_audio && self.audio_streams.is_empty() {
            return bad("audio_streams", "fusion mode needs at least one audio stream".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn ff_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        Hyperparams::default().validate().unwrap();
    }

    #[test]
    fn head_arithmetic_and_divisibility() {
        let hp = Hyperparams {
            hidden_dim: 512,
            num_heads: 8,
            ..Default::default()
        };
        hp.validate().unwrap();
        assert_eq!(hp.head_dim(), 64);
        let bad = Hyperparams {
            hidden_dim: 510,
            ..hp
        };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("hidden_dim"), "{err}");
    }

    #[test]
    fn pcc_needs_batches_of_two() {
        let hp = Hyperparams {
            loss_kind: LossKind::Pcc,
            batch_size: 1,
            ..Default::default()
        };
        assert!(hp.validate().is_err());
    }

    #[test]
    fn other_invariants() {
        let base = Hyperparams::default();
        for hp in [
            Hyperparams { learning_rate: 0.0, ..base.clone() },
            Hyperparams { batch_size: 0, ..base.clone() },
            Hyperparams { conv_kernel: 4, ..base.clone() },
            Hyperparams { dropout: 1.0, ..base.clone() },
            Hyperparams { max_epochs: 0, ..base.clone() },
        ] {
            assert!(hp.validate().is_err(), "{hp:?}");
        }
    }

    #[test]
    fn partial_json_fills_defaults() {
        let hp: Hyperparams = serde_json::from_str(r#"{"hidden_dim": 32, "loss_kind": "pcc"}"#).unwrap();
        assert_eq!(hp.hidden_dim, 32);
        assert_eq!(hp.loss_kind, LossKind::Pcc);
        assert_eq!(hp.num_heads, 4);
    }
}
