use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which fusion block sits before the configured encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Context-aware attention for audio and video, gated fusion.
    #[serde(rename = "MAF")]
    Maf,
    /// Text⊕audio and text⊕video linear reprojections, gated fusion.
    Concat1,
    /// Text⊕audio⊕video through a single linear layer; no attention, no gates.
    Concat2,
    /// Plain dot-product cross-attention, gated fusion.
    #[serde(rename = "DPA")]
    Dpa,
    /// Context-aware attention with `H + H_a + H_v` instead of gates.
    #[serde(rename = "NoGIF")]
    NoGif,
    /// Adapter bypassed.
    TextOnly,
    /// Audio-only context-aware attention with one gate.
    #[serde(rename = "TA")]
    Ta,
    /// Video-only context-aware attention with one gate.
    #[serde(rename = "TV")]
    Tv,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Maf,
        Variant::Concat1,
        Variant::Concat2,
        Variant::Dpa,
        Variant::NoGif,
        Variant::TextOnly,
        Variant::Ta,
        Variant::Tv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Maf => "MAF",
            Variant::Concat1 => "Concat1",
            Variant::Concat2 => "Concat2",
            Variant::Dpa => "DPA",
            Variant::NoGif => "NoGIF",
            Variant::TextOnly => "TextOnly",
            Variant::Ta => "TA",
            Variant::Tv => "TV",
        }
    }

    pub fn uses_audio(self) -> bool {
        !matches!(self, Variant::TextOnly | Variant::Tv)
    }

    pub fn uses_video(self) -> bool {
        !matches!(self, Variant::TextOnly | Variant::Ta)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                ModelError::Config(format!(
                    "unknown variant {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Filled from the training vocabulary when zero.
    pub vocab_size: usize,
    pub d: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn: usize,
    pub heads: usize,
    /// The fusion block runs before this encoder layer (1-based).
    pub fusion_layer_index: usize,
    pub d_c_audio: usize,
    pub d_c_video: usize,
    /// Raw per-frame audio feature width accepted by the input projection.
    pub audio_input_dim: usize,
    /// Raw per-window video feature width.
    pub video_input_dim: usize,
    pub max_text_len: usize,
    /// Longer audio inputs are mean-pooled down to this many frames first.
    pub max_frames: usize,
    pub max_windows: usize,
    pub max_explanation_len: usize,
    pub variant: Variant,
    /// Heads inside the context-aware attention block.
    pub adapter_heads: usize,
    pub sigmoid_gates: bool,
    pub post_fusion_norm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn: 128,
            heads: 2,
            fusion_layer_index: 2,
            d_c_audio: 16,
            d_c_video: 32,
            audio_input_dim: 16,
            video_input_dim: 32,
            max_text_len: 32,
            max_frames: 64,
            max_windows: 32,
            max_explanation_len: 16,
            variant: Variant::Maf,
            adapter_heads: 1,
            sigmoid_gates: false,
            post_fusion_norm: false,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        let positive = [
            ("d", self.d),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("ffn", self.ffn),
            ("heads", self.heads),
            ("adapter_heads", self.adapter_heads),
            ("d_c_audio", self.d_c_audio),
            ("d_c_video", self.d_c_video),
            ("audio_input_dim", self.audio_input_dim),
            ("video_input_dim", self.video_input_dim),
            ("max_text_len", self.max_text_len),
            ("max_frames", self.max_frames),
            ("max_windows", self.max_windows),
            ("max_explanation_len", self.max_explanation_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if self.fusion_layer_index < 1 || self.fusion_layer_index > self.encoder_layers {
            return err(format!(
                "fusion_layer_index {} outside 1..={}",
                self.fusion_layer_index, self.encoder_layers
            ));
        }
        if !self.d.is_multiple_of(self.heads) {
            return err(format!(
                "d={} is not divisible by heads={}",
                self.d, self.heads
            ));
        }
        if !self.d.is_multiple_of(self.adapter_heads) {
            return err(format!(
                "d={} is not divisible by adapter_heads={}",
                self.d, self.adapter_heads
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn fusion_index_bounds() {
        for bad in [0, 3] {
            let cfg = ModelConfig {
                fusion_layer_index: bad,
                ..ModelConfig::default()
            };
            assert!(matches!(cfg.validate(), Err(ModelError::Config(_))));
        }
    }

    #[test]
    fn head_divisibility() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("maf".parse::<Variant>().is_ok());
        assert!("bogus".parse::<Variant>().is_err());
    }
}
