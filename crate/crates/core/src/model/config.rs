use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::numerics::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Transformer,
    Conformer,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Transformer => "transformer",
            EncoderKind::Conformer => "conformer",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "transformer" => Ok(Self::Transformer),
            "conformer" => Ok(Self::Conformer),
            o => Err(format!("unknown encoder kind '{o}'")),
        }
    }
}

/// How the right-to-left decoder sees its context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum R2lImpl {
    /// Tokens stay in reading order and self-attention uses the
    /// upper-triangular mask.
    RightMask,
    /// Tokens are reversed and self-attention uses the lower-triangular
    /// mask; differs from `RightMask` only in position encodings.
    ReversedInput,
}

impl R2lImpl {
    pub fn as_str(self) -> &'static str {
        match self {
            R2lImpl::RightMask => "right_mask",
            R2lImpl::ReversedInput => "reversed_input",
        }
    }
}

impl std::str::FromStr for R2lImpl {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "right_mask" => Ok(Self::RightMask),
            "reversed_input" => Ok(Self::ReversedInput),
            o => Err(format!("unknown r2l implementation '{o}'")),
        }
    }
}

mod activation_serde {
    use super::Activation;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(a: &Activation, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match a {
            Activation::Relu => "relu",
            Activation::Swish => "swish",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Activation, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Network shape. Defaults are the published 12-layer Conformer with two
/// 3-layer decoders; only the vocabulary and feature dim are placeholders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub vocab: usize,
    pub encoder_kind: EncoderKind,
    pub encoder_layers: usize,
    pub decoder_layers_l2r: usize,
    pub decoder_layers_r2l: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    /// Depthwise kernel of the (causal) conformer convolution.
    pub conv_kernel: usize,
    /// Non-linearity of feed-forward, convolution and subsampling blocks.
    #[serde(with = "activation_serde")]
    pub activation: Activation,
    /// Absolute sinusoidal position encoding on encoder and decoders.
    pub pos_enc: bool,
    pub r2l_impl: R2lImpl,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 80,
            vocab: 8,
            encoder_kind: EncoderKind::Conformer,
            encoder_layers: 12,
            decoder_layers_l2r: 3,
            decoder_layers_r2l: 3,
            heads: 4,
            d_model: 256,
            d_ffn: 2048,
            conv_kernel: 8,
            activation: Activation::Swish,
            pos_enc: true,
            r2l_impl: R2lImpl::RightMask,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 {
            return Err(usage(format!("vocab {} < 4 (blank, sos, eos, one label)", self.vocab)));
        }
        if self.feat_dim < 7 {
            return Err(usage(format!("feat_dim {} < 7 cannot survive subsampling", self.feat_dim)));
        }
        for (name, v) in [
            ("encoder_layers", self.encoder_layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("conv_kernel", self.conv_kernel),
        ] {
            if v == 0 {
                return Err(usage(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(usage(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn has_decoder(&self, dir: super::Direction) -> bool {
        match dir {
            super::Direction::L2r => self.decoder_layers_l2r > 0,
            super::Direction::R2l => self.decoder_layers_r2l > 0,
        }
    }
}

/// Attention context used for one encoder pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChunkMode {
    Full,
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ChunkPolicyMode {
    Full,
    Fixed(usize),
    /// Per batch: full context with `full_context_prob`, otherwise a chunk
    /// size drawn uniformly from `1..=max_chunk`.
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChunkPolicy {
    pub mode: ChunkPolicyMode,
    pub full_context_prob: f64,
    pub max_chunk: usize,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        Self {
            mode: ChunkPolicyMode::Dynamic,
            full_context_prob: 0.5,
            max_chunk: 25,
        }
    }
}

impl ChunkPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.full_context_prob) {
            return Err(usage("full_context_prob must lie in [0, 1]"));
        }
        match self.mode {
            ChunkPolicyMode::Fixed(0) => Err(usage("chunk size must be at least 1")),
            ChunkPolicyMode::Dynamic if self.max_chunk == 0 => Err(usage("max_chunk must be at least 1")),
            _ => Ok(()),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ChunkMode {
        match self.mode {
            ChunkPolicyMode::Full => ChunkMode::Full,
            ChunkPolicyMode::Fixed(n) => ChunkMode::Fixed(n),
            ChunkPolicyMode::Dynamic => {
                if rng.gen::<f64>() < self.full_context_prob {
                    ChunkMode::Full
                } else {
                    ChunkMode::Fixed(rng.gen_range(1..=self.max_chunk))
                }
            }
        }
    }
}
