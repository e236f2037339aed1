//! First-pass CTC search, bidirectional attention rescoring,
//! autoregressive decoder beam search and error-rate scoring.

mod ar_beam;
mod cer;
mod prefix_beam;
mod rescore;
mod transcript;

use std::cmp::Ordering;

pub use ar_beam::ar_beam_search;
pub use cer::{cer, edit_distance, CorpusCer};
pub use prefix_beam::{ctc_greedy, ctc_prefix_beam_search, PrefixBeamSearch, PrefixState};
pub use rescore::{fuse_scores, rescore};
pub use transcript::{nbest_line, read_nbest, read_transcript, transcript_line};

use crate::error::{usage, Result};
use crate::model::{ChunkMode, Direction, U2Model};
use crate::numerics::Tensor;

/// A candidate transcript with its per-source log-scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub s_ctc: Option<f64>,
    pub s_l2r: Option<f64>,
    pub s_r2l: Option<f64>,
    pub s_final: f64,
}

impl Hypothesis {
    pub fn from_ctc(tokens: Vec<usize>, s_ctc: f64) -> Self {
        Self {
            tokens,
            s_ctc: Some(s_ctc),
            s_l2r: None,
            s_r2l: None,
            s_final: s_ctc,
        }
    }
}

/// Higher score first; equal scores fall back to token-id order, which
/// also puts a prefix before its extensions.
pub(crate) fn rank(a_score: f64, a: &[usize], b_score: f64, b: &[usize]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.cmp(b))
}

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl std::str::FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!("unknown {} '{other}'", stringify!($name))),
                }
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    CtcGreedy,
    CtcPrefixBeam,
    AttentionRescore,
    ArBeamL2r,
    ArBeamR2l,
}

named_enum!(DecodeMode {
    CtcGreedy => "ctc_greedy",
    CtcPrefixBeam => "ctc_prefix_beam",
    AttentionRescore => "attention_rescore",
    ArBeamL2r => "ar_beam_l2r",
    ArBeamR2l => "ar_beam_r2l",
});

/// Which decoders contribute to rescoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderUse {
    Both,
    L2rOnly,
    R2lOnly,
}

named_enum!(DecoderUse {
    Both => "both",
    L2rOnly => "l2r_only",
    R2lOnly => "r2l_only",
});

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub mode: DecodeMode,
    pub chunk: ChunkMode,
    pub use_decoders: DecoderUse,
    /// Step limit of autoregressive search; defaults to the encoder length.
    pub ar_max_len: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 10,
            lambda: 0.5,
            alpha: 0.3,
            mode: DecodeMode::AttentionRescore,
            chunk: ChunkMode::Full,
            use_decoders: DecoderUse::Both,
            ar_max_len: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(usage("beam must be at least 1"));
        }
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(usage(format!("decode {name} must lie in [0, 1], got {v}")));
            }
        }
        if self.chunk == ChunkMode::Fixed(0) {
            return Err(usage("decode chunk must be at least 1"));
        }
        Ok(())
    }
}

/// Chosen transcript plus the candidate list it was selected from.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub best: Hypothesis,
    pub nbest: Vec<Hypothesis>,
}

pub fn decode_features(model: &U2Model, features: &Tensor, cfg: &DecodeConfig) -> Result<DecodeResult> {
    cfg.validate()?;
    let enc = model.encode(features, cfg.chunk)?;
    decode_encoded(model, &enc, cfg)
}

pub fn decode_encoded(model: &U2Model, enc: &Tensor, cfg: &DecodeConfig) -> Result<DecodeResult> {
    match cfg.mode {
        DecodeMode::CtcGreedy => {
            let best = ctc_greedy(&model.ctc_log_probs(enc)?);
            Ok(DecodeResult {
                nbest: vec![best.clone()],
                best,
            })
        }
        DecodeMode::CtcPrefixBeam => {
            let nbest = ctc_prefix_beam_search(&model.ctc_log_probs(enc)?, cfg.beam);
            Ok(DecodeResult {
                best: nbest[0].clone(),
                nbest,
            })
        }
        DecodeMode::AttentionRescore => {
            let first = ctc_prefix_beam_search(&model.ctc_log_probs(enc)?, cfg.beam);
            let nbest = rescore(&first, model, enc, cfg)?;
            Ok(DecodeResult {
                best: nbest[0].clone(),
                nbest,
            })
        }
        DecodeMode::ArBeamL2r | DecodeMode::ArBeamR2l => {
            let dir = if cfg.mode == DecodeMode::ArBeamL2r {
                Direction::L2r
            } else {
                Direction::R2l
            };
            let max_len = cfg.ar_max_len.unwrap_or(enc.rows());
            let best = ar_beam_search(model, enc, dir, cfg.beam, max_len)?;
            Ok(DecodeResult {
                nbest: vec![best.clone()],
                best,
            })
        }
    }
}
