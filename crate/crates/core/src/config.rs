//! Flat `key=value` run configuration.
//!
//! Files hold one `key = value` pair per line; `#` starts a comment.
//! Command-line overrides use the same syntax and are applied in order,
//! so the last assignment of a key wins. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decode::{DecodeConfig, DecodeMode, DecoderUse};
use crate::error::{Error, Result};
use crate::frontend::{SpecAugConfig, SpecSubConfig, SynthConfig};
use crate::loss::LossWeights;
use crate::model::{ChunkMode, ChunkPolicy, ChunkPolicyMode, EncoderKind, ModelConfig, R2lImpl};
use crate::numerics::{Activation, Precision};
use crate::train::TrainConfig;

fn parse_scalar(raw: &str) -> Value {
    let s = raw.trim();
    if let Ok(b) = s.parse::<bool>() {
        return Value::Bool(b);
    }
    if let Ok(i) = s.parse::<u64>() {
        return Value::from(i);
    }
    if let Ok(i) = s.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(f) = s.parse::<f64>() {
        if f.is_finite() {
            return Value::from(f);
        }
    }
    Value::String(s.to_string())
}

/// Splits `key=value` lines into an ordered list, skipping blanks/comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Renders a flat serializable struct as `key=value` lines in field order.
pub fn to_kv<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config serializes");
    let Value::Object(map) = v else {
        panic!("flat config must serialize to a map");
    };
    let mut out = String::new();
    for (k, v) in map {
        let s = match v {
            Value::String(s) => s,
            other => other.to_string(),
        };
        out.push_str(&format!("{k}={s}\n"));
    }
    out
}

/// Builds a flat struct from `key=value` pairs on top of `base`.
pub fn from_pairs<T: Serialize + DeserializeOwned>(base: &T, pairs: &[(String, String)]) -> Result<T> {
    let Value::Object(mut map) = serde_json::to_value(base).expect("config serializes") else {
        panic!("flat config must serialize to a map");
    };
    for (k, v) in pairs {
        if !map.contains_key(k) {
            return Err(Error::Config(format!("unknown key '{k}'")));
        }
        map.insert(k.clone(), parse_scalar(v));
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))
}

pub fn from_kv<T: Serialize + DeserializeOwned + Default>(text: &str) -> Result<T> {
    from_pairs(&T::default(), &parse_pairs(text)?)
}

/// Serde helper: accept numbers or strings for a string-typed field.
pub(crate) mod lenient_string {
    use serde::{Deserialize, Deserializer};

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
        Ok(match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        })
    }
}

/// Every tunable of every subcommand. Defaults follow the published model
/// size where one exists; desk-scale recipes override them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub precision: String,

    // corpus
    #[serde(deserialize_with = "lenient_string::deserialize")]
    pub manifest: String,
    #[serde(deserialize_with = "lenient_string::deserialize")]
    pub valid_manifest: String,
    pub valid_fraction: f64,
    pub synth_utts: usize,
    pub synth_min_tokens: usize,
    pub synth_max_tokens: usize,
    pub synth_template_frames: usize,
    pub synth_max_gap: usize,
    pub synth_noise: f64,
    pub synth_max_frames: usize,

    // model
    pub feat_dim: usize,
    pub vocab: usize,
    pub encoder_kind: String,
    pub encoder_layers: usize,
    pub decoder_layers_l2r: usize,
    pub decoder_layers_r2l: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub conv_kernel: usize,
    pub activation: String,
    pub pos_enc: bool,
    pub r2l_impl: String,

    // training
    pub lambda: f64,
    pub alpha: f64,
    pub label_smoothing: f64,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub chunk_policy: String,
    #[serde(deserialize_with = "lenient_string::deserialize")]
    pub chunk_size: String,
    pub full_context_prob: f64,
    pub max_chunk: usize,
    pub checkpoint_every: usize,
    pub average_top_k: usize,
    pub spec_sub: bool,
    pub spec_sub_t_max: usize,
    pub spec_sub_t_min: usize,
    pub spec_sub_n_max: usize,
    pub spec_aug: bool,
    pub spec_aug_f_max: usize,
    pub spec_aug_num_f: usize,
    pub spec_aug_t_max: usize,
    pub spec_aug_num_t: usize,
    #[serde(deserialize_with = "lenient_string::deserialize")]
    pub resume_from: String,

    // decoding
    #[serde(deserialize_with = "lenient_string::deserialize")]
    pub checkpoint: String,
    pub mode: String,
    pub beam: usize,
    pub decode_lambda: f64,
    pub decode_alpha: f64,
    #[serde(deserialize_with = "lenient_string::deserialize")]
    pub decode_chunk: String,
    pub use_decoders: String,
    pub ar_max_len: usize,
    pub nbest_dump: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let d = DecodeConfig::default();
        let s = SynthConfig::default();
        let sub = SpecSubConfig::default();
        let aug = SpecAugConfig::default();
        Self {
            seed: 1,
            threads: 1,
            precision: "double".into(),
            manifest: String::new(),
            valid_manifest: String::new(),
            valid_fraction: 0.1,
            synth_utts: s.n_utts,
            synth_min_tokens: s.min_tokens,
            synth_max_tokens: s.max_tokens,
            synth_template_frames: s.template_frames,
            synth_max_gap: s.max_gap,
            synth_noise: s.noise,
            synth_max_frames: s.max_frames,
            feat_dim: m.feat_dim,
            vocab: m.vocab,
            encoder_kind: m.encoder_kind.as_str().into(),
            encoder_layers: m.encoder_layers,
            decoder_layers_l2r: m.decoder_layers_l2r,
            decoder_layers_r2l: m.decoder_layers_r2l,
            heads: m.heads,
            d_model: m.d_model,
            d_ffn: m.d_ffn,
            conv_kernel: m.conv_kernel,
            activation: "swish".into(),
            pos_enc: m.pos_enc,
            r2l_impl: m.r2l_impl.as_str().into(),
            lambda: t.weights.lambda,
            alpha: t.weights.alpha,
            label_smoothing: t.label_smoothing,
            base_lr: t.base_lr,
            warmup_steps: t.warmup_steps,
            max_steps: t.max_steps,
            batch_size: t.batch_size,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            grad_clip: t.grad_clip,
            chunk_policy: "dynamic".into(),
            chunk_size: "16".into(),
            full_context_prob: 0.5,
            max_chunk: 25,
            checkpoint_every: t.checkpoint_every,
            average_top_k: t.average_top_k,
            spec_sub: true,
            spec_sub_t_max: sub.t_max,
            spec_sub_t_min: sub.t_min,
            spec_sub_n_max: sub.n_max,
            spec_aug: true,
            spec_aug_f_max: aug.f_max,
            spec_aug_num_f: aug.num_f_masks,
            spec_aug_t_max: aug.t_mask_max,
            spec_aug_num_t: aug.num_t_masks,
            resume_from: String::new(),
            checkpoint: String::new(),
            mode: d.mode.as_str().into(),
            beam: d.beam,
            decode_lambda: d.lambda,
            decode_alpha: d.alpha,
            decode_chunk: "full".into(),
            use_decoders: d.use_decoders.as_str().into(),
            ar_max_len: 0,
            nbest_dump: false,
        }
    }
}

fn bad(key: &str, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {e}"))
}

impl RunConfig {
    /// Loads an optional config file and applies `key=value` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            pairs.extend(parse_pairs(&text)?);
        }
        for o in overrides {
            pairs.extend(parse_pairs(o)?);
        }
        let cfg: Self = from_pairs(&Self::default(), &pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        to_kv(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.precision()?;
        self.model_config()?.validate()?;
        if self.spec_aug && self.spec_aug_f_max > self.feat_dim {
            return Err(bad(
                "spec_aug_f_max",
                format!("{} exceeds feat_dim {}", self.spec_aug_f_max, self.feat_dim),
            ));
        }
        self.train_config()?;
        self.decode_config()?;
        Ok(())
    }

    pub fn precision(&self) -> Result<Precision> {
        match self.precision.as_str() {
            "double" => Ok(Precision::Double),
            "single" => Ok(Precision::Single),
            other => Err(bad("precision", format!("expected double|single, got '{other}'"))),
        }
    }

    pub fn manifest_path(&self) -> Option<PathBuf> {
        (!self.manifest.is_empty()).then(|| PathBuf::from(&self.manifest))
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_utts: self.synth_utts,
            vocab: self.vocab,
            feat_dim: self.feat_dim,
            min_tokens: self.synth_min_tokens,
            max_tokens: self.synth_max_tokens,
            template_frames: self.synth_template_frames,
            max_gap: self.synth_max_gap,
            noise: self.synth_noise,
            max_frames: self.synth_max_frames,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            feat_dim: self.feat_dim,
            vocab: self.vocab,
            encoder_kind: self.encoder_kind.parse::<EncoderKind>().map_err(|e| bad("encoder_kind", e))?,
            encoder_layers: self.encoder_layers,
            decoder_layers_l2r: self.decoder_layers_l2r,
            decoder_layers_r2l: self.decoder_layers_r2l,
            heads: self.heads,
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            conv_kernel: self.conv_kernel,
            activation: self.activation.parse::<Activation>().map_err(|e| bad("activation", e))?,
            pos_enc: self.pos_enc,
            r2l_impl: self.r2l_impl.parse::<R2lImpl>().map_err(|e| bad("r2l_impl", e))?,
            ..ModelConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn chunk_policy(&self) -> Result<ChunkPolicy> {
        let mode = match self.chunk_policy.as_str() {
            "full" => ChunkPolicyMode::Full,
            "fixed" => ChunkPolicyMode::Fixed(self.chunk_size.parse().map_err(|e| bad("chunk_size", e))?),
            "dynamic" => ChunkPolicyMode::Dynamic,
            other => return Err(bad("chunk_policy", format!("expected full|fixed|dynamic, got '{other}'"))),
        };
        let p = ChunkPolicy {
            mode,
            full_context_prob: self.full_context_prob,
            max_chunk: self.max_chunk,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            max_steps: self.max_steps,
            batch_size: self.batch_size,
            seed: self.seed,
            weights: LossWeights::new(self.lambda, self.alpha)?,
            label_smoothing: self.label_smoothing,
            adam: crate::train::AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            grad_clip: self.grad_clip,
            chunk_policy: self.chunk_policy()?,
            checkpoint_every: self.checkpoint_every,
            average_top_k: self.average_top_k,
            spec_sub: self.spec_sub.then_some(SpecSubConfig {
                t_max: self.spec_sub_t_max,
                t_min: self.spec_sub_t_min,
                n_max: self.spec_sub_n_max,
            }),
            spec_aug: self.spec_aug.then_some(SpecAugConfig {
                f_max: self.spec_aug_f_max,
                num_f_masks: self.spec_aug_num_f,
                t_mask_max: self.spec_aug_t_max,
                num_t_masks: self.spec_aug_num_t,
                fill: 0.0,
            }),
            precision: self.precision()?,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn decode_config(&self) -> Result<DecodeConfig> {
        let chunk = match self.decode_chunk.as_str() {
            "full" => ChunkMode::Full,
            n => ChunkMode::Fixed(n.parse().map_err(|e| bad("decode_chunk", e))?),
        };
        let d = DecodeConfig {
            beam: self.beam,
            lambda: self.decode_lambda,
            alpha: self.decode_alpha,
            mode: self.mode.parse::<DecodeMode>().map_err(|e| bad("mode", e))?,
            chunk,
            use_decoders: self.use_decoders.parse::<DecoderUse>().map_err(|e| bad("use_decoders", e))?,
            ar_max_len: (self.ar_max_len > 0).then_some(self.ar_max_len),
        };
        d.validate()?;
        Ok(d)
    }
}
