use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mask::{build_chunk_mask, build_left_mask, build_right_mask};
use super::params::{init_tensor, Binder, Init, ParamStore};
use super::{ChunkMode, EncoderKind, ModelConfig, R2lImpl};
use crate::error::{shape, usage, Result};
use crate::numerics::{Activation, AttentionMask, Graph, Tensor, Var};
use crate::{eos_id, sos_id};

const KERNEL: usize = 3;
const STRIDE: usize = 2;

/// Reading direction of an attention decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    L2r,
    R2l,
}

impl Direction {
    pub fn prefix(self) -> &'static str {
        match self {
            Direction::L2r => "decoder_l2r",
            Direction::R2l => "decoder_r2l",
        }
    }
}

fn conv_out(n: usize) -> Option<usize> {
    (n >= KERNEL).then(|| (n - KERNEL) / STRIDE + 1)
}

/// Frames left after the two valid stride-2 convolutions, or `None` if
/// the input is shorter than 7 frames.
pub fn subsampled_len(frames: usize) -> Option<usize> {
    conv_out(frames).and_then(conv_out)
}

/// Teacher-forcing input and target for one decoder. Right-to-left
/// sequences are reversed, then wrapped with the same sos/eos ids.
pub fn decoder_io(tokens: &[usize], dir: Direction, vocab: usize) -> (Vec<usize>, Vec<usize>) {
    let mut body = tokens.to_vec();
    if dir == Direction::R2l {
        body.reverse();
    }
    let mut input = Vec::with_capacity(body.len() + 1);
    input.push(sos_id(vocab));
    input.extend_from_slice(&body);
    body.push(eos_id(vocab));
    (input, body)
}

/// Sinusoidal table: `pe[p][2i] = sin(p / 10000^(2i/d))`, odd columns cos.
pub fn sinusoid_table(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        for i in 0..d {
            let expo = (2 * (i / 2)) as f64 / d as f64;
            let angle = p as f64 / 10000f64.powf(expo);
            data[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::raw(vec![len, d], data)
}

/// Shared encoder, CTC head and the two attention decoders.
#[derive(Clone, Debug, PartialEq)]
pub struct U2Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn linear_spec(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, fan_in: usize, fan_out: usize) {
    out.push((
        format!("{name}.weight"),
        vec![fan_in, fan_out],
        Init::Xavier { fan_in, fan_out },
    ));
    out.push((format!("{name}.bias"), vec![fan_out], Init::Zeros));
}

fn norm_spec(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize) {
    out.push((format!("{name}.gain"), vec![d], Init::Ones));
    out.push((format!("{name}.bias"), vec![d], Init::Zeros));
}

fn attn_spec(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        linear_spec(out, &format!("{name}.{p}"), d, d);
    }
}

fn ffn_spec(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize, ffn: usize) {
    linear_spec(out, &format!("{name}.in"), d, ffn);
    linear_spec(out, &format!("{name}.out"), ffn, d);
}

impl U2Model {
    /// Every parameter with its shape and initializer, in construction order.
    fn specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
        let (d, ffn, v) = (cfg.d_model, cfg.d_ffn, cfg.vocab);
        let f2 = subsampled_len(cfg.feat_dim).expect("validated feat_dim");
        let mut s = Vec::new();
        linear_spec(&mut s, "encoder.embed.conv1", KERNEL * KERNEL, d);
        linear_spec(&mut s, "encoder.embed.conv2", KERNEL * KERNEL * d, d);
        linear_spec(&mut s, "encoder.embed.out", f2 * d, d);
        for i in 0..cfg.encoder_layers {
            let p = format!("encoder.layers.{i}");
            if cfg.encoder_kind == EncoderKind::Conformer {
                norm_spec(&mut s, &format!("{p}.norm_ff_macaron"), d);
                ffn_spec(&mut s, &format!("{p}.ff_macaron"), d, ffn);
            }
            norm_spec(&mut s, &format!("{p}.norm_mha"), d);
            attn_spec(&mut s, &format!("{p}.mha"), d);
            if cfg.encoder_kind == EncoderKind::Conformer {
                norm_spec(&mut s, &format!("{p}.norm_conv"), d);
                linear_spec(&mut s, &format!("{p}.conv.pw1"), d, 2 * d);
                s.push((
                    format!("{p}.conv.dw.weight"),
                    vec![cfg.conv_kernel, d],
                    Init::Xavier {
                        fan_in: cfg.conv_kernel,
                        fan_out: cfg.conv_kernel,
                    },
                ));
                s.push((format!("{p}.conv.dw.bias"), vec![d], Init::Zeros));
                norm_spec(&mut s, &format!("{p}.conv.norm"), d);
                linear_spec(&mut s, &format!("{p}.conv.pw2"), d, d);
            }
            norm_spec(&mut s, &format!("{p}.norm_ff"), d);
            ffn_spec(&mut s, &format!("{p}.ff"), d, ffn);
            if cfg.encoder_kind == EncoderKind::Conformer {
                norm_spec(&mut s, &format!("{p}.norm_final"), d);
            }
        }
        norm_spec(&mut s, "encoder.norm", d);
        linear_spec(&mut s, "ctc", d, v);
        for dir in [Direction::L2r, Direction::R2l] {
            let layers = match dir {
                Direction::L2r => cfg.decoder_layers_l2r,
                Direction::R2l => cfg.decoder_layers_r2l,
            };
            if layers == 0 {
                continue;
            }
            let p = dir.prefix();
            s.push((
                format!("{p}.embed"),
                vec![v, d],
                Init::Uniform((3.0 / d as f64).sqrt()),
            ));
            for i in 0..layers {
                let l = format!("{p}.layers.{i}");
                norm_spec(&mut s, &format!("{l}.norm_self"), d);
                attn_spec(&mut s, &format!("{l}.self_attn"), d);
                norm_spec(&mut s, &format!("{l}.norm_src"), d);
                attn_spec(&mut s, &format!("{l}.src_attn"), d);
                norm_spec(&mut s, &format!("{l}.norm_ff"), d);
                ffn_spec(&mut s, &format!("{l}.ff"), d, ffn);
            }
            norm_spec(&mut s, &format!("{p}.norm"), d);
            linear_spec(&mut s, &format!("{p}.out"), d, v);
        }
        s
    }

    /// Freshly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shp, init) in Self::specs(&config) {
            params.insert(name, init_tensor(&shp, init, &mut rng));
        }
        Ok(Self { config, params })
    }

    /// Wraps existing weights after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut expected = ParamStore::new();
        for (name, shp, _) in Self::specs(&config) {
            expected.insert(name, Tensor::zeros(&shp));
        }
        expected.check_compatible(&params)?;
        Ok(Self { config, params })
    }

    pub fn decoder_param_count(&self, dir: Direction) -> usize {
        self.params.count_with_prefix(&format!("{}.", dir.prefix()))
    }

    fn linear(&self, g: &mut Graph, b: &mut Binder, x: Var, name: &str) -> Result<Var> {
        let w = b.get(g, &format!("{name}.weight"))?;
        let bias = b.get(g, &format!("{name}.bias"))?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, bias)
    }

    fn norm(&self, g: &mut Graph, b: &mut Binder, x: Var, name: &str) -> Result<Var> {
        let gain = b.get(g, &format!("{name}.gain"))?;
        let bias = b.get(g, &format!("{name}.bias"))?;
        g.layer_norm(x, gain, bias, self.config.ln_eps)
    }

    fn ffn(&self, g: &mut Graph, b: &mut Binder, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(g, b, x, &format!("{name}.in"))?;
        let h = g.act(h, self.config.activation);
        self.linear(g, b, h, &format!("{name}.out"))
    }

    fn attention(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        xq: Var,
        xkv: Var,
        mask: &AttentionMask,
        name: &str,
    ) -> Result<Var> {
        let q = self.linear(g, b, xq, &format!("{name}.q"))?;
        let k = self.linear(g, b, xkv, &format!("{name}.k"))?;
        let v = self.linear(g, b, xkv, &format!("{name}.v"))?;
        let heads = self.config.heads;
        let dk = self.config.d_model / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let vh = g.slice_cols(v, h * dk, dk)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let weights = g.masked_softmax(scores, mask)?;
            outs.push(g.matmul(weights, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.linear(g, b, cat, &format!("{name}.o"))
    }

    fn residual(&self, g: &mut Graph, x: Var, y: Var, weight: f64) -> Result<Var> {
        let y = if weight == 1.0 { y } else { g.scale(y, weight) };
        g.add(x, y)
    }

    /// Pointwise conv + GLU, causal depthwise conv, layer norm, activation,
    /// pointwise conv.
    fn conv_module(&self, g: &mut Graph, b: &mut Binder, x: Var, name: &str) -> Result<Var> {
        let d = self.config.d_model;
        let h = self.linear(g, b, x, &format!("{name}.pw1"))?;
        let a = g.slice_cols(h, 0, d)?;
        let gate = g.slice_cols(h, d, d)?;
        let gate = g.act(gate, Activation::Sigmoid);
        let h = g.mul(a, gate)?;
        let w = b.get(g, &format!("{name}.dw.weight"))?;
        let bias = b.get(g, &format!("{name}.dw.bias"))?;
        let h = g.causal_depthwise_conv(h, w, bias)?;
        let h = self.norm(g, b, h, &format!("{name}.norm"))?;
        let h = g.act(h, self.config.activation);
        self.linear(g, b, h, &format!("{name}.pw2"))
    }

    fn embed_positions(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let d = self.config.d_model;
        let x = g.scale(x, (d as f64).sqrt());
        if !self.config.pos_enc {
            return Ok(x);
        }
        let pe = g.constant(sinusoid_table(g.value(x).rows(), d));
        g.add(x, pe)
    }

    /// Two 3×3 stride-2 valid convolutions over (time, feature), then a
    /// projection to `d_model`.
    fn subsample(&self, g: &mut Graph, b: &mut Binder, features: &Tensor) -> Result<Var> {
        let (t, f) = (features.rows(), features.cols());
        if f != self.config.feat_dim {
            return Err(shape(format!(
                "features have {f} dims, model expects {}",
                self.config.feat_dim
            )));
        }
        let Some(t2) = subsampled_len(t) else {
            return Err(shape(format!("{t} frames is too short; at least 7 are needed")));
        };
        let d = self.config.d_model;
        let f1 = conv_out(f).expect("validated");
        let f2 = conv_out(f1).expect("validated");
        let act = self.config.activation;

        let x = g.constant(features.clone());
        let p1 = g.im2col(x, f, 1, KERNEL, STRIDE)?;
        let h1 = self.linear(g, b, p1, "encoder.embed.conv1")?;
        let h1 = g.act(h1, act);
        let p2 = g.im2col(h1, f1, d, KERNEL, STRIDE)?;
        let h2 = self.linear(g, b, p2, "encoder.embed.conv2")?;
        let h2 = g.act(h2, act);
        let h2 = g.reshape(h2, &[t2, f2 * d])?;
        self.linear(g, b, h2, "encoder.embed.out")
    }

    pub fn encode_graph(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        features: &Tensor,
        chunk: ChunkMode,
    ) -> Result<Var> {
        let x = self.subsample(g, b, features)?;
        let mut x = self.embed_positions(g, x)?;
        let t2 = g.value(x).rows();
        let mask = match chunk {
            ChunkMode::Full => AttentionMask::full(t2, t2),
            ChunkMode::Fixed(0) => return Err(usage("chunk size must be at least 1")),
            ChunkMode::Fixed(c) => build_chunk_mask(t2, c),
        };
        let conformer = self.config.encoder_kind == EncoderKind::Conformer;
        for i in 0..self.config.encoder_layers {
            let p = format!("encoder.layers.{i}");
            if conformer {
                let h = self.norm(g, b, x, &format!("{p}.norm_ff_macaron"))?;
                let h = self.ffn(g, b, h, &format!("{p}.ff_macaron"))?;
                x = self.residual(g, x, h, 0.5)?;
            }
            let h = self.norm(g, b, x, &format!("{p}.norm_mha"))?;
            let h = self.attention(g, b, h, h, &mask, &format!("{p}.mha"))?;
            x = self.residual(g, x, h, 1.0)?;
            if conformer {
                let h = self.norm(g, b, x, &format!("{p}.norm_conv"))?;
                let h = self.conv_module(g, b, h, &format!("{p}.conv"))?;
                x = self.residual(g, x, h, 1.0)?;
            }
            let h = self.norm(g, b, x, &format!("{p}.norm_ff"))?;
            let h = self.ffn(g, b, h, &format!("{p}.ff"))?;
            x = self.residual(g, x, h, if conformer { 0.5 } else { 1.0 })?;
            if conformer {
                x = self.norm(g, b, x, &format!("{p}.norm_final"))?;
            }
        }
        self.norm(g, b, x, "encoder.norm")
    }

    pub fn ctc_graph(&self, g: &mut Graph, b: &mut Binder, enc: Var) -> Result<Var> {
        let logits = self.linear(g, b, enc, "ctc")?;
        Ok(g.log_softmax(logits))
    }

    /// Self-attention mask the decoder applies in its own token order.
    pub fn default_self_mask(&self, dir: Direction, len: usize) -> AttentionMask {
        match (dir, self.config.r2l_impl) {
            (Direction::R2l, R2lImpl::RightMask) => build_right_mask(len),
            _ => build_left_mask(len),
        }
    }

    /// Teacher-forced decoder pass; rows are log-distributions aligned
    /// with `tokens_in` (reversed order for the right-to-left decoder).
    pub fn decoder_graph(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        enc: Var,
        tokens_in: &[usize],
        dir: Direction,
    ) -> Result<Var> {
        self.decoder_graph_masked(g, b, enc, tokens_in, dir, &|len| self.default_self_mask(dir, len))
    }

    /// [`Self::decoder_graph`] with a caller-supplied self-attention mask
    /// builder (used by the verification suites).
    pub fn decoder_graph_masked(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        enc: Var,
        tokens_in: &[usize],
        dir: Direction,
        self_mask: &dyn Fn(usize) -> AttentionMask,
    ) -> Result<Var> {
        if !self.config.has_decoder(dir) {
            return Err(usage(format!("{} has no layers", dir.prefix())));
        }
        let v = self.config.vocab;
        if tokens_in.is_empty() {
            return Err(usage("decoder input must start with sos"));
        }
        if let Some(&bad) = tokens_in.iter().find(|&&k| k >= v) {
            return Err(usage(format!("token id {bad} outside vocabulary of {v}")));
        }
        let flip = dir == Direction::R2l && self.config.r2l_impl == R2lImpl::RightMask;
        let len = tokens_in.len();
        let order: Vec<usize> = if flip {
            tokens_in.iter().rev().copied().collect()
        } else {
            tokens_in.to_vec()
        };
        let p = dir.prefix();
        let layers = match dir {
            Direction::L2r => self.config.decoder_layers_l2r,
            Direction::R2l => self.config.decoder_layers_r2l,
        };

        let table = b.get(g, &format!("{p}.embed"))?;
        let x = g.gather_rows(table, &order)?;
        let mut x = self.embed_positions(g, x)?;
        let mask = self_mask(len);
        let src_mask = AttentionMask::full(len, g.value(enc).rows());
        for i in 0..layers {
            let l = format!("{p}.layers.{i}");
            let h = self.norm(g, b, x, &format!("{l}.norm_self"))?;
            let h = self.attention(g, b, h, h, &mask, &format!("{l}.self_attn"))?;
            x = self.residual(g, x, h, 1.0)?;
            let h = self.norm(g, b, x, &format!("{l}.norm_src"))?;
            let h = self.attention(g, b, h, enc, &src_mask, &format!("{l}.src_attn"))?;
            x = self.residual(g, x, h, 1.0)?;
            let h = self.norm(g, b, x, &format!("{l}.norm_ff"))?;
            let h = self.ffn(g, b, h, &format!("{l}.ff"))?;
            x = self.residual(g, x, h, 1.0)?;
        }
        let x = self.norm(g, b, x, &format!("{p}.norm"))?;
        let logits = self.linear(g, b, x, &format!("{p}.out"))?;
        let lp = g.log_softmax(logits);
        if flip {
            let rev: Vec<usize> = (0..len).rev().collect();
            g.permute_rows(lp, &rev)
        } else {
            Ok(lp)
        }
    }

    pub fn encode(&self, features: &Tensor, chunk: ChunkMode) -> Result<Tensor> {
        let mut g = Graph::default();
        let mut b = Binder::frozen(&self.params);
        let enc = self.encode_graph(&mut g, &mut b, features, chunk)?;
        Ok(g.value(enc).clone())
    }

    pub fn ctc_log_probs(&self, enc: &Tensor) -> Result<Tensor> {
        let mut g = Graph::default();
        let mut b = Binder::frozen(&self.params);
        let e = g.constant(enc.clone());
        let lp = self.ctc_graph(&mut g, &mut b, e)?;
        Ok(g.value(lp).clone())
    }

    pub fn decoder_forward(&self, enc: &Tensor, tokens_in: &[usize], dir: Direction) -> Result<Tensor> {
        let mut g = Graph::default();
        let mut b = Binder::frozen(&self.params);
        let e = g.constant(enc.clone());
        let lp = self.decoder_graph(&mut g, &mut b, e, tokens_in, dir)?;
        Ok(g.value(lp).clone())
    }

    /// Teacher-forced log-probability of `tokens` followed by eos.
    pub fn score_sequence(&self, enc: &Tensor, tokens: &[usize], dir: Direction) -> Result<f64> {
        let (input, target) = decoder_io(tokens, dir, self.config.vocab);
        let lp = self.decoder_forward(enc, &input, dir)?;
        Ok(target.iter().enumerate().map(|(i, &k)| lp.at(i, k)).sum())
    }
}
