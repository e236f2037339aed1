use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles::{
    brute_force_ctc_log_prob, brute_force_prefix_log_probs, random_log_probs, spec_sub_replay,
};
use super::{Fault, SuiteReport};
use crate::decode::{ctc_prefix_beam_search, PrefixBeamSearch};
use crate::error::Result;
use crate::frontend::{spec_sub_traced, SpecSubConfig, Utterance};
use crate::loss::{ctc_loss, LossWeights};
use crate::model::{
    build_left_mask, decoder_io, Binder, ChunkMode, Direction, EncoderKind, ModelConfig, R2lImpl, U2Model,
};
use crate::numerics::{Activation, AttentionMask, Graph, Precision, Tensor};
use crate::train::batch_loss;

struct Tally {
    name: &'static str,
    cases: usize,
    max_error: f64,
    tolerance: f64,
    failures: Vec<String>,
    start: Instant,
}

impl Tally {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            cases: 0,
            max_error: 0.0,
            tolerance,
            failures: Vec::new(),
            start: Instant::now(),
        }
    }

    /// Records one comparison; `what` is only formatted on failure.
    fn check(&mut self, err: f64, what: impl FnOnce() -> String) {
        let err = if err.is_nan() { f64::INFINITY } else { err };
        self.max_error = self.max_error.max(err);
        if err > self.tolerance {
            self.failures.push(format!("{} (error {err:.3e})", what()));
        }
    }

    fn fail(&mut self, msg: String) {
        self.failures.push(msg);
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            name: self.name,
            cases: self.cases,
            max_error: self.max_error,
            tolerance: self.tolerance,
            failures: self.failures,
            elapsed: self.start.elapsed(),
        }
    }
}

fn random_labels<R: Rng>(rng: &mut R, len: usize, first: usize, last: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(first..=last)).collect()
}

/// CTC loss against summing all V^T alignments.
pub fn ctc_suite(seed: u64, cases: usize) -> SuiteReport {
    let mut tally = Tally::new("ctc", 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc7c);
    for case in 0..cases {
        let t_len = rng.gen_range(1..=6);
        let v = rng.gen_range(2..=4);
        let len = rng.gen_range(0..=3);
        let target = random_labels(&mut rng, len, 1, v - 1);
        let lp = random_log_probs(&mut rng, t_len, v);
        let expect = -brute_force_ctc_log_prob(&lp, &target);
        tally.cases += 1;
        match ctc_loss(&lp, &target) {
            Ok(got) if got.is_infinite() && expect.is_infinite() => tally.check(0.0, String::new),
            Ok(got) => tally.check((got - expect).abs(), || {
                format!("case {case}: T={t_len} V={v} y={target:?}: {got} vs {expect}")
            }),
            Err(e) => tally.fail(format!("case {case}: {e}")),
        }
    }
    tally.finish()
}

/// Model used by the gradient suite: every block type, small enough for
/// finite differences.
pub fn gradient_toy_config() -> ModelConfig {
    ModelConfig {
        feat_dim: 8,
        vocab: 6,
        encoder_kind: EncoderKind::Conformer,
        encoder_layers: 2,
        decoder_layers_l2r: 1,
        decoder_layers_r2l: 1,
        heads: 2,
        d_model: 16,
        d_ffn: 24,
        conv_kernel: 3,
        activation: Activation::Swish,
        pos_enc: true,
        r2l_impl: R2lImpl::RightMask,
        ln_eps: 1e-5,
    }
}

fn random_features<R: Rng>(rng: &mut R, frames: usize, feat_dim: usize) -> Tensor {
    let data = (0..frames * feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![frames, feat_dim], data).expect("positive extents")
}

fn toy_batch<R: Rng>(rng: &mut R, cfg: &ModelConfig, n: usize) -> Vec<Utterance> {
    (0..n)
        .map(|i| {
            let frames = rng.gen_range(15..=19);
            let len = rng.gen_range(1..=2);
            Utterance {
                id: format!("probe{i}"),
                features: random_features(rng, frames, cfg.feat_dim),
                tokens: random_labels(rng, len, 1, cfg.vocab - 3),
            }
        })
        .collect()
}

/// Backpropagated gradient of the joint loss against central differences,
/// on a few random entries of every parameter tensor per seed.
/// Error is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3)`.
pub fn gradient_suite(seed: u64, seeds: usize) -> SuiteReport {
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-3;
    const ENTRIES: usize = 3;
    let mut tally = Tally::new("gradient", 1e-5);
    let cfg = gradient_toy_config();
    let weights = LossWeights::new(0.3, 0.3).expect("valid weights");
    let chunks = [ChunkMode::Full, ChunkMode::Fixed(1), ChunkMode::Fixed(2)];
    for s in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(s as u64));
        let mut run = || -> Result<()> {
            let mut model = U2Model::new(cfg.clone(), rng.gen())?;
            // Move norms and biases off their initial constants.
            for (_, t) in model.params.iter_mut() {
                for x in t.data_mut() {
                    *x += rng.gen_range(-0.1..0.1);
                }
            }
            let batch = toy_batch(&mut rng, &cfg, 2);
            let chunk = chunks[s % chunks.len()];
            let loss = |m: &U2Model| -> Result<f64> {
                Ok(batch_loss(m, &batch, chunk, weights, 0.1, Precision::Double, false)?.losses.l_combined)
            };
            let analytic = batch_loss(&model, &batch, chunk, weights, 0.1, Precision::Double, true)?.grads;
            let names: Vec<String> = model.params.names().cloned().collect();
            for name in names {
                let n = model.params.get(&name).map_or(0, Tensor::len);
                for i in sample(&mut rng, n, ENTRIES.min(n)).into_iter() {
                    let orig = model.params.get(&name).unwrap().data()[i];
                    model.params.get_mut(&name).unwrap().data_mut()[i] = orig + STEP;
                    let up = loss(&model)?;
                    model.params.get_mut(&name).unwrap().data_mut()[i] = orig - STEP;
                    let down = loss(&model)?;
                    model.params.get_mut(&name).unwrap().data_mut()[i] = orig;
                    let numeric = (up - down) / (2.0 * STEP);
                    let a = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
                    let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
                    tally.cases += 1;
                    tally.check(err, || format!("seed {s} {name}[{i}]: analytic {a:.6e} numeric {numeric:.6e}"));
                }
            }
            Ok(())
        };
        if let Err(e) = run() {
            tally.fail(format!("seed {s}: {e}"));
        }
    }
    tally.finish()
}

/// Prefix beam search with an all-covering beam against exhaustive path
/// sums, plus frame-by-frame feeding against whole-matrix search.
pub fn prefix_beam_suite(seed: u64, cases: usize) -> SuiteReport {
    let mut tally = Tally::new("prefix_beam", 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbea3);
    for case in 0..cases {
        let t_len = rng.gen_range(1..=6);
        let v = rng.gen_range(2..=4);
        let lp = random_log_probs(&mut rng, t_len, v);
        let exact = brute_force_prefix_log_probs(&lp);
        let hyps = ctc_prefix_beam_search(&lp, exact.len() + 1);
        tally.cases += 1;
        if hyps.len() != exact.len() {
            tally.fail(format!("case {case}: beam holds {} prefixes, expected {}", hyps.len(), exact.len()));
        }
        for h in &hyps {
            let got = h.s_ctc.unwrap_or(f64::NAN);
            match exact.get(&h.tokens) {
                Some(&e) => {
                    tally.check((got - e).abs(), || format!("case {case}: prefix {:?}", h.tokens));
                    let l = ctc_loss(&lp, &h.tokens).map(|x| -x).unwrap_or(f64::NAN);
                    tally.check((l - got).abs(), || {
                        format!("case {case}: prefix {:?} disagrees with ctc_loss", h.tokens)
                    });
                }
                None => tally.fail(format!("case {case}: unreachable prefix {:?}", h.tokens)),
            }
        }
        for beam in [1, 2, 3] {
            let batch = ctc_prefix_beam_search(&lp, beam);
            let mut stream = PrefixBeamSearch::new(beam);
            for t in 0..t_len {
                stream.push_frame(lp.row(t));
            }
            if stream.hypotheses() != batch {
                tally.fail(format!("case {case}: streaming differs from batch at beam {beam}"));
            }
        }
    }
    tally.finish()
}

fn self_mask_for(model: &U2Model, dir: Direction, fault: Option<Fault>) -> impl Fn(usize) -> AttentionMask + '_ {
    move |len| match (dir, fault) {
        // In forward order the right-to-left decoder must look right;
        // the fault hands it the past instead.
        (Direction::R2l, Some(Fault::BrokenRightMask)) if model.config.r2l_impl == R2lImpl::RightMask => {
            build_left_mask(len)
        }
        (Direction::R2l, Some(Fault::BrokenRightMask)) => AttentionMask::full(len, len),
        _ => model.default_self_mask(dir, len),
    }
}

fn decoder_rows(model: &U2Model, enc: &Tensor, tokens_in: &[usize], dir: Direction, fault: Option<Fault>) -> Result<Tensor> {
    let mut g = Graph::default();
    let mut b = Binder::frozen(&model.params);
    let e = g.constant(enc.clone());
    let mask = self_mask_for(model, dir, fault);
    let lp = model.decoder_graph_masked(&mut g, &mut b, e, tokens_in, dir, &mask)?;
    Ok(g.value(lp).clone())
}

/// Output rows are aligned with the decoder input in the decoder's own
/// reading order, so both directions must be causal over that order.
fn check_decoder_causality<R: Rng>(
    tally: &mut Tally,
    rng: &mut R,
    model: &U2Model,
    enc: &Tensor,
    dir: Direction,
    fault: Option<Fault>,
    case: usize,
) -> Result<()> {
    let v = model.config.vocab;
    let len = rng.gen_range(2..=5);
    let labels = random_labels(rng, len, 1, v - 3);
    let (input, _) = decoder_io(&labels, dir, v);
    let base = decoder_rows(model, enc, &input, dir, fault)?;
    for p in 1..input.len() {
        let mut changed = input.clone();
        changed[p] = 1 + (changed[p] % (v - 3));
        if changed[p] == input[p] {
            continue;
        }
        let out = decoder_rows(model, enc, &changed, dir, fault)?;
        let leaked = (0..p).any(|r| base.row(r) != out.row(r));
        tally.check(if leaked { f64::INFINITY } else { 0.0 }, || {
            format!("case {case}: {} row before {p} saw token {p}", dir.prefix())
        });
    }
    Ok(())
}

/// Chunked encoder rows before a chunk boundary must not react to input
/// frames that only later chunks can see; decoder rows must not react to
/// later tokens.
pub fn causality_suite(seed: u64, cases: usize, fault: Option<Fault>) -> SuiteReport {
    let mut tally = Tally::new("causality", 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca05);
    let cfg = gradient_toy_config();
    for case in 0..cases {
        tally.cases += 1;
        let mut run = || -> Result<()> {
            let model = U2Model::new(cfg.clone(), rng.gen())?;
            let frames = rng.gen_range(27..=48);
            let feats = random_features(&mut rng, frames, cfg.feat_dim);
            let chunk = rng.gen_range(1..=4);
            let base = model.encode(&feats, ChunkMode::Fixed(chunk))?;
            let chunks = base.rows().div_ceil(chunk);
            if chunks >= 2 {
                let boundary = chunk * rng.gen_range(1..chunks);
                // Encoder row r reads input frames 4r ..= 4r + 6.
                let first_hidden = 4 * boundary + 3;
                let mut perturbed = feats.clone();
                for t in first_hidden..frames {
                    for x in perturbed.data_mut()[t * cfg.feat_dim..(t + 1) * cfg.feat_dim].iter_mut() {
                        *x += rng.gen_range(-2.0..2.0);
                    }
                }
                let out = model.encode(&perturbed, ChunkMode::Fixed(chunk))?;
                let err = (0..boundary)
                    .flat_map(|r| base.row(r).iter().zip(out.row(r)).map(|(a, b)| (a - b).abs()))
                    .fold(0.0, f64::max);
                tally.check(err, || format!("case {case}: encoder rows before {boundary} (chunk {chunk}) moved"));
            }
            for dir in [Direction::L2r, Direction::R2l] {
                check_decoder_causality(&mut tally, &mut rng, &model, &base, dir, fault, case)?;
            }
            Ok(())
        };
        if let Err(e) = run() {
            tally.fail(format!("case {case}: {e}"));
        }
    }
    tally.finish()
}

/// Copies every left-to-right decoder weight onto the right-to-left one.
pub fn mirror_decoders(model: &mut U2Model) {
    let l2r = format!("{}.", Direction::L2r.prefix());
    let r2l = Direction::R2l.prefix();
    let copies: Vec<(String, Tensor)> = model
        .params
        .iter()
        .filter_map(|(k, t)| k.strip_prefix(&l2r).map(|rest| (format!("{r2l}.{rest}"), t.clone())))
        .collect();
    for (k, t) in copies {
        model.params.insert(k, t);
    }
}

fn sequence_score(model: &U2Model, enc: &Tensor, tokens: &[usize], dir: Direction, fault: Option<Fault>) -> Result<f64> {
    let (input, target) = decoder_io(tokens, dir, model.config.vocab);
    let lp = decoder_rows(model, enc, &input, dir, fault)?;
    Ok(target.iter().enumerate().map(|(i, &k)| lp.at(i, k)).sum())
}

/// Without positional encoding and with shared weights, scoring `y`
/// right-to-left must equal scoring `reverse(y)` left-to-right.
pub fn symmetry_suite(seed: u64, cases: usize, fault: Option<Fault>) -> SuiteReport {
    let mut tally = Tally::new("symmetry", 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e7e);
    let cfg = ModelConfig {
        pos_enc: false,
        ..gradient_toy_config()
    };
    for case in 0..cases {
        tally.cases += 1;
        let mut run = || -> Result<()> {
            let mut model = U2Model::new(cfg.clone(), rng.gen())?;
            mirror_decoders(&mut model);
            let frames = rng.gen_range(15..=30);
            let enc = model.encode(&random_features(&mut rng, frames, cfg.feat_dim), ChunkMode::Full)?;
            let len = rng.gen_range(1..=5);
            let y = random_labels(&mut rng, len, 1, cfg.vocab - 3);
            let rev: Vec<usize> = y.iter().rev().copied().collect();
            let r2l = sequence_score(&model, &enc, &y, Direction::R2l, fault)?;
            let l2r = sequence_score(&model, &enc, &rev, Direction::L2r, None)?;
            tally.check((r2l - l2r).abs(), || format!("case {case}: y={y:?} r2l {r2l} vs l2r {l2r}"));
            Ok(())
        };
        if let Err(e) = run() {
            tally.fail(format!("case {case}: {e}"));
        }
    }
    tally.finish()
}

/// Substitution against its straight-line replay, plus the structural
/// properties of every performed substitution.
pub fn spec_sub_suite(seed: u64, cases: usize) -> SuiteReport {
    let mut tally = Tally::new("spec_sub", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5b5b);
    for case in 0..cases {
        let (t_len, cfg) = if case == 0 {
            (100, SpecSubConfig::default())
        } else {
            let t_max = rng.gen_range(0..=40);
            let cfg = SpecSubConfig {
                t_max,
                t_min: rng.gen_range(0..=t_max),
                n_max: rng.gen_range(0..=5),
            };
            (rng.gen_range(1..=120), cfg)
        };
        let f = rng.gen_range(1..=4);
        let feats = random_features(&mut rng, t_len, f);
        let draw_seed: u64 = rng.gen();
        tally.cases += 1;
        let (out, trace) = match spec_sub_traced(&feats, &cfg, &mut ChaCha8Rng::seed_from_u64(draw_seed)) {
            Ok(r) => r,
            Err(e) => {
                tally.fail(format!("case {case}: {e}"));
                continue;
            }
        };
        let replay = spec_sub_replay(&feats, &cfg, &mut ChaCha8Rng::seed_from_u64(draw_seed));
        if out != replay {
            tally.fail(format!("case {case}: output differs from replay"));
        }
        if trace.len() > cfg.n_max {
            tally.fail(format!("case {case}: {} substitutions > n_max {}", trace.len(), cfg.n_max));
        }
        for s in &trace {
            if s.len < cfg.t_min || s.len > cfg.t_max || s.source > s.target || s.target + s.len > t_len {
                tally.fail(format!("case {case}: bad substitution {s:?}"));
            }
        }
        for t in 0..t_len {
            let covered = trace.iter().any(|s| (s.target..s.target + s.len).contains(&t));
            if !covered && out.row(t) != feats.row(t) {
                tally.fail(format!("case {case}: untouched frame {t} changed"));
            }
        }
    }
    tally.finish()
}
