use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{clip_grad_norm, lr_at, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::frontend::Utterance;
use crate::loss::{aed_sum_node, combined_loss, ctc_min_frames, ctc_node, LossBreakdown, LossWeights};
use crate::model::{decoder_io, subsampled_len, Binder, ChunkMode, Direction, U2Model};
use crate::numerics::{backward, Graph, Precision, Tensor, Var};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub l_ctc: f64,
    pub l_l2r: f64,
    pub l_r2l: f64,
    pub l_combined: f64,
}

/// Batch losses and, when requested, the gradient of `l_combined` for
/// every parameter it depends on.
#[derive(Clone, Debug)]
pub struct BatchGrads {
    pub losses: LossBreakdown,
    pub grads: BTreeMap<String, Tensor>,
    /// Utterances left out of the CTC term because their target needs more
    /// frames than the encoder produces.
    pub skipped_ctc: usize,
}

struct UttTerms {
    ctc: Option<f64>,
    l2r: f64,
    r2l: f64,
    grads: BTreeMap<String, Tensor>,
}

fn ctc_feasible(utt: &Utterance) -> bool {
    subsampled_len(utt.frames()).is_some_and(|t| t >= ctc_min_frames(&utt.tokens))
}

/// `scales` are the per-utterance factors turning raw sums into the batch
/// objective: (ctc, l2r, r2l). A zero factor keeps the term out of the
/// gradient entirely.
#[allow(clippy::too_many_arguments)]
fn utterance_terms(
    model: &U2Model,
    utt: &Utterance,
    chunk: ChunkMode,
    scales: (f64, f64, f64),
    smoothing: f64,
    precision: Precision,
    with_grads: bool,
) -> Result<UttTerms> {
    let mut g = Graph::new(precision);
    let mut b = if with_grads {
        Binder::trainable(&model.params)
    } else {
        Binder::frozen(&model.params)
    };
    let enc = model.encode_graph(&mut g, &mut b, &utt.features, chunk)?;
    let mut terms: Vec<Var> = Vec::new();

    let lp = model.ctc_graph(&mut g, &mut b, enc)?;
    let ctc = match ctc_node(&mut g, lp, &utt.tokens)? {
        Some(node) => {
            if scales.0 > 0.0 {
                terms.push(g.scale(node, scales.0));
            }
            Some(g.value(node).item())
        }
        None => None,
    };

    let mut aed = [0.0; 2];
    for (slot, (dir, scale)) in [(Direction::L2r, scales.1), (Direction::R2l, scales.2)].into_iter().enumerate() {
        if !model.config.has_decoder(dir) {
            continue;
        }
        let (input, target) = decoder_io(&utt.tokens, dir, model.config.vocab);
        let lp = model.decoder_graph(&mut g, &mut b, enc, &input, dir)?;
        let node = aed_sum_node(&mut g, lp, &target, smoothing)?;
        aed[slot] = g.value(node).item();
        if scale > 0.0 {
            terms.push(g.scale(node, scale));
        }
    }

    let mut grads = BTreeMap::new();
    if with_grads && !terms.is_empty() {
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        let mut gr = backward(&g, total)?;
        for (name, var) in b.bindings() {
            if let Some(t) = gr.take(var) {
                grads.insert(name, t);
            }
        }
    }
    Ok(UttTerms {
        ctc,
        l2r: aed[0],
        r2l: aed[1],
        grads,
    })
}

/// Joint loss of a batch. CTC is averaged over utterances, each decoder
/// loss over all target positions (labels plus eos) in the batch.
pub fn batch_loss(
    model: &U2Model,
    batch: &[Utterance],
    chunk: ChunkMode,
    weights: LossWeights,
    smoothing: f64,
    precision: Precision,
    with_grads: bool,
) -> Result<BatchGrads> {
    let n_ctc = batch.iter().filter(|u| ctc_feasible(u)).count();
    let n_tok: usize = batch.iter().map(|u| u.tokens.len() + 1).sum();
    let (c_ctc, c_l2r, c_r2l) = weights.coefficients();
    let scales = (
        if n_ctc > 0 { c_ctc / n_ctc as f64 } else { 0.0 },
        c_l2r / n_tok.max(1) as f64,
        c_r2l / n_tok.max(1) as f64,
    );
    let per_utt: Vec<Result<UttTerms>> = batch
        .par_iter()
        .map(|u| utterance_terms(model, u, chunk, scales, smoothing, precision, with_grads))
        .collect();

    let (mut ctc, mut l2r, mut r2l) = (0.0, 0.0, 0.0);
    let mut skipped = 0;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for (u, terms) in batch.iter().zip(per_utt) {
        let terms = terms?;
        match terms.ctc {
            Some(v) => ctc += v,
            None => {
                skipped += 1;
                log::warn!("utterance {}: too few frames for its target, CTC term skipped", u.id);
            }
        }
        l2r += terms.l2r;
        r2l += terms.r2l;
        for (name, g) in terms.grads {
            match grads.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    let l_ctc = if n_ctc > 0 { ctc / n_ctc as f64 } else { 0.0 };
    let n_tok = n_tok.max(1) as f64;
    Ok(BatchGrads {
        losses: combined_loss(l_ctc, l2r / n_tok, r2l / n_tok, weights),
        grads,
        skipped_ctc: skipped,
    })
}

/// One Adam update on the joint loss of `batch`.
pub fn train_step(state: &mut TrainState, batch: &[Utterance], chunk: ChunkMode, cfg: &TrainConfig) -> Result<StepRecord> {
    let step = state.step + 1;
    let lr = lr_at(step, cfg.base_lr, cfg.warmup_steps, state.model.config.d_model)?;
    let BatchGrads { losses, mut grads, .. } = batch_loss(
        &state.model,
        batch,
        chunk,
        cfg.weights,
        cfg.label_smoothing,
        cfg.precision,
        true,
    )?;
    if !losses.l_combined.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!(
                "l_ctc={} l_l2r={} l_r2l={} chunk={chunk:?}",
                losses.l_ctc, losses.l_l2r, losses.l_r2l
            ),
        });
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFinite {
            step,
            detail: format!("gradient of {name} is not finite"),
        });
    }
    clip_grad_norm(&mut grads, cfg.grad_clip);
    state.adam.step(&mut state.model.params, &grads, lr)?;
    state.step = step;
    Ok(StepRecord {
        step,
        lr,
        l_ctc: losses.l_ctc,
        l_l2r: losses.l_l2r,
        l_r2l: losses.l_r2l,
        l_combined: losses.l_combined,
    })
}

/// Joint loss with full context and no augmentation; `None` for an empty set.
pub fn validation_loss(model: &U2Model, utts: &[Utterance], cfg: &TrainConfig) -> Result<Option<f64>> {
    if utts.is_empty() {
        return Ok(None);
    }
    let b = batch_loss(
        model,
        utts,
        ChunkMode::Full,
        cfg.weights,
        cfg.label_smoothing,
        cfg.precision,
        false,
    )?;
    Ok(Some(b.losses.l_combined))
}
