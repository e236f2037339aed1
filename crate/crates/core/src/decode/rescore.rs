use super::{rank, DecodeConfig, DecoderUse, Hypothesis};
use crate::error::{usage, Result};
use crate::model::{Direction, U2Model};
use crate::numerics::Tensor;

/// Final score of one candidate. With both decoders:
/// `λ·s_ctc + (1−α)·s_l2r + α·s_r2l`. Single-decoder modes give the
/// remaining decoder the full attention weight: `λ·s_ctc + s_dec`.
pub fn fuse_scores(
    s_ctc: f64,
    s_l2r: Option<f64>,
    s_r2l: Option<f64>,
    lambda: f64,
    alpha: f64,
    use_decoders: DecoderUse,
) -> f64 {
    let ctc = lambda * s_ctc;
    match use_decoders {
        DecoderUse::Both => {
            ctc + (1.0 - alpha) * s_l2r.unwrap_or(0.0) + alpha * s_r2l.unwrap_or(0.0)
        }
        DecoderUse::L2rOnly => ctc + s_l2r.unwrap_or(0.0),
        DecoderUse::R2lOnly => ctc + s_r2l.unwrap_or(0.0),
    }
}

/// Decoders actually available for `requested`; a model missing one
/// decoder falls back to the other.
fn effective_use(model: &U2Model, requested: DecoderUse) -> Result<DecoderUse> {
    let l2r = model.config.has_decoder(Direction::L2r);
    let r2l = model.config.has_decoder(Direction::R2l);
    match (requested, l2r, r2l) {
        (DecoderUse::Both, true, true) => Ok(DecoderUse::Both),
        (DecoderUse::Both | DecoderUse::L2rOnly, true, _) => Ok(DecoderUse::L2rOnly),
        (DecoderUse::Both | DecoderUse::R2lOnly, _, true) => Ok(DecoderUse::R2lOnly),
        _ => Err(usage(format!(
            "rescoring with {} needs a decoder the model does not have",
            requested.as_str()
        ))),
    }
}

/// Scores every first-pass candidate with the attention decoders and
/// re-ranks by the fused score. Never introduces new token sequences.
pub fn rescore(hyps: &[Hypothesis], model: &U2Model, enc: &Tensor, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    if hyps.is_empty() {
        return Err(usage("cannot rescore an empty n-best list"));
    }
    let used = effective_use(model, cfg.use_decoders)?;
    let mut out = Vec::with_capacity(hyps.len());
    for h in hyps {
        let s_ctc = h
            .s_ctc
            .ok_or_else(|| usage("rescoring needs first-pass CTC scores"))?;
        let s_l2r = match used {
            DecoderUse::Both | DecoderUse::L2rOnly => {
                Some(model.score_sequence(enc, &h.tokens, Direction::L2r)?)
            }
            DecoderUse::R2lOnly => None,
        };
        let s_r2l = match used {
            DecoderUse::Both | DecoderUse::R2lOnly => {
                Some(model.score_sequence(enc, &h.tokens, Direction::R2l)?)
            }
            DecoderUse::L2rOnly => None,
        };
        out.push(Hypothesis {
            tokens: h.tokens.clone(),
            s_ctc: Some(s_ctc),
            s_l2r,
            s_r2l,
            s_final: fuse_scores(s_ctc, s_l2r, s_r2l, cfg.lambda, cfg.alpha, used),
        });
    }
    out.sort_by(|a, b| rank(a.s_final, &a.tokens, b.s_final, &b.tokens));
    Ok(out)
}
