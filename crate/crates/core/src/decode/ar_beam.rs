use super::Hypothesis;
use crate::error::{usage, Result};
use crate::model::{Direction, R2lImpl, U2Model};
use crate::numerics::Tensor;
use crate::{eos_id, is_label, sos_id};

struct Partial {
    tokens: Vec<usize>,
    score: f64,
}

fn normalized(tokens: &[usize], score: f64) -> f64 {
    score / (tokens.len() + 1) as f64
}

/// Step-by-step beam search with one attention decoder. Each step keeps
/// the `beam` best expansions (finished or not); finished sequences are
/// ranked by log-probability divided by their length including eos.
/// At most `max_len` labels are emitted before eos is forced.
pub fn ar_beam_search(
    model: &U2Model,
    enc: &Tensor,
    dir: Direction,
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(usage("beam must be at least 1"));
    }
    if !model.config.has_decoder(dir) {
        return Err(usage(format!("{} is disabled in this model", dir.prefix())));
    }
    if dir == Direction::R2l && model.config.r2l_impl == R2lImpl::RightMask && model.config.pos_enc {
        log::warn!(
            "right-mask decoder positions depend on the final length; \
             step-wise search sees shifted positions (reversed_input avoids this)"
        );
    }
    let v = model.config.vocab;
    let (sos, eos) = (sos_id(v), eos_id(v));
    let mut live = vec![Partial {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Partial> = Vec::new();

    while !live.is_empty() {
        // (tokens, score, ends_with_eos)
        let mut cands: Vec<(Vec<usize>, f64, bool)> = Vec::new();
        for p in &live {
            let mut input = Vec::with_capacity(p.tokens.len() + 1);
            input.push(sos);
            input.extend_from_slice(&p.tokens);
            let lp = model.decoder_forward(enc, &input, dir)?;
            let last = lp.row(lp.rows() - 1);
            cands.push((p.tokens.clone(), p.score + last[eos], true));
            if p.tokens.len() < max_len {
                for k in (0..v).filter(|&k| is_label(k, v)) {
                    let mut t = p.tokens.clone();
                    t.push(k);
                    cands.push((t, p.score + last[k], false));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
                .then_with(|| b.2.cmp(&a.2))
        });
        cands.truncate(beam);
        live.clear();
        for (tokens, score, done) in cands {
            if done {
                finished.push(Partial { tokens, score });
            } else {
                live.push(Partial { tokens, score });
            }
        }
    }

    let best = finished
        .into_iter()
        .max_by(|a, b| {
            normalized(&a.tokens, a.score)
                .partial_cmp(&normalized(&b.tokens, b.score))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .expect("eos is always a candidate");
    let s_final = normalized(&best.tokens, best.score);
    let mut tokens = best.tokens;
    let (s_l2r, s_r2l) = match dir {
        Direction::L2r => (Some(best.score), None),
        Direction::R2l => {
            tokens.reverse();
            (None, Some(best.score))
        }
    };
    Ok(Hypothesis {
        tokens,
        s_ctc: None,
        s_l2r,
        s_r2l,
        s_final,
    })
}
