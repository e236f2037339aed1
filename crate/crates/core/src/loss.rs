//! CTC forward-backward loss, label-smoothed decoder cross-entropy and the
//! weighted joint objective.

use crate::error::{shape, usage, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::BLANK;

use crate::numerics::{log_add, log_sum_exp};

/// Weights of the joint objective: `lambda` on CTC, `alpha` on the
/// right-to-left decoder inside the attention term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
}

impl LossWeights {
    pub fn new(lambda: f64, alpha: f64) -> Result<Self> {
        for (name, v) in [("lambda", lambda), ("alpha", alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(usage(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(Self { lambda, alpha })
    }

    /// Weights applied to (ctc, l2r, r2l).
    pub fn coefficients(&self) -> (f64, f64, f64) {
        let aed = 1.0 - self.lambda;
        (self.lambda, aed * (1.0 - self.alpha), aed * self.alpha)
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            alpha: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_ctc: f64,
    pub l_l2r: f64,
    pub l_r2l: f64,
    pub l_combined: f64,
}

/// `λ·ctc + (1−λ)·((1−α)·l2r + α·r2l)`.
pub fn combined_loss(l_ctc: f64, l_l2r: f64, l_r2l: f64, w: LossWeights) -> LossBreakdown {
    let l_combined =
        w.lambda * l_ctc + (1.0 - w.lambda) * ((1.0 - w.alpha) * l_l2r + w.alpha * l_r2l);
    LossBreakdown {
        l_ctc,
        l_l2r,
        l_r2l,
        l_combined,
    }
}

/// Fewest frames that can emit `target`: one per label plus a blank
/// between each pair of equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_ctc_inputs(log_probs: &Tensor, target: &[usize]) -> Result<()> {
    let v = log_probs.cols();
    if let Some(&bad) = target.iter().find(|&&k| k == BLANK || k >= v) {
        return Err(usage(format!(
            "CTC target id {bad} is blank or outside a vocabulary of {v}"
        )));
    }
    Ok(())
}

/// Negative log-likelihood of `target` under frame posteriors `log_probs`
/// (T×V, blank = 0). Returns `+inf` when the target cannot fit in T frames.
pub fn ctc_loss(log_probs: &Tensor, target: &[usize]) -> Result<f64> {
    check_ctc_inputs(log_probs, target)?;
    if ctc_min_frames(target) > log_probs.rows() {
        return Ok(f64::INFINITY);
    }
    let alpha = ctc_alpha(log_probs, target);
    Ok(-final_log_prob(&alpha, log_probs.rows(), 2 * target.len() + 1))
}

/// Gradient of [`ctc_loss`] with respect to `log_probs`.
pub fn ctc_loss_grad(log_probs: &Tensor, target: &[usize]) -> Result<Tensor> {
    match ctc_forward_backward(log_probs, target)? {
        (_, Some(g)) => Ok(g),
        _ => Err(usage(format!(
            "target of {} labels needs {} frames, only {} given",
            target.len(),
            ctc_min_frames(target),
            log_probs.rows()
        ))),
    }
}

/// Loss and gradient from one forward and one backward recursion. The
/// gradient is `None` when the loss is infinite.
pub fn ctc_forward_backward(log_probs: &Tensor, target: &[usize]) -> Result<(f64, Option<Tensor>)> {
    check_ctc_inputs(log_probs, target)?;
    let (t_len, v) = (log_probs.rows(), log_probs.cols());
    if ctc_min_frames(target) > t_len {
        return Ok((f64::INFINITY, None));
    }
    let ext = extended(target);
    let s_len = ext.len();
    let alpha = ctc_alpha(log_probs, target);
    let log_p = final_log_prob(&alpha, t_len, s_len);
    let beta = ctc_beta(log_probs, &ext);

    let mut grad = vec![0.0; t_len * v];
    let mut occ = vec![f64::NEG_INFINITY; v];
    for t in 0..t_len {
        occ.iter_mut().for_each(|o| *o = f64::NEG_INFINITY);
        for s in 0..s_len {
            let a = alpha[t * s_len + s] + beta[t * s_len + s];
            occ[ext[s]] = log_add(occ[ext[s]], a);
        }
        for k in 0..v {
            let lp = log_probs.at(t, k);
            if occ[k] > f64::NEG_INFINITY && lp > f64::NEG_INFINITY {
                grad[t * v + k] = -(occ[k] - lp - log_p).exp();
            }
        }
    }
    Ok((-log_p, Some(Tensor::raw(vec![t_len, v], grad))))
}

fn extended(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &k in target {
        ext.push(k);
        ext.push(BLANK);
    }
    ext
}

/// Log forward variables, emission at `t` included; `T × S` row-major.
fn ctc_alpha(log_probs: &Tensor, target: &[usize]) -> Vec<f64> {
    let ext = extended(target);
    let (t_len, s_len) = (log_probs.rows(), ext.len());
    let mut a = vec![f64::NEG_INFINITY; t_len * s_len];
    a[0] = log_probs.at(0, ext[0]);
    if s_len > 1 {
        a[1] = log_probs.at(0, ext[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = a.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = acc + log_probs.at(t, ext[s]);
        }
    }
    a
}

fn ctc_beta(log_probs: &Tensor, ext: &[usize]) -> Vec<f64> {
    let (t_len, s_len) = (log_probs.rows(), ext.len());
    let mut b = vec![f64::NEG_INFINITY; t_len * s_len];
    let last = (t_len - 1) * s_len;
    b[last + s_len - 1] = log_probs.at(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        b[last + s_len - 2] = log_probs.at(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = b.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                acc = log_add(acc, next[s + 2]);
            }
            cur[s] = acc + log_probs.at(t, ext[s]);
        }
    }
    b
}

fn final_log_prob(alpha: &[f64], t_len: usize, s_len: usize) -> f64 {
    let last = &alpha[(t_len - 1) * s_len..];
    if s_len == 1 {
        last[0]
    } else {
        log_sum_exp(&last[s_len - 2..]).expect("two entries")
    }
}

/// Per-position cross-entropy against `(1−ε)` on the target and `ε/(V−1)`
/// on every other class. Returns the sum over positions and its gradient.
fn smoothed_ce(log_probs: &Tensor, target: &[usize], smoothing: f64) -> Result<(f64, Tensor)> {
    let (l, v) = (log_probs.rows(), log_probs.cols());
    if target.len() != l {
        return Err(shape(format!(
            "decoder produced {l} positions for {} targets",
            target.len()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&k| k >= v) {
        return Err(usage(format!("target id {bad} outside vocabulary of {v}")));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(usage(format!("label smoothing must be in [0, 1), got {smoothing}")));
    }
    let off = if v > 1 { smoothing / (v - 1) as f64 } else { 0.0 };
    let on = 1.0 - smoothing;
    let mut total = 0.0;
    let mut grad = vec![0.0; l * v];
    for (pos, &y) in target.iter().enumerate() {
        for k in 0..v {
            let q = if k == y { on } else { off };
            if q > 0.0 {
                total -= q * log_probs.at(pos, k);
                grad[pos * v + k] = -q;
            }
        }
    }
    Ok((total, Tensor::raw(vec![l, v], grad)))
}

/// Mean label-smoothed cross-entropy over decoder positions.
pub fn aed_loss(log_probs: &Tensor, target_out: &[usize], smoothing: f64) -> Result<f64> {
    let (sum, _) = smoothed_ce(log_probs, target_out, smoothing)?;
    Ok(sum / target_out.len() as f64)
}

/// Graph node for the CTC loss of one utterance, or `None` when the target
/// cannot be aligned to the available frames.
pub fn ctc_node(g: &mut Graph, log_probs: Var, target: &[usize]) -> Result<Option<Var>> {
    let (loss, grad) = ctc_forward_backward(g.value(log_probs), target)?;
    match grad {
        Some(grad) => Ok(Some(g.scalar_fn(log_probs, loss, grad)?)),
        None => Ok(None),
    }
}

/// Graph node for the summed (not averaged) smoothed cross-entropy.
pub fn aed_sum_node(g: &mut Graph, log_probs: Var, target_out: &[usize], smoothing: f64) -> Result<Var> {
    let (sum, grad) = smoothed_ce(g.value(log_probs), target_out, smoothing)?;
    g.scalar_fn(log_probs, sum, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::log_softmax;

    fn lp_matrix(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| log_softmax(r)).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_frame_single_label() {
        let lp = lp_matrix(&[vec![0.2, 1.0, -0.5]]);
        assert!((ctc_loss(&lp, &[1]).unwrap() + lp.at(0, 1)).abs() < 1e-15);
    }

    #[test]
    fn two_frames_three_alignments() {
        let lp = lp_matrix(&[vec![0.3, -0.2], vec![-1.0, 0.4]]);
        let p = |t: usize, k: usize| lp.at(t, k).exp();
        let expect = -(p(0, 1) * p(1, 1) + p(0, 1) * p(1, 0) + p(0, 0) * p(1, 1)).ln();
        assert!((ctc_loss(&lp, &[1]).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_blank() {
        let lp = lp_matrix(&[vec![0.1, 0.2], vec![0.3, -0.4], vec![0.0, 0.5]]);
        let p = |t: usize, k: usize| lp.at(t, k).exp();
        // a,blank,a is the only way to emit [a, a] in three frames.
        let expect = -(p(0, 1) * p(1, 0) * p(2, 1)).ln();
        assert!((ctc_loss(&lp, &[1, 1]).unwrap() - expect).abs() < 1e-12);
        assert_eq!(ctc_loss(&lp.reshape(&[3, 2]).unwrap(), &[1, 1, 1]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let lp = lp_matrix(&[vec![0.1, 0.2], vec![0.3, -0.4]]);
        assert!((ctc_loss(&lp, &[]).unwrap() + lp.at(0, 0) + lp.at(1, 0)).abs() < 1e-12);
    }

    #[test]
    fn rejects_blank_in_target() {
        let lp = lp_matrix(&[vec![0.1, 0.2]]);
        assert!(ctc_loss(&lp, &[0]).is_err());
        assert!(ctc_loss(&lp, &[2]).is_err());
    }

    #[test]
    fn single_frame_gradient_is_negative_onehot() {
        let lp = lp_matrix(&[vec![0.2, 1.0, -0.5]]);
        let g = ctc_loss_grad(&lp, &[2]).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, -1.0]);
    }

    #[test]
    fn aed_boundaries() {
        let perfect = Tensor::from_rows(&[
            vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY],
            vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0],
        ])
        .unwrap();
        assert_eq!(aed_loss(&perfect, &[0, 2], 0.0).unwrap(), 0.0);

        let v = 5;
        let uniform = Tensor::filled(&[3, v], -(v as f64).ln());
        assert!((aed_loss(&uniform, &[1, 2, 3], 0.0).unwrap() - (v as f64).ln()).abs() < 1e-14);
        assert!(aed_loss(&uniform, &[1, 2], 0.0).is_err());
    }

    #[test]
    fn combined_examples() {
        let w = LossWeights::new(0.3, 0.3).unwrap();
        let b = combined_loss(2.0, 1.0, 3.0, w);
        assert!((b.l_combined - 1.72).abs() < 1e-12);
        let b = combined_loss(2.0, 1.0, 3.0, LossWeights::new(1.0, 0.7).unwrap());
        assert_eq!(b.l_combined, 2.0);
        let b = combined_loss(2.0, 1.0, 3.0, LossWeights::new(0.0, 0.0).unwrap());
        assert_eq!(b.l_combined, 1.0);
        assert!(LossWeights::new(1.5, 0.0).is_err());
    }
}
