use super::{AttentionMask, Tensor};
use crate::error::{shape, usage, Result};

/// `ln Σ exp(v_i)` with max-shift. `-inf` iff every entry is `-inf`.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(usage("log_sum_exp of an empty vector"));
    }
    Ok(lse(v))
}

pub(crate) fn lse(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Two-term log-add used by the CTC recursions.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let z = lse(v);
    v.iter().map(|x| x - z).collect()
}

/// Softmax restricted to allowed positions. Masked positions get exactly
/// zero weight; a row with nothing allowed is all zeros.
pub(crate) fn masked_softmax_row(scores: &[f64], allow: &[bool], out: &mut [f64]) {
    let m = scores
        .iter()
        .zip(allow)
        .filter(|(_, &a)| a)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut total = 0.0;
    for ((o, &s), &a) in out.iter_mut().zip(scores).zip(allow) {
        *o = if a { (s - m).exp() } else { 0.0 };
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Row-wise layer normalization over the last dimension.
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64], eps: f64) -> Result<Tensor> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(shape(format!(
            "layer_norm: row width {c}, gain {}, bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let (xhat, _) = normalize_row(x.row(r), eps);
        out.extend(
            xhat.iter()
                .zip(gain)
                .zip(bias)
                .map(|((h, g), b)| h * g + b),
        );
    }
    Ok(Tensor::raw(x.shape().to_vec(), out))
}

/// Returns the normalized row and `1 / sqrt(var + eps)`.
pub(crate) fn normalize_row(row: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (row.iter().map(|x| (x - mean) * inv_std).collect(), inv_std)
}

/// Single-head scaled dot-product attention gated by `mask`.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    let (lq, d) = (q.rows(), q.cols());
    let lk = k.rows();
    if k.cols() != d || v.rows() != lk {
        return Err(shape(format!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if mask.queries() != lq || mask.keys() != lk {
        return Err(shape(format!(
            "mask is {}x{}, attention is {lq}x{lk}",
            mask.queries(),
            mask.keys()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let scores = super::tensor::matmul_nt_raw(q.data(), k.data(), lq, d, lk);
    let mut weights = vec![0.0; lq * lk];
    for i in 0..lq {
        let srow: Vec<f64> = scores[i * lk..(i + 1) * lk].iter().map(|s| s * scale).collect();
        masked_softmax_row(&srow, mask.row(i), &mut weights[i * lk..(i + 1) * lk]);
    }
    Tensor::raw(vec![lq, lk], weights).matmul(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 1.25]).unwrap(), 1.25);
        assert!((log_sum_exp(&[1.0, 2.0, 3.0]).unwrap() - 3.407_605_964_444_38).abs() < 1e-12);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(softmax(&[1000.0, 0.0]), vec![1.0, 0.0]);
        let p = softmax(&[1.0, 2.0]);
        assert!((p[0] - 0.2689414213699951).abs() < 1e-12);
        assert!((p[1] - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor::from_rows(&[vec![3.0, 3.0, 3.0]]).unwrap();
        let y = layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let x = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let y = layer_norm(&x, &[1.0; 2], &[0.0; 2], 1e-14).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);

        let x = Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap();
        let y = layer_norm(&x, &[2.0; 2], &[1.0; 2], 1e-14).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 3.0).abs() < 1e-12);

        assert!(layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-5).is_err());
    }

    #[test]
    fn attention_identity_and_causal_masks() {
        let q = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.1], vec![-0.5, 0.7]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.2, 0.4], vec![-1.0, 1.5]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();

        let diag = AttentionMask::from_fn(3, 3, |i, j| i == j);
        assert_eq!(masked_attention(&q, &k, &v, &diag).unwrap(), v);

        let lower = AttentionMask::from_fn(3, 3, |i, j| j <= i);
        let out = masked_attention(&q, &k, &v, &lower).unwrap();
        assert_eq!(out.row(0), v.row(0));

        // Unmasked attention equals a hand-rolled softmax(QKᵀ/√d)·V.
        let full = masked_attention(&q, &k, &v, &AttentionMask::full(3, 3)).unwrap();
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| (q.at(i, 0) * k.at(j, 0) + q.at(i, 1) * k.at(j, 1)) / 2f64.sqrt())
                .collect();
            let w = softmax(&s);
            for c in 0..2 {
                let expect: f64 = (0..3).map(|j| w[j] * v.at(j, c)).sum();
                assert!((full.at(i, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let q = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let mask = AttentionMask::from_rows(&[vec![false, false], vec![true, false]]).unwrap();
        let out = masked_attention(&q, &q, &q, &mask).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0]);
    }
}
