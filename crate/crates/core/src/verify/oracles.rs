use std::collections::BTreeMap;

use rand::Rng;

use crate::frontend::SpecSubConfig;
use crate::numerics::Tensor;

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &k in path {
        if k != 0 && k != prev {
            out.push(k);
        }
        prev = k;
    }
    out
}

/// Calls `visit(path, log_prob)` for each of the V^T frame-level paths.
fn for_each_path(log_probs: &Tensor, mut visit: impl FnMut(&[usize], f64)) {
    let (t_len, v) = (log_probs.rows(), log_probs.cols());
    let mut path = vec![0usize; t_len];
    loop {
        let lp: f64 = path.iter().enumerate().map(|(t, &k)| log_probs.at(t, k)).sum();
        visit(&path, lp);
        let mut t = 0;
        loop {
            if t == t_len {
                return;
            }
            path[t] += 1;
            if path[t] < v {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

/// log P(target) by summing every alignment that collapses to it.
pub fn brute_force_ctc_log_prob(log_probs: &Tensor, target: &[usize]) -> f64 {
    let mut terms = Vec::new();
    for_each_path(log_probs, |path, lp| {
        if collapse(path) == target {
            terms.push(lp);
        }
    });
    logsumexp(&terms)
}

/// log-probability of every reachable collapsed label sequence.
pub fn brute_force_prefix_log_probs(log_probs: &Tensor) -> BTreeMap<Vec<usize>, f64> {
    let mut groups: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
    for_each_path(log_probs, |path, lp| groups.entry(collapse(path)).or_default().push(lp));
    groups.into_iter().map(|(k, v)| (k, logsumexp(&v))).collect()
}

/// Row-normalized random log-posteriors, T×V.
pub fn random_log_probs<R: Rng + ?Sized>(rng: &mut R, t_len: usize, v: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..t_len)
        .map(|_| {
            let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let z = logsumexp(&logits);
            logits.iter().map(|x| x - z).collect()
        })
        .collect();
    Tensor::from_rows(&rows).expect("non-empty")
}

/// Plain re-statement of the substitution procedure on a frame list,
/// consuming the generator in the same order as the library version.
pub fn spec_sub_replay<R: Rng + ?Sized>(features: &Tensor, cfg: &SpecSubConfig, rng: &mut R) -> Tensor {
    let mut frames: Vec<Vec<f64>> = (0..features.rows()).map(|t| features.row(t).to_vec()).collect();
    let t_len = frames.len();
    let n = rng.gen_range(0..=cfg.n_max);
    for _ in 0..n {
        let dt = rng.gen_range(cfg.t_min..=cfg.t_max);
        if dt > t_len {
            continue;
        }
        let t = rng.gen_range(0..=t_len - dt);
        let t_src = rng.gen_range(0..=t);
        let chunk: Vec<Vec<f64>> = frames[t_src..t_src + dt].to_vec();
        for (i, frame) in chunk.into_iter().enumerate() {
            frames[t + i] = frame;
        }
    }
    Tensor::from_rows(&frames).expect("non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn collapse_rule() {
        assert_eq!(collapse(&[1, 1, 0, 1, 2, 2, 0]), vec![1, 1, 2]);
        assert_eq!(collapse(&[0, 0]), Vec::<usize>::new());
    }

    #[test]
    fn prefix_masses_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lp = random_log_probs(&mut rng, 4, 3);
        let total: f64 = brute_force_prefix_log_probs(&lp).values().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
