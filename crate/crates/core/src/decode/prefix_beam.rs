use std::collections::BTreeMap;

use super::{rank, Hypothesis};
use crate::numerics::{log_add, Tensor};
use crate::BLANK;

/// A label prefix with the log-mass of alignments ending in blank and in
/// its last label at the current frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixState {
    pub prefix: Vec<usize>,
    pub p_blank: f64,
    pub p_nonblank: f64,
}

impl PrefixState {
    pub fn total(&self) -> f64 {
        log_add(self.p_blank, self.p_nonblank)
    }
}

/// Frame-synchronous CTC prefix beam search. Feeding frames one at a time
/// is the only mode of operation, so streaming and batch use agree bit
/// for bit.
#[derive(Clone, Debug)]
pub struct PrefixBeamSearch {
    beam: usize,
    hyps: Vec<PrefixState>,
}

impl PrefixBeamSearch {
    pub fn new(beam: usize) -> Self {
        assert!(beam >= 1, "beam must be positive");
        Self {
            beam,
            hyps: vec![PrefixState {
                prefix: Vec::new(),
                p_blank: 0.0,
                p_nonblank: f64::NEG_INFINITY,
            }],
        }
    }

    /// Extends every prefix by the `beam` most likely symbols of this
    /// frame, merges identical prefixes and keeps the best `beam`.
    pub fn push_frame(&mut self, log_probs: &[f64]) {
        let mut symbols: Vec<usize> = (0..log_probs.len()).collect();
        symbols.sort_by(|&a, &b| log_probs[b].partial_cmp(&log_probs[a]).unwrap().then(a.cmp(&b)));
        symbols.truncate(self.beam);

        let mut next: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
        let neg = f64::NEG_INFINITY;
        for h in &self.hyps {
            for &k in &symbols {
                let p = log_probs[k];
                if k == BLANK {
                    let e = next.entry(h.prefix.clone()).or_insert((neg, neg));
                    e.0 = log_add(e.0, log_add(h.p_blank, h.p_nonblank) + p);
                } else if h.prefix.last() == Some(&k) {
                    let e = next.entry(h.prefix.clone()).or_insert((neg, neg));
                    e.1 = log_add(e.1, h.p_nonblank + p);
                    let mut ext = h.prefix.clone();
                    ext.push(k);
                    let e = next.entry(ext).or_insert((neg, neg));
                    e.1 = log_add(e.1, h.p_blank + p);
                } else {
                    let mut ext = h.prefix.clone();
                    ext.push(k);
                    let e = next.entry(ext).or_insert((neg, neg));
                    e.1 = log_add(e.1, log_add(h.p_blank, h.p_nonblank) + p);
                }
            }
        }
        let mut hyps: Vec<PrefixState> = next
            .into_iter()
            .map(|(prefix, (p_blank, p_nonblank))| PrefixState {
                prefix,
                p_blank,
                p_nonblank,
            })
            .filter(|h| h.total() > f64::NEG_INFINITY)
            .collect();
        hyps.sort_by(|a, b| rank(a.total(), &a.prefix, b.total(), &b.prefix));
        hyps.truncate(self.beam);
        self.hyps = hyps;
    }

    pub fn states(&self) -> &[PrefixState] {
        &self.hyps
    }

    /// Current beam as hypotheses ranked by merged prefix probability.
    pub fn hypotheses(&self) -> Vec<Hypothesis> {
        self.hyps
            .iter()
            .map(|h| Hypothesis::from_ctc(h.prefix.clone(), h.total()))
            .collect()
    }
}

pub fn ctc_prefix_beam_search(log_probs: &Tensor, beam: usize) -> Vec<Hypothesis> {
    let mut search = PrefixBeamSearch::new(beam);
    for t in 0..log_probs.rows() {
        search.push_frame(log_probs.row(t));
    }
    search.hypotheses()
}

/// Best-path decoding: per-frame argmax, merge repeats, drop blanks.
/// `s_ctc` is the log-probability of that single path.
pub fn ctc_greedy(log_probs: &Tensor) -> Hypothesis {
    let mut tokens = Vec::new();
    let mut score = 0.0;
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let best = (0..row.len())
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(b.cmp(&a)))
            .unwrap_or(BLANK);
        score += row[best];
        if best != BLANK && prev != Some(best) {
            tokens.push(best);
        }
        prev = Some(best);
    }
    Hypothesis::from_ctc(tokens, score)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect::<Vec<_>>())
            .unwrap()
    }

    #[test]
    fn single_frame() {
        let hyps = ctc_prefix_beam_search(&lp(&[vec![0.3, 0.7]]), 4);
        assert_eq!(hyps[0].tokens, vec![1]);
        assert!((hyps[0].s_ctc.unwrap() - 0.7f64.ln()).abs() < 1e-15);
        assert_eq!(hyps[1].tokens, Vec::<usize>::new());
        assert!((hyps[1].s_ctc.unwrap() - 0.3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn repeats_collapse() {
        let m = lp(&[vec![0.05, 0.9, 0.05], vec![0.05, 0.9, 0.05]]);
        assert_eq!(ctc_prefix_beam_search(&m, 3)[0].tokens, vec![1]);
        assert_eq!(ctc_greedy(&m).tokens, vec![1]);
    }

    #[test]
    fn greedy_keeps_repeats_split_by_blank() {
        let m = lp(&[vec![0.1, 0.8, 0.1], vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1], vec![0.1, 0.1, 0.8]]);
        let h = ctc_greedy(&m);
        assert_eq!(h.tokens, vec![1, 1, 2]);
        assert!((h.s_ctc.unwrap() - 4.0 * 0.8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_token_order() {
        let m = lp(&[vec![0.2, 0.4, 0.4]]);
        let hyps = ctc_prefix_beam_search(&m, 3);
        assert_eq!(hyps[0].tokens, vec![1]);
        assert_eq!(hyps[1].tokens, vec![2]);
    }
}
