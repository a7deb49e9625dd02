use std::collections::BTreeMap;

use crate::corpus::TokenizedCorpus;
use crate::{ngrams, Result};

/// Corpus BLEU-1..BLEU-N; `scores[n - 1]` is BLEU-n.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuScores {
    pub scores: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

/// Corpus-level BLEU with clipped n-gram counts and the closest-reference
/// brevity penalty (ties go to the shorter reference). No smoothing: a zero
/// precision at any order makes that BLEU-n and every higher order zero.
pub fn bleu(corpus: &TokenizedCorpus, max_n: usize) -> Result<BleuScores> {
    corpus.require_non_empty()?;
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0, 0);
    for e in corpus.entries() {
        let cand = &e.candidate;
        c_len += cand.len();
        r_len += e
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for n in 1..=max_n {
            let mut max_ref: BTreeMap<Vec<&str>, usize> = BTreeMap::new();
            for r in &e.references {
                let mut counts: BTreeMap<Vec<&str>, usize> = BTreeMap::new();
                for g in ngrams(r, n) {
                    *counts.entry(g).or_default() += 1;
                }
                for (g, c) in counts {
                    let slot = max_ref.entry(g).or_default();
                    *slot = (*slot).max(c);
                }
            }
            let mut cand_counts: BTreeMap<Vec<&str>, usize> = BTreeMap::new();
            for g in ngrams(cand, n) {
                *cand_counts.entry(g).or_default() += 1;
            }
            matches[n - 1] += cand_counts
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            totals[n - 1] += (cand.len() + 1).saturating_sub(n);
        }
    }
    let brevity_penalty = if c_len == 0 {
        0.0
    } else if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let mut scores = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..max_n {
        if matches[n] == 0 || totals[n] == 0 {
            zero = true;
        } else {
            log_sum += (matches[n] as f64 / totals[n] as f64).ln();
        }
        scores.push(if zero {
            0.0
        } else {
            brevity_penalty * (log_sum / (n + 1) as f64).exp()
        });
    }
    Ok(BleuScores {
        scores,
        brevity_penalty,
        candidate_len: c_len,
        reference_len: r_len,
    })
}
