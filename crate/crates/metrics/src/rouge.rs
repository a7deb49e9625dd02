use crate::corpus::TokenizedCorpus;
use crate::Result;

/// Recall weight of the F-measure.
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Clone, Debug, PartialEq)]
pub struct RougeScores {
    pub corpus: f64,
    pub per_image: Vec<f64>,
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L: per image, the best precision and best recall over references
/// are combined into an F-measure; the corpus score is their mean.
pub fn rouge_l(corpus: &TokenizedCorpus) -> Result<RougeScores> {
    corpus.require_non_empty()?;
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    let per_image: Vec<f64> = corpus
        .entries()
        .iter()
        .map(|e| {
            if e.candidate.is_empty() {
                return 0.0;
            }
            let mut p_max: f64 = 0.0;
            let mut r_max: f64 = 0.0;
            for r in &e.references {
                let l = lcs_len(&e.candidate, r) as f64;
                p_max = p_max.max(l / e.candidate.len() as f64);
                if !r.is_empty() {
                    r_max = r_max.max(l / r.len() as f64);
                }
            }
            if p_max == 0.0 || r_max == 0.0 {
                0.0
            } else {
                (1.0 + beta2) * p_max * r_max / (r_max + beta2 * p_max)
            }
        })
        .collect();
    let corpus_score = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(RougeScores {
        corpus: corpus_score,
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lcs_hand_trace() {
        // a b c d vs a c d: the DP table's last cell is 3 (a, c, d).
        let a = ["a", "b", "c", "d"];
        let b = ["a", "c", "d"];
        assert_eq!(lcs_len(&a, &b), 3);
        assert_eq!(lcs_len(&b, &a), 3);
        assert_eq!(lcs_len::<&str>(&[], &b), 0);
    }
}
