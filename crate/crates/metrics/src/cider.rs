//! CIDEr-D: TF-IDF weighted n-gram cosine (n = 1..4) with clipped matching
//! and a Gaussian penalty on the candidate/reference length difference,
//! averaged over n and references and scaled by 10.

use std::collections::BTreeMap;

use crate::corpus::TokenizedCorpus;
use crate::{MetricError, Result};

pub const DEFAULT_SIGMA: f64 = 6.0;
const MAX_N: usize = 4;
const SCALE: f64 = 10.0;

/// Document frequencies over a reference corpus. An n-gram counts once per
/// image no matter how many of that image's references contain it.
#[derive(Clone, Debug, PartialEq)]
pub struct CiderStats {
    df: BTreeMap<String, usize>,
    ref_images: usize,
    log_images: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CiderScores {
    pub corpus: f64,
    pub per_image: Vec<f64>,
}

fn key<S: AsRef<str>>(gram: &[S]) -> String {
    let mut k = String::new();
    for (i, t) in gram.iter().enumerate() {
        if i > 0 {
            k.push(' ');
        }
        k.push_str(t.as_ref());
    }
    k
}

struct WeightedGrams {
    weights: [BTreeMap<String, f64>; MAX_N],
    norms: [f64; MAX_N],
    len: usize,
}

impl CiderStats {
    /// `references[i]` holds every reference of image `i`.
    pub fn from_references<S: AsRef<str>>(references: &[Vec<Vec<S>>]) -> Result<Self> {
        if references.is_empty() {
            return Err(MetricError::EmptyCorpus);
        }
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for refs in references {
            let mut seen = std::collections::BTreeSet::new();
            for r in refs {
                for n in 1..=MAX_N {
                    for w in r.windows(n) {
                        seen.insert(key(w));
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_default() += 1;
            }
        }
        Ok(Self {
            df,
            ref_images: references.len(),
            log_images: (references.len() as f64).ln(),
        })
    }

    pub fn from_corpus(corpus: &TokenizedCorpus) -> Result<Self> {
        let refs: Vec<Vec<Vec<String>>> = corpus
            .entries()
            .iter()
            .map(|e| e.references.clone())
            .collect();
        Self::from_references(&refs)
    }

    pub fn ref_images(&self) -> usize {
        self.ref_images
    }

    pub fn document_frequency<S: AsRef<str>>(&self, gram: &[S]) -> usize {
        self.df.get(&key(gram)).copied().unwrap_or(0)
    }

    fn weigh<S: AsRef<str>>(&self, tokens: &[S]) -> WeightedGrams {
        let mut weights: [BTreeMap<String, f64>; MAX_N] = Default::default();
        let mut norms = [0.0; MAX_N];
        for n in 1..=MAX_N {
            let mut tf: BTreeMap<String, usize> = BTreeMap::new();
            for w in tokens.windows(n) {
                *tf.entry(key(w)).or_default() += 1;
            }
            for (g, count) in tf {
                let df = self.df.get(&g).copied().unwrap_or(0).max(1) as f64;
                let w = count as f64 * (self.log_images - df.ln());
                norms[n - 1] += w * w;
                weights[n - 1].insert(g, w);
            }
        }
        WeightedGrams {
            weights,
            norms: norms.map(f64::sqrt),
            len: tokens.len(),
        }
    }

    /// CIDEr-D of one candidate against its references.
    pub fn score<S: AsRef<str>, R: AsRef<str>>(
        &self,
        candidate: &[S],
        references: &[Vec<R>],
        sigma: f64,
    ) -> f64 {
        if references.is_empty() {
            return 0.0;
        }
        let hyp = self.weigh(candidate);
        let mut total = 0.0;
        for r in references {
            let rv = self.weigh(r);
            let delta = hyp.len as f64 - rv.len as f64;
            let penalty = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
            for n in 0..MAX_N {
                let mut val = 0.0;
                for (g, &wh) in &hyp.weights[n] {
                    if let Some(&wr) = rv.weights[n].get(g) {
                        val += wh.min(wr) * wr;
                    }
                }
                if hyp.norms[n] != 0.0 && rv.norms[n] != 0.0 {
                    val /= hyp.norms[n] * rv.norms[n];
                }
                total += val * penalty;
            }
        }
        total / MAX_N as f64 / references.len() as f64 * SCALE
    }
}

/// Per-image and mean CIDEr-D. `stats` must describe this corpus's
/// references.
pub fn cider_d(corpus: &TokenizedCorpus, stats: &CiderStats, sigma: f64) -> Result<CiderScores> {
    corpus.require_non_empty()?;
    if stats.ref_images != corpus.len() {
        return Err(MetricError::Contract(format!(
            "stats built from {} reference sets, corpus has {} images",
            stats.ref_images,
            corpus.len()
        )));
    }
    let per_image: Vec<f64> = corpus
        .entries()
        .iter()
        .map(|e| stats.score(&e.candidate, &e.references, sigma))
        .collect();
    Ok(CiderScores {
        corpus: per_image.iter().sum::<f64>() / per_image.len() as f64,
        per_image,
    })
}
