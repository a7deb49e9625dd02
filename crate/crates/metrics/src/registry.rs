use std::collections::BTreeMap;
use std::sync::Arc;

use crate::corpus::TokenizedCorpus;
use crate::{bleu, cider_d, rouge_l, CiderStats, Result, DEFAULT_SIGMA};

/// A corpus metric selectable by name.
pub trait CaptionMetric: Send + Sync {
    fn name(&self) -> &'static str;

    /// Named scores; one metric may report several (BLEU-1..4).
    fn compute(&self, corpus: &TokenizedCorpus) -> Result<Vec<(String, f64)>>;
}

#[derive(Clone, Copy, Debug)]
pub struct Bleu {
    pub max_n: usize,
}

impl Default for Bleu {
    fn default() -> Self {
        Self { max_n: 4 }
    }
}

impl CaptionMetric for Bleu {
    fn name(&self) -> &'static str {
        "bleu"
    }

    fn compute(&self, corpus: &TokenizedCorpus) -> Result<Vec<(String, f64)>> {
        let b = bleu(corpus, self.max_n)?;
        Ok(b.scores
            .iter()
            .enumerate()
            .map(|(i, &s)| (format!("BLEU-{}", i + 1), s))
            .collect())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RougeL;

impl CaptionMetric for RougeL {
    fn name(&self) -> &'static str {
        "rouge_l"
    }

    fn compute(&self, corpus: &TokenizedCorpus) -> Result<Vec<(String, f64)>> {
        Ok(vec![("ROUGE-L".into(), rouge_l(corpus)?.corpus)])
    }
}

/// CIDEr-D with document frequencies taken from the scored corpus itself.
#[derive(Clone, Copy, Debug)]
pub struct CiderD {
    pub sigma: f64,
}

impl Default for CiderD {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
        }
    }
}

impl CaptionMetric for CiderD {
    fn name(&self) -> &'static str {
        "cider_d"
    }

    fn compute(&self, corpus: &TokenizedCorpus) -> Result<Vec<(String, f64)>> {
        let stats = CiderStats::from_corpus(corpus)?;
        Ok(vec![("CIDEr-D".into(), cider_d(corpus, &stats, self.sigma)?.corpus)])
    }
}

#[derive(Clone, Default)]
pub struct MetricRegistry {
    metrics: BTreeMap<&'static str, Arc<dyn CaptionMetric>>,
}

impl MetricRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// BLEU-1..4, ROUGE-L and CIDEr-D.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(Bleu::default()));
        r.register(Arc::new(RougeL));
        r.register(Arc::new(CiderD::default()));
        r
    }

    pub fn register(&mut self, metric: Arc<dyn CaptionMetric>) {
        self.metrics.insert(metric.name(), metric);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn CaptionMetric>> {
        self.metrics.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.metrics.keys().copied()
    }

    /// Runs every registered metric, in name order.
    pub fn compute_all(&self, corpus: &TokenizedCorpus) -> Result<Vec<(String, f64)>> {
        let mut out = Vec::new();
        for m in self.metrics.values() {
            out.extend(m.compute(corpus)?);
        }
        Ok(out)
    }
}
