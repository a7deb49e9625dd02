//! Greedy, sampled and beam-search decoding over any [`StepModel`].

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, RngCore};

use crate::error::{CoreError, Result};
use crate::model::{log_softmax, DecoderSession};
use crate::vocab::{BOS, EOS, PAD};

/// Anything that scores the next token given a BOS-initial prefix.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    /// Log-probabilities over the vocabulary for the token after `prefix`.
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl StepModel for DecoderSession<'_> {
    fn vocab_size(&self) -> usize {
        self.model().config().vocab_size
    }

    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        DecoderSession::next_log_probs(self, prefix)
    }
}

/// A first-order Markov chain: `first[j]` and `table[i][j]` are
/// log-probabilities of `j` at the start and after `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovStepModel {
    pub first: Vec<f64>,
    pub table: Vec<Vec<f64>>,
}

impl MarkovStepModel {
    /// Normalizes arbitrary scores row by row.
    pub fn from_scores(first: &[f64], table: &[Vec<f64>]) -> Self {
        Self {
            first: log_softmax(first),
            table: table.iter().map(|r| log_softmax(r)).collect(),
        }
    }
}

impl StepModel for MarkovStepModel {
    fn vocab_size(&self) -> usize {
        self.first.len()
    }

    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        match prefix {
            [] => Err(CoreError::Contract("empty prefix".into())),
            [_] => Ok(self.first.clone()),
            [.., last] => self
                .table
                .get(*last)
                .cloned()
                .ok_or_else(|| CoreError::Data(format!("token {last} out of range"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOptions {
    /// Most tokens generated, EOS included.
    pub max_len: usize,
    pub bos: usize,
    pub eos: Option<usize>,
    /// Tokens the decoder never emits.
    pub banned: Vec<usize>,
    /// Rank beam hypotheses by mean rather than summed log-probability.
    pub length_normalize: bool,
}

impl DecodeOptions {
    /// Caption decoding: BOS/EOS from the vocabulary, PAD and BOS banned.
    pub fn captions(max_len: usize) -> Self {
        Self {
            max_len,
            bos: BOS,
            eos: Some(EOS),
            banned: vec![PAD, BOS],
            length_normalize: false,
        }
    }

    /// Fixed-length decoding with no terminator.
    pub fn fixed(len: usize, bos: usize) -> Self {
        Self {
            max_len: len,
            bos,
            eos: None,
            banned: Vec::new(),
            length_normalize: false,
        }
    }

    fn allowed(&self, tok: usize) -> bool {
        !self.banned.contains(&tok)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens after BOS; ends with EOS when `finished`.
    pub tokens: Vec<usize>,
    /// Sum of per-step model log-probabilities.
    pub log_prob: f64,
    pub finished: bool,
    /// Force-terminated at the length cap before emitting EOS.
    pub truncated: bool,
}

impl Hypothesis {
    fn empty() -> Self {
        Self {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
            truncated: false,
        }
    }

    /// Tokens without the trailing EOS.
    pub fn caption(&self) -> &[usize] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }

    fn score(&self, length_normalize: bool) -> f64 {
        if length_normalize && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }

    fn extend(&self, tok: usize, lp: f64, eos: Option<usize>) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.push(tok);
        Self {
            tokens,
            log_prob: self.log_prob + lp,
            finished: eos == Some(tok),
            truncated: false,
        }
    }
}

fn prefix(bos: usize, tokens: &[usize]) -> Vec<usize> {
    std::iter::once(bos).chain(tokens.iter().copied()).collect()
}

/// Higher score first; equal scores by ascending token ids.
fn rank(a: &Hypothesis, b: &Hypothesis, norm: bool) -> Ordering {
    b.score(norm)
        .total_cmp(&a.score(norm))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn check_vocab(model: &dyn StepModel, lp: &[f64]) -> Result<()> {
    if lp.len() != model.vocab_size() {
        return Err(CoreError::Contract(format!(
            "model returned {} scores for vocabulary {}",
            lp.len(),
            model.vocab_size()
        )));
    }
    Ok(())
}

fn finish_at_cap(mut h: Hypothesis, opts: &DecodeOptions) -> Hypothesis {
    if !h.finished && opts.eos.is_some() {
        h.truncated = true;
    }
    h
}

/// Argmax per step, ties to the lowest id.
pub fn greedy_decode(model: &mut dyn StepModel, opts: &DecodeOptions) -> Result<Hypothesis> {
    let mut h = Hypothesis::empty();
    while h.tokens.len() < opts.max_len {
        let lp = model.next_log_probs(&prefix(opts.bos, &h.tokens))?;
        check_vocab(model, &lp)?;
        let best = (0..lp.len())
            .filter(|&t| opts.allowed(t))
            .fold(None, |acc: Option<usize>, t| match acc {
                Some(b) if lp[b] >= lp[t] => Some(b),
                _ => Some(t),
            })
            .ok_or_else(|| CoreError::Contract("every token is banned".into()))?;
        h = h.extend(best, lp[best], opts.eos);
        if h.finished {
            return Ok(h);
        }
    }
    Ok(finish_at_cap(h, opts))
}

/// Length-synchronous beam search; best hypothesis first.
pub fn beam_search(
    model: &mut dyn StepModel,
    beam: usize,
    opts: &DecodeOptions,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(CoreError::Config("beam size must be at least 1".into()));
    }
    let norm = opts.length_normalize;
    let mut live = vec![Hypothesis::empty()];
    let mut retired: Vec<Hypothesis> = Vec::new();
    for _ in 0..opts.max_len {
        let mut candidates = Vec::with_capacity(live.len() * model.vocab_size());
        for h in &live {
            let lp = model.next_log_probs(&prefix(opts.bos, &h.tokens))?;
            check_vocab(model, &lp)?;
            for (t, &l) in lp.iter().enumerate() {
                if opts.allowed(t) {
                    candidates.push(h.extend(t, l, opts.eos));
                }
            }
        }
        candidates.sort_by(|a, b| rank(a, b, norm));
        candidates.truncate(beam);
        live.clear();
        for c in candidates {
            if c.finished {
                retired.push(c);
            } else {
                live.push(c);
            }
        }
        retired.sort_by(|a, b| rank(a, b, norm));
        retired.truncate(beam);
        if live.is_empty() {
            break;
        }
        // Log-probabilities only fall as tokens append, so once the pool is
        // full a live hypothesis that cannot beat its worst member is done.
        if !norm && retired.len() == beam {
            let worst = retired[beam - 1].log_prob;
            if live.iter().all(|h| h.log_prob <= worst) {
                live.clear();
                break;
            }
        }
    }
    let mut out = retired;
    out.extend(live.into_iter().map(|h| finish_at_cap(h, opts)));
    out.sort_by(|a, b| rank(a, b, norm));
    Ok(out)
}

/// Multinomial draw per step from `softmax(log_probs / temperature)`.
pub fn sample_decode(
    model: &mut dyn StepModel,
    temperature: f64,
    rng: &mut dyn RngCore,
    opts: &DecodeOptions,
) -> Result<Hypothesis> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(CoreError::Config(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let mut h = Hypothesis::empty();
    while h.tokens.len() < opts.max_len {
        let lp = model.next_log_probs(&prefix(opts.bos, &h.tokens))?;
        check_vocab(model, &lp)?;
        let tok = draw(&lp, temperature, opts, rng)?;
        h = h.extend(tok, lp[tok], opts.eos);
        if h.finished {
            return Ok(h);
        }
    }
    Ok(finish_at_cap(h, opts))
}

fn draw(lp: &[f64], temperature: f64, opts: &DecodeOptions, rng: &mut dyn RngCore) -> Result<usize> {
    let allowed: Vec<usize> = (0..lp.len()).filter(|&t| opts.allowed(t)).collect();
    let m = allowed
        .iter()
        .map(|&t| lp[t] / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(CoreError::Contract("no token has finite probability".into()));
    }
    let weights: Vec<f64> = allowed
        .iter()
        .map(|&t| (lp[t] / temperature - m).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&t, &w) in allowed.iter().zip(&weights) {
        if u < w {
            return Ok(t);
        }
        u -= w;
    }
    // Rounding left a sliver past the last bucket.
    Ok(*allowed
        .iter()
        .zip(&weights)
        .rev()
        .find(|(_, &w)| w > 0.0)
        .map(|(t, _)| t)
        .expect("at least one positive weight"))
}

/// A named decoding strategy.
pub trait DecodeStrategy: Send + Sync {
    fn name(&self) -> &str;
    /// Ranked hypotheses, best first.
    fn decode(
        &self,
        model: &mut dyn StepModel,
        opts: &DecodeOptions,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Hypothesis>>;
}

pub struct Greedy;

impl DecodeStrategy for Greedy {
    fn name(&self) -> &str {
        "greedy"
    }

    fn decode(
        &self,
        model: &mut dyn StepModel,
        opts: &DecodeOptions,
        _rng: &mut dyn RngCore,
    ) -> Result<Vec<Hypothesis>> {
        Ok(vec![greedy_decode(model, opts)?])
    }
}

pub struct Beam {
    pub beam: usize,
}

impl DecodeStrategy for Beam {
    fn name(&self) -> &str {
        "beam"
    }

    fn decode(
        &self,
        model: &mut dyn StepModel,
        opts: &DecodeOptions,
        _rng: &mut dyn RngCore,
    ) -> Result<Vec<Hypothesis>> {
        beam_search(model, self.beam, opts)
    }
}

pub struct Sample {
    pub temperature: f64,
}

impl DecodeStrategy for Sample {
    fn name(&self) -> &str {
        "sample"
    }

    fn decode(
        &self,
        model: &mut dyn StepModel,
        opts: &DecodeOptions,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Hypothesis>> {
        Ok(vec![sample_decode(model, self.temperature, rng, opts)?])
    }
}

/// Settings a strategy factory may read.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrategyParams {
    pub beam: usize,
    pub temperature: f64,
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self {
            beam: 3,
            temperature: 1.0,
        }
    }
}

type Factory = dyn Fn(&StrategyParams) -> Result<Arc<dyn DecodeStrategy>> + Send + Sync;

/// Decoding strategies registered by name.
pub struct StrategyRegistry {
    factories: BTreeMap<String, Box<Factory>>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register("greedy", |_| Ok(Arc::new(Greedy)));
        r.register("beam", |p| {
            if p.beam == 0 {
                return Err(CoreError::Config("beam size must be at least 1".into()));
            }
            Ok(Arc::new(Beam { beam: p.beam }))
        });
        r.register("sample", |p| {
            Ok(Arc::new(Sample {
                temperature: p.temperature,
            }))
        });
        r
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&StrategyParams) -> Result<Arc<dyn DecodeStrategy>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, params: &StrategyParams) -> Result<Arc<dyn DecodeStrategy>> {
        let f = self.factories.get(name).ok_or_else(|| {
            let known: Vec<&str> = self.names().collect();
            CoreError::Config(format!(
                "unknown decoding strategy `{name}`; known: {}",
                known.join(", ")
            ))
        })?;
        f(params)
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}
