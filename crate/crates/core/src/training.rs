//! Teacher-forced cross-entropy training, self-critical sequence training
//! and corpus evaluation.

use std::io::Write;
use std::time::Instant;

use glied_metrics::{
    bleu, cider_d, rouge_l, CiderStats, CorpusEntry, TokenizedCorpus, DEFAULT_SIGMA,
};
use glied_tensor::{clip_global_norm, AdamState, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::CaptioningExample;
use crate::decoding::{beam_search, greedy_decode, sample_decode, DecodeOptions, Hypothesis};
use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::model::{DecoderSession, GliedModel, ImageInput};
use crate::vocab::{Vocabulary, BOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    CrossEntropy,
    Scst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    /// Epochs without a validation CIDEr-D improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub phase: Phase,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop once an epoch's mean training loss falls below this.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 80,
            max_epochs: 25,
            learning_rate: 1e-4,
            patience: 3,
            seed: 0,
            phase: Phase::CrossEntropy,
            clip_norm: None,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    /// Defaults for self-critical fine-tuning.
    pub fn scst() -> Self {
        Self {
            learning_rate: 2e-5,
            max_epochs: 10,
            phase: Phase::Scst,
            clip_norm: Some(5.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.into()));
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and epoch count must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss; for SCST, the mean policy loss.
    pub loss: f64,
    /// Validation CIDEr-D of greedy captions, when a validation set exists.
    pub cider: Option<f64>,
    pub bleu4: Option<f64>,
    /// Mean self-critical reward (SCST only).
    pub reward: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters the model holds on return.
    pub best_epoch: usize,
    pub best_cider: Option<f64>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// One JSON object per epoch.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Corpus metrics of decoded captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider_d: f64,
}

/// Sums per-slot gradients across examples.
struct GradAccumulator {
    grads: Vec<Tensor>,
}

impl GradAccumulator {
    fn new(store: &ParamStore) -> Self {
        Self {
            grads: store.iter().map(|(_, _, t)| Tensor::zeros_like(t)).collect(),
        }
    }

    fn add(&mut self, g: &Graph, factor: f64) {
        for (id, grad) in g.param_grads() {
            let acc = &mut self.grads[id.index()];
            for (a, v) in acc.data_mut().iter_mut().zip(grad.data()) {
                *a += factor * v;
            }
        }
    }
}

fn step_model(
    model: &mut GliedModel,
    adam: &mut AdamState,
    mut grads: Vec<Tensor>,
    clip: Option<f64>,
) -> Result<f64> {
    let norm = match clip {
        Some(c) => clip_global_norm(&mut grads, c),
        None => grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt(),
    };
    adam.step(model.store_mut().tensors_mut(), &grads)?;
    Ok(norm)
}

/// Every (image, reference) pair, as indices.
fn caption_pairs(data: &[CaptioningExample]) -> Vec<(usize, usize)> {
    data.iter()
        .enumerate()
        .flat_map(|(i, e)| (0..e.reference_ids.len()).map(move |r| (i, r)))
        .collect()
}

fn check_lengths(model: &GliedModel, data: &[CaptioningExample]) -> Result<()> {
    let max = model.config().max_len;
    for e in data {
        if let Some(r) = e.reference_ids.iter().find(|r| r.len() - 1 > max) {
            return Err(CoreError::Data(format!(
                "{}: reference of {} tokens exceeds max length {max}",
                e.image_id,
                r.len() - 2
            )));
        }
    }
    Ok(())
}

/// Tracks early stopping and keeps the best parameters.
struct EarlyStop {
    best: Option<(f64, usize, ParamStore)>,
    since_best: usize,
    patience: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        Self {
            best: None,
            since_best: 0,
            patience,
        }
    }

    /// Records an epoch; returns true when training should stop.
    fn observe(&mut self, epoch: usize, cider: f64, model: &GliedModel) -> bool {
        let improved = self.best.as_ref().is_none_or(|(c, _, _)| cider > *c);
        if improved {
            self.best = Some((cider, epoch, model.store().clone()));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    fn restore(self, model: &mut GliedModel, report: &mut TrainReport) {
        match self.best {
            Some((cider, epoch, store)) => {
                *model.store_mut() = store;
                report.best_epoch = epoch;
                report.best_cider = Some(cider);
            }
            None => report.best_epoch = report.epochs.len(),
        }
    }
}

fn validate_epoch(
    model: &GliedModel,
    val: &[CaptioningExample],
    vocab: &Vocabulary,
) -> Result<(Option<f64>, Option<f64>)> {
    if val.is_empty() {
        return Ok((None, None));
    }
    let m = evaluate_with(model, val, vocab, |s, o| greedy_decode(s, o))?;
    Ok((Some(m.cider_d), Some(m.bleu[3])))
}

/// Teacher-forced training over every (image, reference) pair. With a
/// validation set, stops early on greedy CIDEr-D and restores the best
/// epoch's parameters.
pub fn train_cross_entropy(
    model: &mut GliedModel,
    train: &[CaptioningExample],
    val: &[CaptioningExample],
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(CoreError::Data("training set is empty".into()));
    }
    check_lengths(model, train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(config.learning_rate);
    let mut pairs = caption_pairs(train);
    let mut report = TrainReport::default();
    let mut stop = EarlyStop::new(config.patience);
    let dropout = model.config().dropout;
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        pairs.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in pairs.chunks(config.batch_size).enumerate() {
            let mut acc = GradAccumulator::new(model.store());
            let mut batch_loss = 0.0;
            let scale = 1.0 / batch.len() as f64;
            for &(i, r) in batch {
                let ex = &train[i];
                let fail = |e: String| {
                    CoreError::Training(format!(
                        "epoch {epoch}, batch {b} (image {}): {e}",
                        ex.image_id
                    ))
                };
                let mut g = Graph::train(model.store(), dropout, rng.random());
                let (_, loss) = model
                    .teacher_forced(&mut g, &ex.input, &ex.reference_ids[r])
                    .map_err(|e| fail(e.to_string()))?;
                let value = g.value(loss).item()?;
                if !value.is_finite() {
                    return Err(fail(format!("loss is {value}")));
                }
                g.backward(loss).map_err(|e| fail(e.to_string()))?;
                acc.add(&g, scale);
                batch_loss += value;
            }
            step_model(model, &mut adam, acc.grads, config.clip_norm)
                .map_err(|e| CoreError::Training(format!("epoch {epoch}, batch {b}: {e}")))?;
            total += batch_loss;
        }
        let loss = total / pairs.len() as f64;
        let (cider, bleu4) = validate_epoch(model, val, vocab)?;
        report.epochs.push(EpochRecord {
            epoch,
            loss,
            cider,
            bleu4,
            reward: None,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        let stop_now = cider.is_some_and(|c| stop.observe(epoch, c, model));
        if stop_now || config.target_loss.is_some_and(|t| loss < t) {
            break;
        }
    }
    stop.restore(model, &mut report);
    Ok(report)
}

/// `Σ log p(tokens)` of a generated caption and, with `reward`, the
/// per-slot gradients of `−reward · Σ log p`. `tokens` excludes BOS.
pub fn policy_gradient(
    model: &GliedModel,
    image: &ImageInput,
    tokens: &[usize],
    reward: f64,
) -> Result<(f64, Vec<Tensor>)> {
    if tokens.is_empty() {
        return Err(CoreError::Contract("empty caption".into()));
    }
    let mut g = Graph::trainable_eval(model.store());
    let src = model.encode(&mut g, image)?;
    let mut inputs = Vec::with_capacity(tokens.len());
    inputs.push(BOS);
    inputs.extend_from_slice(&tokens[..tokens.len() - 1]);
    let out = model.forward_sequence(&mut g, &src, &inputs)?;
    let lp = g.tape.log_softmax(out.logits, 1)?;
    let picked = g.tape.pick(lp, tokens)?;
    let total = g.tape.sum(picked)?;
    let log_prob = g.value(total).item()?;
    let mut acc = GradAccumulator::new(model.store());
    if reward != 0.0 {
        g.backward(total)?;
        acc.add(&g, -reward);
    }
    Ok((log_prob, acc.grads))
}

/// Statistics of one self-critical update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScstStats {
    pub mean_reward: f64,
    pub mean_sample_cider: f64,
    pub mean_greedy_cider: f64,
    /// Mean policy loss `−r · Σ log p`.
    pub loss: f64,
    pub grad_norm: f64,
}

/// Tokens for metrics: the caption up to (not including) EOS.
fn words(vocab: &Vocabulary, h: &Hypothesis) -> Vec<String> {
    vocab.decode(&h.tokens)
}

/// One self-critical step: a temperature-1 sample and a greedy baseline
/// per image, reward `CIDEr-D(sample) − CIDEr-D(greedy)`, and an update on
/// the batch-mean policy loss.
pub fn scst_step(
    model: &mut GliedModel,
    batch: &[&CaptioningExample],
    vocab: &Vocabulary,
    stats: &CiderStats,
    adam: &mut AdamState,
    clip: Option<f64>,
    rng: &mut dyn rand::RngCore,
) -> Result<ScstStats> {
    if batch.is_empty() {
        return Err(CoreError::Data("empty SCST batch".into()));
    }
    let opts = DecodeOptions::captions(model.config().max_len);
    let scale = 1.0 / batch.len() as f64;
    let mut grads = GradAccumulator::new(model.store()).grads;
    let (mut reward_sum, mut sample_sum, mut greedy_sum, mut loss_sum) = (0.0, 0.0, 0.0, 0.0);
    for ex in batch {
        if ex.references.is_empty() {
            return Err(CoreError::Data(format!(
                "{}: reward undefined without references",
                ex.image_id
            )));
        }
        let (sample, greedy) = {
            let mut s = model.session(&ex.input)?;
            let sample = sample_decode(&mut s, 1.0, rng, &opts)?;
            let greedy = greedy_decode(&mut s, &opts)?;
            (sample, greedy)
        };
        let rs = stats.score(&words(vocab, &sample), &ex.references, DEFAULT_SIGMA);
        let rg = stats.score(&words(vocab, &greedy), &ex.references, DEFAULT_SIGMA);
        let reward = if sample.tokens == greedy.tokens { 0.0 } else { rs - rg };
        let (log_prob, g) = policy_gradient(model, &ex.input, &sample.tokens, reward)?;
        for (a, t) in grads.iter_mut().zip(&g) {
            a.add_assign(&t.map(|v| v * scale))?;
        }
        reward_sum += reward;
        sample_sum += rs;
        greedy_sum += rg;
        loss_sum += -reward * log_prob;
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(CoreError::Training("non-finite SCST gradient".into()));
    }
    let grad_norm = step_model(model, adam, grads, clip)?;
    Ok(ScstStats {
        mean_reward: reward_sum * scale,
        mean_sample_cider: sample_sum * scale,
        mean_greedy_cider: greedy_sum * scale,
        loss: loss_sum * scale,
        grad_norm,
    })
}

/// Self-critical fine-tuning with CIDEr-D rewards under document
/// frequencies of the training references. Early stopping as in
/// [`train_cross_entropy`]. Epoch 0 records the starting point but is never
/// restored, so the returned model has always been updated.
pub fn train_scst(
    model: &mut GliedModel,
    train: &[CaptioningExample],
    val: &[CaptioningExample],
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(CoreError::Data("training set is empty".into()));
    }
    let refs: Vec<Vec<Vec<String>>> = train.iter().map(|e| e.references.clone()).collect();
    let stats = CiderStats::from_references(&refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(config.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    let mut stop = EarlyStop::new(config.patience);
    let start = Instant::now();
    let (cider, bleu4) = validate_epoch(model, val, vocab)?;
    report.epochs.push(EpochRecord {
        epoch: 0,
        loss: 0.0,
        cider,
        bleu4,
        reward: None,
        wall_ms: start.elapsed().as_millis() as u64,
    });
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss, mut reward) = (0.0, 0.0);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&CaptioningExample> = idx.iter().map(|&i| &train[i]).collect();
            let s = scst_step(model, &batch, vocab, &stats, &mut adam, config.clip_norm, &mut rng)
                .map_err(|e| CoreError::Training(format!("epoch {epoch}, batch {b}: {e}")))?;
            loss += s.loss * batch.len() as f64;
            reward += s.mean_reward * batch.len() as f64;
        }
        let n = train.len() as f64;
        let (cider, bleu4) = validate_epoch(model, val, vocab)?;
        report.epochs.push(EpochRecord {
            epoch,
            loss: loss / n,
            cider,
            bleu4,
            reward: Some(reward / n),
            wall_ms: start.elapsed().as_millis() as u64,
        });
        if cider.is_some_and(|c| stop.observe(epoch, c, model)) {
            break;
        }
    }
    stop.restore(model, &mut report);
    Ok(report)
}

/// Decodes every image with `decode` and scores against its references.
pub fn evaluate_with<F>(
    model: &GliedModel,
    data: &[CaptioningExample],
    vocab: &Vocabulary,
    decode: F,
) -> Result<MetricBundle>
where
    F: Fn(&mut DecoderSession<'_>, &DecodeOptions) -> Result<Hypothesis>,
{
    let captions = decode_all(model, data, decode)?;
    let words: Vec<Vec<String>> = captions.iter().map(|c| vocab.decode(c)).collect();
    score_captions(data, &words)
}

/// Corpus BLEU-1..4, ROUGE-L and CIDEr-D of beam-search captions.
pub fn evaluate(
    model: &GliedModel,
    data: &[CaptioningExample],
    vocab: &Vocabulary,
    beam: usize,
) -> Result<MetricBundle> {
    evaluate_with(model, data, vocab, |s, o| Ok(beam_search(s, beam, o)?.swap_remove(0)))
}

/// Best caption token ids (EOS included when emitted) for every image.
pub fn decode_all<F>(model: &GliedModel, data: &[CaptioningExample], decode: F) -> Result<Vec<Vec<usize>>>
where
    F: Fn(&mut DecoderSession<'_>, &DecodeOptions) -> Result<Hypothesis>,
{
    let opts = DecodeOptions::captions(model.config().max_len);
    data.iter()
        .map(|ex| {
            let mut s = model.session(&ex.input)?;
            Ok(decode(&mut s, &opts)?.tokens)
        })
        .collect()
}

/// Metrics of tokenized `captions` against each example's references, with
/// CIDEr-D document frequencies taken from these references.
pub fn score_captions(data: &[CaptioningExample], captions: &[Vec<String>]) -> Result<MetricBundle> {
    if data.len() != captions.len() {
        return Err(CoreError::Contract(format!(
            "{} captions for {} images",
            captions.len(),
            data.len()
        )));
    }
    let entries = data
        .iter()
        .zip(captions)
        .map(|(e, c)| CorpusEntry {
            image_id: e.image_id.clone(),
            candidate: c.clone(),
            references: e.references.clone(),
        })
        .collect();
    let corpus = TokenizedCorpus::new(entries)?;
    let b = bleu(&corpus, 4)?;
    let stats = CiderStats::from_corpus(&corpus)?;
    Ok(MetricBundle {
        bleu: [b.scores[0], b.scores[1], b.scores[2], b.scores[3]],
        rouge_l: rouge_l(&corpus)?.corpus,
        cider_d: cider_d(&corpus, &stats, DEFAULT_SIGMA)?.corpus,
    })
}
