//! Checks shared by the integration tests and the acceptance runner. Each
//! returns the measured quantity so callers decide how to assert or report.
#![allow(dead_code)]

use glied_core::config::VARIANTS;
use glied_core::decoding::{beam_search, greedy_decode, DecodeOptions, MarkovStepModel, StepModel};
use glied_core::vocab::{BOS, EOS};
use glied_core::{AblationFlags, Graph, GliedModel, ImageInput, ModelConfig};
use glied_tensor::gradcheck::{central_difference, compare, GradCheckReport, DEFAULT_STEP};
use glied_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn image(k: usize, d_r: usize, vocab: usize, rng: &mut impl Rng) -> ImageInput {
    let regions = Tensor::matrix(k, d_r, (0..k * d_r).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    let n = rng.random_range(1..=k);
    let attributes = (0..n).map(|_| rng.random_range(4..vocab)).collect();
    ImageInput { regions, attributes }
}

/// `[BOS, w_1, …, w_n, EOS]` with words drawn from the non-reserved ids.
pub fn caption(words: usize, vocab: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut c = vec![BOS];
    c.extend((0..words).map(|_| rng.random_range(4..vocab)));
    c.push(EOS);
    c
}

fn teacher_loss(model: &GliedModel, image: &ImageInput, cap: &[usize]) -> f64 {
    let mut g = Graph::eval(model.store());
    let (_, loss) = model.teacher_forced(&mut g, image, cap).unwrap();
    g.value(loss).item().unwrap()
}

/// Central differences of the teacher-forced loss of a micro model
/// (`d_h = 8`, `k = 2`, `|D| = 7`) against its tape gradients, over every
/// stored scalar.
pub fn model_gradient_check(flags: AblationFlags, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig::micro(flags);
    let model = GliedModel::new(config.clone(), seed).unwrap();
    let img = image(2, config.d_r, config.vocab_size, &mut rng);
    let cap = caption(4, config.vocab_size, &mut rng);

    let mut g = Graph::trainable_eval(model.store());
    let (_, loss) = model.teacher_forced(&mut g, &img, &cap).unwrap();
    g.backward(loss).unwrap();
    let mut analytic: Vec<Tensor> = model
        .store()
        .iter()
        .map(|(_, _, t)| Tensor::zeros_like(t))
        .collect();
    for (id, grad) in g.param_grads() {
        analytic[id.index()] = grad.clone();
    }

    let inputs: Vec<Tensor> = model.store().iter().map(|(_, _, t)| t.clone()).collect();
    let mut probe = model.clone();
    let numeric = central_difference(
        |xs| {
            probe.store_mut().tensors_mut().clone_from_slice(xs);
            Ok(teacher_loss(&probe, &img, &cap))
        },
        &inputs,
        DEFAULT_STEP,
    )
    .unwrap();
    compare(&analytic, &numeric)
}

/// Teacher-forced logits against step-by-step session logits.
pub fn forced_vs_incremental(model: &GliedModel, image: &ImageInput, inputs: &[usize]) -> f64 {
    let mut g = Graph::eval(model.store());
    let src = model.encode(&mut g, image).unwrap();
    let forced = model.forward_sequence(&mut g, &src, inputs).unwrap();
    let forced = g.value(forced.logits).clone();
    let mut session = model.session(image).unwrap();
    let mut state = session.initial_state();
    let mut worst = 0.0f64;
    for (t, &tok) in inputs.iter().enumerate() {
        let (logits, _) = session.step(&mut state, tok).unwrap();
        for (a, b) in logits.iter().zip(forced.row(t).unwrap()) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

pub fn random_flags(rng: &mut impl Rng) -> AblationFlags {
    VARIANTS[rng.random_range(0..VARIANTS.len())].1
}

/// Worst forced/incremental gap over `n` random micro models with
/// 6-token inputs.
pub fn forced_vs_incremental_sweep(n: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let flags = if seed < 2 { [AblationFlags::GLIED, AblationFlags::BASE][seed as usize] } else { random_flags(&mut rng) };
        let config = ModelConfig::micro(flags);
        let model = GliedModel::new(config.clone(), seed).unwrap();
        let k = rng.random_range(1..=4);
        let img = image(k, config.d_r, config.vocab_size, &mut rng);
        let cap = caption(5, config.vocab_size, &mut rng);
        worst = worst.max(forced_vs_incremental(&model, &img, &cap[..6]));
    }
    worst
}

/// Teacher-forced logits of a model on one image.
pub fn logits(model: &GliedModel, image: &ImageInput, inputs: &[usize]) -> Tensor {
    let mut g = Graph::eval(model.store());
    let src = model.encode(&mut g, image).unwrap();
    let out = model.forward_sequence(&mut g, &src, inputs).unwrap();
    g.value(out.logits).clone()
}

/// Largest change of logits at positions `≤ t` when every later input is
/// replaced, over all `t`.
pub fn causality_gap(model: &GliedModel, image: &ImageInput, inputs: &[usize], rng: &mut impl Rng) -> f64 {
    let base = logits(model, image, inputs);
    let vocab = model.config().vocab_size;
    let mut worst = 0.0f64;
    for t in 0..inputs.len() - 1 {
        let mut changed = inputs.to_vec();
        for tok in &mut changed[t + 1..] {
            *tok = (*tok + 1 + rng.random_range(0..vocab - 1)) % vocab;
        }
        let other = logits(model, image, &changed);
        for row in 0..=t {
            for (a, b) in base.row(row).unwrap().iter().zip(other.row(row).unwrap()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

/// Logit change when the image's region rows are permuted.
pub fn permutation_gap(model: &GliedModel, image: &ImageInput, inputs: &[usize], perm: &[usize]) -> f64 {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| image.regions.row(i).unwrap().to_vec()).collect();
    let permuted = ImageInput {
        regions: Tensor::from_rows(&rows).unwrap(),
        attributes: image.attributes.clone(),
    };
    logits(model, image, inputs)
        .max_abs_diff(&logits(model, &permuted, inputs))
        .unwrap()
}

/// Summed log-probability of `tokens` (after BOS) under a step model.
pub fn sequence_log_prob(model: &mut dyn StepModel, tokens: &[usize]) -> f64 {
    let mut prefix = vec![BOS];
    let mut total = 0.0;
    for &t in tokens {
        total += model.next_log_probs(&prefix).unwrap()[t];
        prefix.push(t);
    }
    total
}

/// Greedy and beam-search results on one random micro model:
/// `(greedy log prob, beam-1 equal to greedy, top beam-3 log prob)`.
pub fn beam_vs_greedy(seed: u64) -> (f64, bool, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
    let config = ModelConfig::micro(random_flags(&mut rng));
    let model = GliedModel::new(config.clone(), seed).unwrap();
    let img = image(3, config.d_r, config.vocab_size, &mut rng);
    let opts = DecodeOptions::captions(config.max_len);
    let mut s = model.session(&img).unwrap();
    let greedy = greedy_decode(&mut s, &opts).unwrap();
    let beam1 = beam_search(&mut s, 1, &opts).unwrap();
    let beam3 = beam_search(&mut s, 3, &opts).unwrap();
    (greedy.log_prob, beam1[0] == greedy, beam3[0].log_prob)
}

/// A 3-step chain over 4 tokens with BOS = 0 and no terminator.
pub fn toy_chain(seed: u64) -> MarkovStepModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row = || (0..4).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>();
    let first = row();
    let table: Vec<Vec<f64>> = (0..4).map(|_| row()).collect();
    MarkovStepModel::from_scores(&first, &table)
}

/// Best path of the toy chain by exhaustive enumeration of all 4³ paths.
pub fn toy_optimum(model: &MarkovStepModel) -> (Vec<usize>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                let lp = model.first[a] + model.table[a][b] + model.table[b][c];
                if lp > best.1 {
                    best = (vec![a, b, c], lp);
                }
            }
        }
    }
    best
}
