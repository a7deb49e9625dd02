//! Synthetic scene grammar: scenes of grouped objects with spatial
//! relations, rendered into region features, scored attributes and
//! template captions.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{load_examples, CaptioningExample, DatasetRecord, ScoredAttribute};
use crate::error::{CoreError, Result};
use crate::vocab::Vocabulary;

pub const TYPES: [&str; 12] = [
    "dog", "cat", "car", "ball", "cup", "chair", "bird", "horse", "boat", "tree", "box", "lamp",
];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "black", "white"];
pub const SIZES: [&str; 3] = ["tiny", "small", "large"];
pub const COUNT_WORDS: [&str; 4] = ["a", "two", "three", "four"];
pub const RELATIONS: [&str; 5] = ["next to", "behind", "above", "below", "in front of"];
/// Attribute word standing for each relation.
pub const RELATION_ATTRIBUTES: [&str; 5] = ["next", "behind", "above", "below", "front"];
pub const PREFIXES: [&str; 3] = ["", "a photo of", "an image showing"];

pub const MAX_OBJECTS: usize = 4;
pub const MAX_COUNT: usize = 4;
pub const REGION_WIDTH: usize = 64;
const PROPERTY_WIDTH: usize = 48;
const POSITION_OFFSET: usize = 48;
const COUNT_OFFSET: usize = 51;
/// Fixed seed of the property embedding, shared by every dataset.
const EMBEDDING_SEED: u64 = 0x5ce7e;

const ATTRIBUTE_DROPOUT: f64 = 0.1;
const DISTRACTOR_RATE: f64 = 0.05;

pub fn plural(t: &str) -> String {
    if t.ends_with('x') {
        format!("{t}es")
    } else {
        format!("{t}s")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: usize,
    pub color: usize,
    pub size: usize,
    /// Number of instances, 1 to 4.
    pub count: usize,
}

/// Objects in caption order; `relations[i]` relates object `i` to `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub relations: Vec<usize>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.objects.len();
        let ok = (1..=MAX_OBJECTS).contains(&n)
            && self.relations.len() == n - 1
            && self.relations.iter().all(|&r| r < RELATIONS.len())
            && self.objects.iter().all(|o| {
                o.kind < TYPES.len()
                    && o.color < COLORS.len()
                    && o.size < SIZES.len()
                    && (1..=MAX_COUNT).contains(&o.count)
            });
        if ok {
            Ok(())
        } else {
            Err(CoreError::Data(format!("invalid scene {self:?}")))
        }
    }

    pub fn region_count(&self) -> usize {
        self.objects.iter().map(|o| o.count).sum()
    }

    /// Caption under template `prefix` (an index into [`PREFIXES`]).
    pub fn caption(&self, prefix: usize) -> String {
        let mut words: Vec<String> = PREFIXES[prefix]
            .split_whitespace()
            .map(String::from)
            .collect();
        for (i, o) in self.objects.iter().enumerate() {
            if i > 0 {
                words.extend(RELATIONS[self.relations[i - 1]].split(' ').map(String::from));
            }
            words.push(COUNT_WORDS[o.count - 1].into());
            words.push(SIZES[o.size].into());
            words.push(COLORS[o.color].into());
            let t = TYPES[o.kind];
            words.push(if o.count > 1 { plural(t) } else { t.to_string() });
        }
        words.join(" ")
    }

    /// Distinct attribute words truly present in the scene.
    pub fn attribute_words(&self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        let mut add = |w: &'static str| {
            if !out.contains(&w) {
                out.push(w);
            }
        };
        for o in &self.objects {
            add(TYPES[o.kind]);
            add(COLORS[o.color]);
            add(SIZES[o.size]);
        }
        for &r in &self.relations {
            add(RELATION_ATTRIBUTES[r]);
        }
        out
    }
}

/// Every word an attribute detector can emit.
pub fn attribute_vocabulary() -> Vec<&'static str> {
    TYPES
        .iter()
        .chain(&COLORS)
        .chain(&SIZES)
        .chain(&RELATION_ATTRIBUTES)
        .copied()
        .collect()
}

/// Fixed random vectors for each type, color and size.
struct PropertyEmbedding {
    kinds: Vec<Vec<f64>>,
    colors: Vec<Vec<f64>>,
    sizes: Vec<Vec<f64>>,
}

impl PropertyEmbedding {
    fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(EMBEDDING_SEED);
        let normal = Normal::new(0.0, 1.0 / (PROPERTY_WIDTH as f64).sqrt()).unwrap();
        let mut table = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..PROPERTY_WIDTH).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        };
        Self {
            kinds: table(TYPES.len()),
            colors: table(COLORS.len()),
            sizes: table(SIZES.len()),
        }
    }

    fn embed(&self, o: &SceneObject) -> Vec<f64> {
        (0..PROPERTY_WIDTH)
            .map(|j| self.kinds[o.kind][j] + self.colors[o.color][j] + self.sizes[o.size][j])
            .collect()
    }
}

/// Displacement of object `i` from object `i + 1` under each relation.
fn relation_offset(r: usize) -> [f64; 3] {
    match r {
        0 => [-1.0, 0.0, 0.0],
        1 => [0.0, 0.0, 1.0],
        2 => [0.0, 1.0, 0.0],
        3 => [0.0, -1.0, 0.0],
        _ => [0.0, 0.0, -1.0],
    }
}

/// Noise-free region rows, one per object instance, in scene order.
/// Each row is the property embedding, then the object's position, then a
/// one-hot of the instance's ordinal within its group.
pub fn clean_regions(scene: &SceneSpec) -> Vec<Vec<f64>> {
    thread_local! {
        static EMBEDDING: PropertyEmbedding = PropertyEmbedding::new();
    }
    let n = scene.objects.len();
    let mut positions = vec![[0.0f64; 3]; n];
    for i in (0..n.saturating_sub(1)).rev() {
        let d = relation_offset(scene.relations[i]);
        for a in 0..3 {
            positions[i][a] = positions[i + 1][a] + 0.5 * d[a];
        }
    }
    EMBEDDING.with(|emb| {
        let mut rows = Vec::with_capacity(scene.region_count());
        for (o, p) in scene.objects.iter().zip(&positions) {
            let base = emb.embed(o);
            for ordinal in 0..o.count {
                let mut row = vec![0.0; REGION_WIDTH];
                row[..PROPERTY_WIDTH].copy_from_slice(&base);
                row[POSITION_OFFSET..POSITION_OFFSET + 3].copy_from_slice(p);
                row[COUNT_OFFSET + ordinal] = 1.0;
                rows.push(row);
            }
        }
        rows
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthExample {
    pub record: DatasetRecord,
    pub scene: SceneSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSplits {
    pub train: Vec<SynthExample>,
    pub val: Vec<SynthExample>,
    pub test: Vec<SynthExample>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 2000,
            n_val: 200,
            n_test: 200,
            noise_sigma: 0.1,
        }
    }
}

fn draw_scene(rng: &mut ChaCha8Rng) -> SceneSpec {
    let n = rng.random_range(1..=MAX_OBJECTS);
    let objects = (0..n)
        .map(|_| SceneObject {
            kind: rng.random_range(0..TYPES.len()),
            color: rng.random_range(0..COLORS.len()),
            size: rng.random_range(0..SIZES.len()),
            count: rng.random_range(1..=MAX_COUNT),
        })
        .collect();
    let relations = (1..n).map(|_| rng.random_range(0..RELATIONS.len())).collect();
    SceneSpec { objects, relations }
}

fn draw_attributes(scene: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<ScoredAttribute> {
    let present = scene.attribute_words();
    let mut out = Vec::new();
    for &w in &present {
        let score = rng.random_range(0.5..1.0);
        if rng.random::<f64>() >= ATTRIBUTE_DROPOUT {
            out.push(ScoredAttribute {
                word: w.into(),
                score,
            });
        }
    }
    for w in attribute_vocabulary() {
        if !present.contains(&w) && rng.random::<f64>() < DISTRACTOR_RATE {
            out.push(ScoredAttribute {
                word: w.into(),
                score: rng.random_range(0.0..0.6),
            });
        }
    }
    if !out.iter().any(|a| present.contains(&a.word.as_str())) {
        out.push(ScoredAttribute {
            word: present[0].into(),
            score: 0.5,
        });
    }
    out
}

fn render(
    image_id: String,
    scene: &SceneSpec,
    noise: &Normal<f64>,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DatasetRecord> {
    let mut rows = clean_regions(scene);
    if noise_sigma > 0.0 {
        for v in rows.iter_mut().flatten() {
            *v += noise.sample(rng);
        }
    }
    rows.shuffle(rng);
    let attributes = draw_attributes(scene, rng);
    let captions = (0..PREFIXES.len()).map(|p| scene.caption(p)).collect();
    DatasetRecord::new(image_id, &rows, attributes, captions)
}

/// Draws train, validation and test scenes with no scene repeated across
/// or within splits. Deterministic in `config.seed`.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthSplits> {
    let sizes = [config.n_train, config.n_val, config.n_test];
    if sizes.contains(&0) {
        return Err(CoreError::Config("split sizes must be positive".into()));
    }
    if !(config.noise_sigma >= 0.0 && config.noise_sigma.is_finite()) {
        return Err(CoreError::Config(format!(
            "noise sigma {} must be finite and non-negative",
            config.noise_sigma
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| CoreError::Config(e.to_string()))?;
    let mut seen = HashSet::new();
    let mut splits: Vec<Vec<SynthExample>> = Vec::new();
    for (name, &n) in ["train", "val", "test"].iter().zip(&sizes) {
        let mut split = Vec::with_capacity(n);
        while split.len() < n {
            let scene = draw_scene(&mut rng);
            if !seen.insert(scene.clone()) {
                continue;
            }
            let id = format!("{name}-{:05}", split.len());
            let record = render(id, &scene, &noise, config.noise_sigma, &mut rng)?;
            split.push(SynthExample { record, scene });
        }
        splits.push(split);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(SynthSplits { train, val, test })
}

/// Synthetic splits resolved against a vocabulary built from the training
/// captions.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub vocab: Vocabulary,
    pub train: Vec<CaptioningExample>,
    pub val: Vec<CaptioningExample>,
    pub test: Vec<CaptioningExample>,
    pub val_scenes: Vec<SceneSpec>,
    pub test_scenes: Vec<SceneSpec>,
}

impl SynthSplits {
    pub fn resolve(&self, min_count: usize) -> Result<SynthDataset> {
        let captions: Vec<Vec<String>> = self
            .train
            .iter()
            .flat_map(|e| e.record.caption_tokens())
            .collect();
        let vocab = Vocabulary::build(&captions, min_count);
        let load = |split: &[SynthExample]| -> Result<Vec<CaptioningExample>> {
            let records: Vec<DatasetRecord> = split.iter().map(|e| e.record.clone()).collect();
            let (examples, report) = load_examples(&records, &vocab, Some(REGION_WIDTH));
            if examples.len() != records.len() {
                return Err(CoreError::Data(format!(
                    "synthetic records rejected: {:?}",
                    report.rejected
                )));
            }
            Ok(examples)
        };
        let scenes = |split: &[SynthExample]| split.iter().map(|e| e.scene.clone()).collect();
        Ok(SynthDataset {
            train: load(&self.train)?,
            val: load(&self.val)?,
            test: load(&self.test)?,
            val_scenes: scenes(&self.val),
            test_scenes: scenes(&self.test),
            vocab,
        })
    }
}

/// Scene slots read back from a caption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedScene {
    pub objects: Vec<SceneObject>,
    pub relations: Vec<usize>,
}

fn position<S: AsRef<str>>(table: &[&str], w: &S) -> Option<usize> {
    table.iter().position(|t| *t == w.as_ref())
}

/// Parses a caption by the template grammar; `None` if it does not fit.
pub fn parse_caption<S: AsRef<str>>(tokens: &[S]) -> Option<ParsedScene> {
    let mut rest = tokens;
    for p in PREFIXES.iter().filter(|p| !p.is_empty()) {
        let pw: Vec<&str> = p.split(' ').collect();
        // "a photo of …" and "a <size> …" both start with "a".
        if rest.len() > pw.len() && rest.iter().zip(&pw).all(|(a, b)| a.as_ref() == *b) {
            rest = &rest[pw.len()..];
            break;
        }
    }
    let mut objects = Vec::new();
    let mut relations = Vec::new();
    loop {
        let [c, s, col, t, tail @ ..] = rest else {
            return None;
        };
        let count = position(&COUNT_WORDS, c)? + 1;
        let size = position(&SIZES, s)?;
        let color = position(&COLORS, col)?;
        let kind = TYPES
            .iter()
            .position(|k| *k == t.as_ref() || plural(k) == t.as_ref())?;
        objects.push(SceneObject {
            kind,
            color,
            size,
            count,
        });
        if tail.is_empty() {
            return Some(ParsedScene { objects, relations });
        }
        let (r, after) = RELATIONS.iter().enumerate().find_map(|(i, rel)| {
            let rw: Vec<&str> = rel.split(' ').collect();
            (tail.len() > rw.len() && tail.iter().zip(&rw).all(|(a, b)| a.as_ref() == *b))
                .then(|| (i, &tail[rw.len()..]))
        })?;
        relations.push(r);
        rest = after;
    }
}

/// Slot accuracies per category, pooled over all scenes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StructuredScore {
    pub objects: f64,
    pub attributes: f64,
    pub relations: f64,
    pub count: f64,
    /// Captions the grammar could not parse; all their slots count as misses.
    pub unparseable: usize,
    pub scenes: usize,
}

#[derive(Default)]
struct Tally {
    hit: usize,
    total: usize,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.hit += hit as usize;
    }

    fn rate(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.hit as f64 / self.total as f64
        }
    }
}

/// Exact-match accuracy of each category's slots against ground truth.
/// Object slots are aligned by position; missing slots are misses.
pub fn structured_score<S: AsRef<str>>(
    captions: &[Vec<S>],
    scenes: &[SceneSpec],
) -> Result<StructuredScore> {
    if captions.len() != scenes.len() {
        return Err(CoreError::Contract(format!(
            "{} captions for {} scenes",
            captions.len(),
            scenes.len()
        )));
    }
    let (mut obj, mut attr, mut rel, mut cnt) = Default::default();
    let mut unparseable = 0;
    for (cap, scene) in captions.iter().zip(scenes) {
        let parsed = parse_caption(cap);
        if parsed.is_none() {
            unparseable += 1;
        }
        let (objects, relations) = parsed.map_or((vec![], vec![]), |p| (p.objects, p.relations));
        for (i, truth) in scene.objects.iter().enumerate() {
            let got = objects.get(i);
            Tally::add(&mut obj, got.is_some_and(|g| g.kind == truth.kind));
            Tally::add(&mut attr, got.is_some_and(|g| g.color == truth.color));
            Tally::add(&mut attr, got.is_some_and(|g| g.size == truth.size));
            Tally::add(&mut cnt, got.is_some_and(|g| g.count == truth.count));
        }
        for (i, truth) in scene.relations.iter().enumerate() {
            Tally::add(&mut rel, relations.get(i) == Some(truth));
        }
    }
    let (obj, attr, rel, cnt): (Tally, Tally, Tally, Tally) = (obj, attr, rel, cnt);
    Ok(StructuredScore {
        objects: obj.rate(),
        attributes: attr.rate(),
        relations: rel.rate(),
        count: cnt.rate(),
        unparseable,
        scenes: scenes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use glied_metrics::tokenize;

    fn scene() -> SceneSpec {
        SceneSpec {
            objects: vec![
                SceneObject {
                    kind: 0,
                    color: 0,
                    size: 1,
                    count: 2,
                },
                SceneObject {
                    kind: 10,
                    color: 1,
                    size: 2,
                    count: 1,
                },
            ],
            relations: vec![4],
        }
    }

    #[test]
    fn caption_grammar() {
        let s = scene();
        assert_eq!(s.caption(0), "two small red dogs in front of a large blue box");
        assert_eq!(
            s.caption(1),
            "a photo of two small red dogs in front of a large blue box"
        );
        for p in 0..PREFIXES.len() {
            let parsed = parse_caption(&tokenize(&s.caption(p))).unwrap();
            assert_eq!(parsed.objects, s.objects);
            assert_eq!(parsed.relations, s.relations);
        }
        assert!(parse_caption(&tokenize("two small red dogs in front of")).is_none());
        assert!(parse_caption(&tokenize("")).is_none());
    }

    #[test]
    fn regions_follow_instances() {
        let s = scene();
        let rows = clean_regions(&s);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0][..COUNT_OFFSET], rows[1][..COUNT_OFFSET]);
        assert_eq!(rows[0][COUNT_OFFSET], 1.0);
        assert_eq!(rows[1][COUNT_OFFSET + 1], 1.0);
        // The dogs are in front of the box: smaller depth.
        assert!(rows[0][POSITION_OFFSET + 2] < rows[2][POSITION_OFFSET + 2]);
    }

    #[test]
    fn wrong_color_only_misses_attributes() {
        let s = scene();
        let cap = tokenize("two small green dogs in front of a large blue box");
        let r = structured_score(&[cap], &[s]).unwrap();
        assert_eq!((r.objects, r.relations, r.count), (1.0, 1.0, 1.0));
        assert_eq!(r.attributes, 0.75);
        assert_eq!(r.unparseable, 0);
    }
}
