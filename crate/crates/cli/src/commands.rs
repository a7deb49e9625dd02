use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use glied_core::checkpoint;
use glied_core::config::{variant, variant_name};
use glied_core::dataset::{
    load_examples, read_records, truncate_attributes, write_records, CaptioningExample, DatasetRecord,
};
use glied_core::decoding::{beam_search, DecodeOptions, Hypothesis};
use glied_core::synth::{structured_score, synth_generate, SceneSpec, StructuredScore, SynthConfig};
use glied_core::training::{
    decode_all, score_captions, train_cross_entropy, train_scst, MetricBundle, Phase, TrainConfig,
};
use glied_core::vocab::{Vocabulary, BOS, RESERVED, UNK};
use glied_core::{AblationFlags, AttentionTrace, Graph, GliedModel, ImageInput, ModelConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::manifest::RunManifest;
use crate::{report, svg, PhaseArg};

const SPLITS: [&str; 3] = ["train", "val", "test"];

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_data(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_records(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn vocab_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name("vocab.json")
}

/// A checkpoint and the vocabulary saved beside it.
fn load_checkpoint(path: &Path) -> Result<(GliedModel, Vocabulary)> {
    let model = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let vp = vocab_path(path);
    let text = fs::read_to_string(&vp).with_context(|| format!("reading {}", vp.display()))?;
    let vocab: Vocabulary = serde_json::from_str(&text).with_context(|| format!("parsing {}", vp.display()))?;
    ensure!(
        vocab.len() == model.config().vocab_size,
        "{} has {} words but the checkpoint expects {}",
        vp.display(),
        vocab.len(),
        model.config().vocab_size
    );
    Ok((model, vocab))
}

fn load_split(
    path: &Path,
    vocab: &Vocabulary,
    d_r: usize,
) -> Result<(Vec<CaptioningExample>, glied_core::dataset::LoadReport)> {
    let records = read_data(path)?;
    let (examples, load) = load_examples(&records, vocab, Some(d_r));
    if !load.rejected.is_empty() {
        eprintln!("warning: {}: rejected {:?}", path.display(), load.rejected);
    }
    ensure!(!examples.is_empty(), "{}: no usable records", path.display());
    Ok((examples, load))
}

pub fn synth_data(seed: u64, n_train: usize, n_val: usize, n_test: usize, noise: f64, out: &Path) -> Result<()> {
    let config = SynthConfig {
        seed,
        n_train,
        n_val,
        n_test,
        noise_sigma: noise,
    };
    let splits = synth_generate(&config)?;
    create_dir(out)?;
    let mut scenes = Vec::new();
    for (name, split) in SPLITS.iter().zip([&splits.train, &splits.val, &splits.test]) {
        let records: Vec<DatasetRecord> = split.iter().map(|e| e.record.clone()).collect();
        let path = out.join(format!("{name}.jsonl"));
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write_records(&mut w, &records)?;
        w.flush()?;
        for e in split.iter() {
            scenes.push(SceneLine {
                image_id: e.record.image_id.clone(),
                split: name.to_string(),
                scene: e.scene.clone(),
            });
        }
    }
    report::write_lines(&out.join("scenes.jsonl"), &scenes)?;
    let mut m = RunManifest::new("synth-data");
    m.seed = Some(seed);
    m.setting("n_train", &n_train)?;
    m.setting("n_val", &n_val)?;
    m.setting("n_test", &n_test)?;
    m.setting("noise_sigma", &noise)?;
    report::write(&out.join("manifest.json"), &m)?;
    println!(
        "wrote {} train, {} val, {} test scenes to {}",
        n_train,
        n_val,
        n_test,
        out.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SceneLine {
    image_id: String,
    split: String,
    scene: SceneSpec,
}

/// Model sizes not fixed by the data.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelShape {
    d_e: usize,
    d_h: usize,
    d_f: usize,
    heads: usize,
    dropout: f64,
    max_len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: ModelShape,
    min_count: usize,
    xe: TrainConfig,
    scst: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelShape {
                d_e: 32,
                d_h: 32,
                d_f: 64,
                heads: 4,
                dropout: 0.1,
                max_len: 30,
            },
            min_count: 5,
            xe: TrainConfig {
                batch_size: 16,
                max_epochs: 20,
                learning_rate: 1e-3,
                patience: 3,
                ..TrainConfig::default()
            },
            scst: TrainConfig {
                batch_size: 16,
                max_epochs: 4,
                learning_rate: 5e-5,
                patience: 2,
                ..TrainConfig::scst()
            },
        }
    }
}

/// Recursively overlays the objects of `top` onto `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn with_overrides<T: Serialize + for<'de> Deserialize<'de>>(default: &T, path: Option<&Path>) -> Result<T> {
    let mut value = serde_json::to_value(default)?;
    if let Some(p) = path {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let top: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        ensure!(top.is_object(), "{} must hold a JSON object", p.display());
        merge(&mut value, top);
    }
    serde_json::from_value(value).map_err(|e| anyhow!("invalid configuration: {e}"))
}

fn optional_file(path: PathBuf) -> Option<PathBuf> {
    path.exists().then_some(path)
}

pub fn train(
    data: &Path,
    model_name: &str,
    phase: PhaseArg,
    config_path: Option<&Path>,
    init: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut config: RunConfig = with_overrides(&RunConfig::default(), config_path)?;
    if let Some(s) = seed {
        config.xe.seed = s;
        config.scst.seed = s;
    }
    config.xe.phase = Phase::CrossEntropy;
    config.scst.phase = Phase::Scst;
    let train_path = data.join("train.jsonl");
    let val_path = optional_file(data.join("val.jsonl"));
    let train_records = read_data(&train_path)?;
    ensure!(!train_records.is_empty(), "{} is empty", train_path.display());

    let flags = variant(model_name)?;
    let (mut model, vocab) = match (init, phase) {
        (Some(p), _) => {
            let (m, v) = load_checkpoint(p)?;
            ensure!(
                m.config().flags == flags,
                "{} holds `{}`, not `{model_name}`",
                p.display(),
                variant_name(m.config().flags).unwrap_or("a custom variant")
            );
            (m, v)
        }
        (None, PhaseArg::Scst) => bail!("SCST starts from a trained model; pass --init"),
        (None, PhaseArg::Xe) => {
            let captions: Vec<Vec<String>> = train_records.iter().flat_map(|r| r.caption_tokens()).collect();
            let vocab = Vocabulary::build(&captions, config.min_count);
            let s = &config.model;
            let mc = ModelConfig {
                vocab_size: vocab.len(),
                d_e: s.d_e,
                d_h: s.d_h,
                d_r: train_records[0].d_r,
                d_f: s.d_f,
                heads: s.heads,
                dropout: s.dropout,
                max_len: s.max_len,
                flags,
            };
            (GliedModel::new(mc, config.xe.seed)?, vocab)
        }
    };
    let d_r = model.config().d_r;
    let (train_set, _) = load_split(&train_path, &vocab, d_r)?;
    let val_set = match &val_path {
        Some(p) => load_split(p, &vocab, d_r)?.0,
        None => Vec::new(),
    };

    let train_config = match phase {
        PhaseArg::Xe => &config.xe,
        PhaseArg::Scst => &config.scst,
    };
    let run = match phase {
        PhaseArg::Xe => train_cross_entropy(&mut model, &train_set, &val_set, &vocab, train_config)?,
        PhaseArg::Scst => train_scst(&mut model, &train_set, &val_set, &vocab, train_config)?,
    };

    create_dir(out)?;
    let ckpt = out.join("model.ckpt");
    checkpoint::save(&model, &ckpt)?;
    fs::write(out.join("vocab.json"), serde_json::to_string(&vocab)?)?;
    report::write_lines(&out.join("train_log.jsonl"), &run.epochs)?;

    let mut m = RunManifest::new("train");
    m.seed = Some(train_config.seed);
    m.input(&train_path)?;
    if let Some(p) = &val_path {
        m.input(p)?;
    }
    if let Some(p) = init {
        m.input(p)?;
    }
    m.setting("model", model.config())?;
    m.setting("train", train_config)?;
    m.setting("min_count", &config.min_count)?;
    m.checkpoint = Some(ckpt.display().to_string());
    report::write(&out.join("manifest.json"), &m)?;

    match run.best_cider {
        Some(c) => println!(
            "trained {} epochs; best epoch {} with validation CIDEr-D {c:.6}; saved {}",
            run.epochs.len(),
            run.best_epoch,
            ckpt.display()
        ),
        None => println!("trained {} epochs; saved {}", run.epochs.len(), ckpt.display()),
    }
    Ok(())
}

fn beam_decoder(beam: usize) -> impl Fn(&mut glied_core::DecoderSession<'_>, &DecodeOptions) -> glied_core::Result<Hypothesis> {
    move |s, o| Ok(beam_search(s, beam, o)?.swap_remove(0))
}

fn read_scenes(path: &Path) -> Result<BTreeMap<String, SceneSpec>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let s: SceneLine =
                serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1))?;
            Ok((s.image_id, s.scene))
        })
        .collect()
}

#[derive(Serialize)]
struct EvalReport {
    manifest: RunManifest,
    beam: usize,
    images: usize,
    metrics: MetricBundle,
    structured_score: Option<StructuredScore>,
    load: glied_core::dataset::LoadReport,
}

pub fn evaluate(checkpoint: &Path, data: &Path, beam: usize, scenes: Option<&Path>, out: &Path) -> Result<()> {
    ensure!(beam > 0, "beam width must be positive");
    let (model, vocab) = load_checkpoint(checkpoint)?;
    let (examples, load) = load_split(data, &vocab, model.config().d_r)?;
    let decoded = decode_all(&model, &examples, beam_decoder(beam))?;
    let words: Vec<Vec<String>> = decoded.iter().map(|c| vocab.decode(c)).collect();
    let metrics = score_captions(&examples, &words)?;

    let scene_path = match scenes {
        Some(p) => Some(p.to_path_buf()),
        None => optional_file(data.with_file_name("scenes.jsonl")),
    };
    let structured = match &scene_path {
        Some(p) => {
            let table = read_scenes(p)?;
            let matched: Option<Vec<SceneSpec>> =
                examples.iter().map(|e| table.get(&e.image_id).cloned()).collect();
            match (matched, scenes) {
                (Some(s), _) => Some(structured_score(&words, &s)?),
                (None, Some(_)) => bail!("{} lacks scenes for some images", p.display()),
                (None, None) => None,
            }
        }
        None => None,
    };

    let mut m = RunManifest::new("evaluate");
    m.input(checkpoint)?;
    m.input(data)?;
    if let (Some(p), Some(_)) = (&scene_path, &structured) {
        m.input(p)?;
    }
    m.setting("beam", &beam)?;
    m.checkpoint = Some(checkpoint.display().to_string());
    let r = EvalReport {
        manifest: m,
        beam,
        images: examples.len(),
        metrics,
        structured_score: structured,
        load,
    };
    report::write(out, &r)?;
    println!(
        "CIDEr-D {:.6} BLEU-4 {:.6} ROUGE-L {:.6} over {} images",
        r.metrics.cider_d,
        r.metrics.bleu[3],
        r.metrics.rouge_l,
        r.images
    );
    Ok(())
}

/// Model input for a record, whether or not it carries captions.
fn image_input(rec: &DatasetRecord, vocab: &Vocabulary, d_r: usize) -> Result<ImageInput> {
    ensure!(rec.d_r == d_r, "{}: d_r {} but the model expects {d_r}", rec.image_id, rec.d_r);
    let regions = rec.region_matrix()?;
    let scored: Vec<(usize, f64)> = rec
        .attributes
        .iter()
        .filter_map(|a| vocab.get(&a.word).filter(|&id| id >= RESERVED.len()).map(|id| (id, a.score)))
        .collect();
    let attributes: Vec<usize> = truncate_attributes(&scored, rec.k).into_iter().map(|a| a.0).collect();
    ensure!(!attributes.is_empty(), "{}: no attribute word is in the vocabulary", rec.image_id);
    Ok(ImageInput { regions, attributes })
}

#[derive(Serialize)]
struct CaptionLine {
    image_id: String,
    caption: String,
    log_prob: f64,
}

pub fn caption(checkpoint: &Path, input: &Path, beam: usize, out: Option<&Path>) -> Result<()> {
    ensure!(beam > 0, "beam width must be positive");
    let (model, vocab) = load_checkpoint(checkpoint)?;
    let opts = DecodeOptions::captions(model.config().max_len);
    let mut lines = Vec::new();
    for rec in read_data(input)? {
        let image = image_input(&rec, &vocab, model.config().d_r)?;
        let mut s = model.session(&image)?;
        let best = beam_search(&mut s, beam, &opts)?.swap_remove(0);
        lines.push(CaptionLine {
            image_id: rec.image_id,
            caption: vocab.decode(&best.tokens).join(" "),
            log_prob: best.log_prob,
        });
    }
    match out {
        Some(p) => {
            report::write_lines(p, &lines)?;
            let mut m = RunManifest::new("caption");
            m.input(checkpoint)?;
            m.input(input)?;
            m.setting("beam", &beam)?;
            m.checkpoint = Some(checkpoint.display().to_string());
            let mp = p.with_extension("manifest.json");
            report::write(&mp, &m)?;
        }
        None => {
            let mut w = io::stdout().lock();
            for l in &lines {
                writeln!(w, "{}", report::to_string(l)?)?;
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TraceDump<'a> {
    image_id: &'a str,
    caption: Vec<String>,
    /// The word predicted at each traced timestep.
    steps: Vec<String>,
    attributes: Vec<String>,
    regions: usize,
    trace: &'a AttentionTrace,
}

pub fn inspect_attention(checkpoint: &Path, data: &Path, image_id: &str, beam: usize, out_dir: &Path) -> Result<()> {
    ensure!(beam > 0, "beam width must be positive");
    let (model, vocab) = load_checkpoint(checkpoint)?;
    let rec = read_data(data)?
        .into_iter()
        .find(|r| r.image_id == image_id)
        .ok_or_else(|| anyhow!("no image `{image_id}` in {}", data.display()))?;
    let image = image_input(&rec, &vocab, model.config().d_r)?;
    let opts = DecodeOptions::captions(model.config().max_len);
    let mut session = model.session(&image)?;
    let tokens = beam_search(&mut session, beam, &opts)?.swap_remove(0).tokens;

    ensure!(!tokens.is_empty(), "empty caption for `{image_id}`");
    let mut inputs = vec![BOS];
    inputs.extend(&tokens[..tokens.len() - 1]);
    let mut g = Graph::eval(model.store());
    let src = model.encode(&mut g, &image)?;
    let trace = model.forward_sequence(&mut g, &src, &inputs)?.trace;
    let err = trace.max_normalization_error();
    ensure!(err <= 1e-9, "attention rows deviate from 1 by {err:e}; nothing written");

    let word = |t: usize| vocab.word(t).unwrap_or(RESERVED[UNK]).to_string();
    let steps: Vec<String> = tokens.iter().map(|&t| word(t)).collect();
    let attributes: Vec<String> = image.attributes.iter().map(|&t| word(t)).collect();
    let k = image.regions.dims2()?.0;
    let regions: Vec<String> = (0..k).map(|i| format!("r{i}")).collect();

    create_dir(out_dir)?;
    let dump = TraceDump {
        image_id,
        caption: vocab.decode(&tokens),
        steps: steps.clone(),
        attributes: attributes.clone(),
        regions: k,
        trace: &trace,
    };
    report::write(&out_dir.join("trace.json"), &dump)?;
    let mut written = vec!["trace.json".to_string()];
    let mut put = |name: String, body: String| -> Result<()> {
        fs::write(out_dir.join(&name), body)?;
        written.push(name);
        Ok(())
    };
    for (h, m) in trace.visual_distill.iter().flatten().enumerate() {
        put(
            format!("region_self_attention_head{h}.svg"),
            svg::heatmap(&format!("{image_id}: region self-attention, head {h}"), m, &regions, &regions),
        )?;
    }
    if let Some(m) = &trace.attribute_distill {
        put(
            "attribute_collocation.svg".into(),
            svg::bars(&format!("{image_id}: attribute collocation per step"), m, &steps, &attributes),
        )?;
    }
    if let Some(m) = &trace.local_visual {
        put(
            "local_visual.svg".into(),
            svg::heatmap(&format!("{image_id}: local visual attention"), m, &steps, &regions),
        )?;
    }
    if let Some(m) = &trace.local_attribute {
        put(
            "local_attribute.svg".into(),
            svg::heatmap(&format!("{image_id}: local attribute attention"), m, &steps, &attributes),
        )?;
    }
    put(
        "visual.svg".into(),
        svg::heatmap(&format!("{image_id}: visual attention"), &trace.visual, &steps, &regions),
    )?;
    if let Some(m) = &trace.attribute {
        put(
            "attribute.svg".into(),
            svg::heatmap(&format!("{image_id}: attribute attention"), m, &steps, &attributes),
        )?;
    }

    let mut m = RunManifest::new("inspect-attention");
    m.input(checkpoint)?;
    m.input(data)?;
    m.setting("image_id", &image_id)?;
    m.setting("beam", &beam)?;
    m.checkpoint = Some(checkpoint.display().to_string());
    report::write(&out_dir.join("manifest.json"), &m)?;
    println!("{}: \"{}\"", image_id, dump.caption.join(" "));
    println!("wrote {}", written.join(", "));
    Ok(())
}

fn millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

pub fn params(model_name: &str, config_path: Option<&Path>) -> Result<()> {
    let flags = variant(model_name)?;
    let config: ModelConfig = with_overrides(&ModelConfig::full_scale(flags), config_path)?;
    let count = |f: AblationFlags| -> Result<usize> {
        Ok(GliedModel::new(ModelConfig { flags: f, ..config.clone() }, 0)?.parameter_count().total)
    };
    let model = GliedModel::new(ModelConfig { flags, ..config.clone() }, 0)?;
    let pc = model.parameter_count();
    println!(
        "{model_name}: |D|={} d_e={} d_h={} d_r={} d_f={} heads={}",
        config.vocab_size, config.d_e, config.d_h, config.d_r, config.d_f, config.heads
    );
    for (name, n) in &pc.components {
        println!("  {name:<20} {n:>12}");
    }
    println!("  {:<20} {:>12} ({})", "total", pc.total, millions(pc.total));
    let (base, glied) = (count(AblationFlags::BASE)?, count(AblationFlags::GLIED)?);
    println!("comparison       computed     reported");
    println!("  base      {:>12}        12.3M", millions(base));
    println!("  glied     {:>12}        18.3M", millions(glied));
    println!(
        "  delta     {:>12}         6.0M  (glied - base = {})",
        millions(glied - base),
        glied - base
    );
    Ok(())
}
