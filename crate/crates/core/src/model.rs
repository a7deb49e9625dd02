//! The cross-modal base decoder and the GLIED distilling stages.
//!
//! One flag-parametrized model covers every ablation: the base path is the
//! code path taken with all flags off, so the all-off configuration is the
//! base model by construction rather than by a parallel implementation.

use std::collections::{BTreeMap, HashMap};

use glied_tensor::{ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    g_block, glorot, multi_head, post_process, AttentionMask, GBlockParams, MultiHeadParams,
    PostProcessParams,
};
use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::trace::{AttentionTrace, Matrix};
use crate::vocab::{BOS, EOS, PAD};

/// Precomputed sources for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput {
    /// `k×d_r` region features.
    pub regions: Tensor,
    /// Attribute token ids, already truncated to at most `k`.
    pub attributes: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
struct VisualDistill {
    h_vd: MultiHeadParams,
    g: GBlockParams,
    post: PostProcessParams,
}

#[derive(Clone, Copy, Debug)]
struct AttributeDistill {
    h_ad: MultiHeadParams,
    g: GBlockParams,
}

#[derive(Clone, Copy, Debug)]
struct LocalDistill {
    h_vl: MultiHeadParams,
    h_al: MultiHeadParams,
    g: GBlockParams,
}

#[derive(Clone, Copy, Debug)]
struct Wiring {
    words: ParamId,
    attributes: ParamId,
    embed_proj: ParamId,
    region_proj: ParamId,
    h_x: MultiHeadParams,
    g_x: GBlockParams,
    h_v: MultiHeadParams,
    h_a: MultiHeadParams,
    g_c: GBlockParams,
    post: PostProcessParams,
    w_c: ParamId,
    visual: Option<VisualDistill>,
    attribute: Option<AttributeDistill>,
    local: Option<LocalDistill>,
}

impl Wiring {
    fn register(c: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let (d_h, d_f) = (c.d_h, c.d_f);
        store.insert("embed.words", glorot(c.vocab_size, c.d_e, rng)?)?;
        store.alias("embed.attributes", "embed.words")?;
        store.insert("embed.proj", glorot(c.d_e, d_h, rng)?)?;
        store.insert("regions.proj", glorot(c.d_r, d_h, rng)?)?;
        MultiHeadParams::register(store, "context.h_x", d_h, c.heads, rng)?;
        GBlockParams::register(store, "context.g", d_h)?;
        MultiHeadParams::register(store, "cross.h_v", d_h, 1, rng)?;
        MultiHeadParams::alias(store, "cross.h_a", "cross.h_v", 1)?;
        GBlockParams::register(store, "cross.g", d_h)?;
        PostProcessParams::register(store, "post", d_h, d_f, rng)?;
        store.insert("output.w_c", glorot(d_h, c.vocab_size, rng)?)?;
        if c.flags.global_visual {
            MultiHeadParams::register(store, "visual_distill.h_vd", d_h, c.heads, rng)?;
            GBlockParams::register(store, "visual_distill.g", d_h)?;
            PostProcessParams::register(store, "visual_distill.post", d_h, d_f, rng)?;
        }
        if c.flags.global_attribute {
            MultiHeadParams::register(store, "attribute_distill.h_ad", d_h, 1, rng)?;
            GBlockParams::register(store, "attribute_distill.g", d_h)?;
        }
        if c.flags.local_distill {
            MultiHeadParams::register(store, "local.h_vl", d_h, 1, rng)?;
            MultiHeadParams::alias(store, "local.h_al", "local.h_vl", 1)?;
            GBlockParams::register(store, "local.g", d_h)?;
        }
        Ok(())
    }

    fn lookup(c: &ModelConfig, s: &ParamStore) -> Result<Self> {
        let visual = if c.flags.global_visual {
            Some(VisualDistill {
                h_vd: MultiHeadParams::lookup(s, "visual_distill.h_vd", c.heads)?,
                g: GBlockParams::lookup(s, "visual_distill.g")?,
                post: PostProcessParams::lookup(s, "visual_distill.post")?,
            })
        } else {
            None
        };
        let attribute = if c.flags.global_attribute {
            Some(AttributeDistill {
                h_ad: MultiHeadParams::lookup(s, "attribute_distill.h_ad", 1)?,
                g: GBlockParams::lookup(s, "attribute_distill.g")?,
            })
        } else {
            None
        };
        let local = if c.flags.local_distill {
            Some(LocalDistill {
                h_vl: MultiHeadParams::lookup(s, "local.h_vl", 1)?,
                h_al: MultiHeadParams::lookup(s, "local.h_al", 1)?,
                g: GBlockParams::lookup(s, "local.g")?,
            })
        } else {
            None
        };
        Ok(Self {
            words: s.require("embed.words")?,
            attributes: s.require("embed.attributes")?,
            embed_proj: s.require("embed.proj")?,
            region_proj: s.require("regions.proj")?,
            h_x: MultiHeadParams::lookup(s, "context.h_x", c.heads)?,
            g_x: GBlockParams::lookup(s, "context.g")?,
            h_v: MultiHeadParams::lookup(s, "cross.h_v", 1)?,
            h_a: MultiHeadParams::lookup(s, "cross.h_a", 1)?,
            g_c: GBlockParams::lookup(s, "cross.g")?,
            post: PostProcessParams::lookup(s, "post")?,
            w_c: s.require("output.w_c")?,
            visual,
            attribute,
            local,
        })
    }
}

/// Scalar parameter counts, shared storage counted once.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct ParameterCount {
    pub total: usize,
    /// Keyed by the first segment of the parameter name.
    pub components: BTreeMap<String, usize>,
}

/// Image-side encodings on a graph.
#[derive(Clone, Debug)]
pub struct Sources {
    /// Projected regions `I`.
    pub regions: Var,
    /// Embedded attributes `A`.
    pub attributes: Var,
    /// Distilled regions `Ĩ`, when global visual distilling is on.
    pub distilled: Option<Var>,
    distill_weights: Vec<Var>,
}

#[derive(Default)]
struct RowTrace {
    context: Vec<Var>,
    visual: Option<Var>,
    attribute: Option<Var>,
    attribute_distill: Option<Var>,
    local_visual: Option<Var>,
    local_attribute: Option<Var>,
}

/// Teacher-forced outputs for a whole caption.
pub struct SequenceOutput {
    /// `T×|D|` logits, row `t` predicting token `t + 1`.
    pub logits: Var,
    pub trace: AttentionTrace,
}

#[derive(Clone, Debug)]
pub struct GliedModel {
    config: ModelConfig,
    store: ParamStore,
    w: Wiring,
}

impl GliedModel {
    /// Fresh model with Glorot-initialized weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Wiring::register(&config, &mut store, &mut rng)?;
        let w = Wiring::lookup(&config, &store)?;
        Ok(Self { config, store, w })
    }

    /// Rebuilds a model around existing storage, checking its layout.
    pub fn from_parts(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut reference = ParamStore::new();
        Wiring::register(&config, &mut reference, &mut ChaCha8Rng::seed_from_u64(0))?;
        let layout = |s: &ParamStore| -> Vec<(String, Vec<usize>)> {
            s.iter()
                .map(|(_, n, t)| (n.to_string(), t.shape().to_vec()))
                .collect()
        };
        let (mut want, mut got) = (layout(&reference), layout(&store));
        want.sort();
        got.sort();
        if want != got {
            return Err(CoreError::Corrupt(
                "parameter names or shapes do not match the configuration".into(),
            ));
        }
        let aliases = |s: &ParamStore| -> Vec<(String, String)> {
            s.aliases()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect()
        };
        if aliases(&reference) != aliases(&store) {
            return Err(CoreError::Corrupt("weight-sharing links do not match".into()));
        }
        let w = Wiring::lookup(&config, &store)?;
        Ok(Self { config, store, w })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> ParameterCount {
        let mut components = BTreeMap::new();
        for (_, name, t) in self.store.iter() {
            let key = name.split('.').next().unwrap_or(name).to_string();
            *components.entry(key).or_insert(0) += t.len();
        }
        ParameterCount {
            total: self.store.num_scalars(),
            components,
        }
    }

    fn check_image(&self, image: &ImageInput) -> Result<()> {
        let (k, d_r) = image.regions.dims2()?;
        if d_r != self.config.d_r {
            return Err(CoreError::Data(format!(
                "region width {d_r}, model expects {}",
                self.config.d_r
            )));
        }
        if image.attributes.is_empty() || image.attributes.len() > k {
            return Err(CoreError::Data(format!(
                "{} attributes for {k} regions",
                image.attributes.len()
            )));
        }
        Ok(())
    }

    /// `I = R·W_r`, with no positional term.
    pub fn project_regions(&self, g: &mut Graph, regions: &Tensor) -> Result<Var> {
        let r = g.constant(regions.clone());
        let w = g.param(self.w.region_proj);
        Ok(g.tape.matmul(r, w)?)
    }

    fn embed(&self, g: &mut Graph, table: ParamId, ids: &[usize]) -> Result<Var> {
        let t = g.param(table);
        let e = g.tape.gather_rows(t, ids)?;
        let p = g.param(self.w.embed_proj);
        Ok(g.tape.matmul(e, p)?)
    }

    /// Word inputs for positions `start..start + ids.len()`.
    pub fn embed_words(&self, g: &mut Graph, ids: &[usize], start: usize) -> Result<Var> {
        let e = self.embed(g, self.w.words, ids)?;
        let pe = positional_encoding(start, ids.len(), self.config.d_h)?;
        let x = g.tape.add_const(e, &pe)?;
        g.dropout(x)
    }

    pub fn encode(&self, g: &mut Graph, image: &ImageInput) -> Result<Sources> {
        self.check_image(image)?;
        let regions = self.project_regions(g, &image.regions)?;
        let a = self.embed(g, self.w.attributes, &image.attributes)?;
        let attributes = g.dropout(a)?;
        let (distilled, distill_weights) = match &self.w.visual {
            Some(v) => {
                let h = multi_head(g, regions, regions, regions, &v.h_vd, None)?;
                let i1 = g_block(g, h.output, regions, &v.g)?;
                let it = post_process(g, i1, regions, &v.post)?;
                (Some(it), h.weights)
            }
            None => (None, Vec::new()),
        };
        Ok(Sources {
            regions,
            attributes,
            distilled,
            distill_weights,
        })
    }

    /// The context query: `t̃ = G(H_ad(x, A, A), x)` with attribute
    /// distilling, otherwise `x` itself.
    fn pivot(&self, g: &mut Graph, src: &Sources, x: Var, rt: &mut RowTrace) -> Result<Var> {
        match &self.w.attribute {
            Some(a) => {
                let h = multi_head(g, x, src.attributes, src.attributes, &a.h_ad, None)?;
                rt.attribute_distill = Some(h.weights[0]);
                g_block(g, h.output, x, &a.g)
            }
            None => Ok(x),
        }
    }

    /// Everything after the pivot, for query rows `tq` against context keys
    /// `tk`. `x` supplies the outer residual of the post-processing block.
    fn decode_rows(
        &self,
        g: &mut Graph,
        src: &Sources,
        x: Var,
        tq: Var,
        tk: Var,
        mask: Option<&AttentionMask>,
        rt: &mut RowTrace,
    ) -> Result<Var> {
        let w = &self.w;
        let hx = multi_head(g, tq, tk, tk, &w.h_x, mask)?;
        rt.context = hx.weights;
        let xt = g_block(g, hx.output, tq, &w.g_x)?;
        let vis = src.distilled.unwrap_or(src.regions);
        let hv = multi_head(g, xt, vis, vis, &w.h_v, None)?;
        rt.visual = Some(hv.weights[0]);
        let mut sum = hv.output;
        if self.config.flags.first_stage_semantic() {
            let ha = multi_head(g, xt, src.attributes, src.attributes, &w.h_a, None)?;
            rt.attribute = Some(ha.weights[0]);
            sum = g.tape.add(sum, ha.output)?;
        }
        let c = g_block(g, sum, xt, &w.g_c)?;
        let mut out = post_process(g, c, x, &w.post)?;
        if let Some(l) = &w.local {
            let hv = multi_head(g, out, src.regions, src.regions, &l.h_vl, None)?;
            let ha = multi_head(g, out, src.attributes, src.attributes, &l.h_al, None)?;
            rt.local_visual = Some(hv.weights[0]);
            rt.local_attribute = Some(ha.weights[0]);
            let s = g.tape.add(hv.output, ha.output)?;
            out = g_block(g, s, out, &l.g)?;
        }
        let wc = g.param(w.w_c);
        Ok(g.tape.matmul(out, wc)?)
    }

    /// Parallel forward over `inputs` (starting with BOS) under a causal mask.
    pub fn forward_sequence(
        &self,
        g: &mut Graph,
        src: &Sources,
        inputs: &[usize],
    ) -> Result<SequenceOutput> {
        if inputs.first() != Some(&BOS) {
            return Err(CoreError::Contract("input sequence must start with BOS".into()));
        }
        if inputs.len() > self.config.max_len {
            return Err(CoreError::Data(format!(
                "{} input tokens exceed max length {}",
                inputs.len(),
                self.config.max_len
            )));
        }
        let mut rt = RowTrace::default();
        let x = self.embed_words(g, inputs, 0)?;
        let t = self.pivot(g, src, x, &mut rt)?;
        let mask = AttentionMask::causal(inputs.len())?;
        let logits = self.decode_rows(g, src, x, t, t, Some(&mask), &mut rt)?;
        let trace = self.collect_trace(g, src, &rt)?;
        Ok(SequenceOutput { logits, trace })
    }

    /// Teacher-forced pass over a full `[BOS, …, EOS]` caption, returning the
    /// logits and the mean cross-entropy against the shifted caption.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        image: &ImageInput,
        caption: &[usize],
    ) -> Result<(SequenceOutput, Var)> {
        if caption.len() < 2 || caption[0] != BOS || caption[caption.len() - 1] != EOS {
            return Err(CoreError::Contract(
                "caption must start with BOS and end with EOS".into(),
            ));
        }
        let src = self.encode(g, image)?;
        let out = self.forward_sequence(g, &src, &caption[..caption.len() - 1])?;
        let loss = g.tape.cross_entropy(out.logits, &caption[1..], PAD)?;
        Ok((out, loss))
    }

    fn collect_trace(&self, g: &Graph, src: &Sources, rt: &RowTrace) -> Result<AttentionTrace> {
        let m = |v: Var| matrix(g.value(v));
        let opt = |v: Option<Var>| v.map(m).transpose();
        Ok(AttentionTrace {
            context: rt.context.iter().map(|&v| m(v)).collect::<Result<_>>()?,
            visual: m(rt.visual.expect("visual attention always runs"))?,
            attribute: opt(rt.attribute)?,
            visual_distill: if src.distill_weights.is_empty() {
                None
            } else {
                Some(src.distill_weights.iter().map(|&v| m(v)).collect::<Result<_>>()?)
            },
            attribute_distill: opt(rt.attribute_distill)?,
            local_visual: opt(rt.local_visual)?,
            local_attribute: opt(rt.local_attribute)?,
        })
    }

    /// An inference session for one image.
    pub fn session(&self, image: &ImageInput) -> Result<DecoderSession<'_>> {
        let mut graph = Graph::eval(&self.store);
        let src = self.encode(&mut graph, image)?;
        Ok(DecoderSession {
            model: self,
            graph,
            src,
            cache: HashMap::new(),
        })
    }
}

fn matrix(t: &Tensor) -> Result<Matrix> {
    let (r, _) = t.dims2()?;
    (0..r).map(|i| Ok(t.row(i)?.to_vec())).collect()
}

/// Sinusoidal encodings for positions `start..start + n`.
pub fn positional_encoding(start: usize, n: usize, d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * d);
    for pos in start..start + n {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Ok(Tensor::matrix(n, d, data)?)
}

/// Incremental decoding state: cached context rows and the next position.
#[derive(Clone, Debug, Default)]
pub struct DecoderState {
    keys: Vec<Var>,
    pos: usize,
}

impl DecoderState {
    pub fn timestep(&self) -> usize {
        self.pos
    }
}

/// Eval-mode decoding over one image; image encodings are computed once.
pub struct DecoderSession<'m> {
    model: &'m GliedModel,
    graph: Graph<'m>,
    src: Sources,
    cache: HashMap<Vec<usize>, DecoderState>,
}

impl<'m> DecoderSession<'m> {
    pub fn model(&self) -> &'m GliedModel {
        self.model
    }

    pub fn initial_state(&self) -> DecoderState {
        DecoderState::default()
    }

    /// `Ĩ` as cached for this image.
    pub fn distilled(&self) -> Option<&Tensor> {
        self.src.distilled.map(|v| self.graph.value(v))
    }

    pub fn regions(&self) -> &Tensor {
        self.graph.value(self.src.regions)
    }

    /// Feeds `token` at the state's position and returns next-token logits.
    pub fn step(&mut self, state: &mut DecoderState, token: usize) -> Result<(Vec<f64>, AttentionTrace)> {
        if state.pos == 0 && token != BOS {
            return Err(CoreError::Contract(
                "decoding must begin with the BOS token".into(),
            ));
        }
        if token >= self.model.config.vocab_size {
            return Err(CoreError::Data(format!("token id {token} out of range")));
        }
        let model = self.model;
        let g = &mut self.graph;
        let mut rt = RowTrace::default();
        let x = model.embed_words(g, &[token], state.pos)?;
        let t = model.pivot(g, &self.src, x, &mut rt)?;
        state.keys.push(t);
        state.pos += 1;
        let keys = if state.keys.len() == 1 {
            t
        } else {
            g.tape.concat(&state.keys, 0)?
        };
        let logits = model.decode_rows(g, &self.src, x, t, keys, None, &mut rt)?;
        let trace = model.collect_trace(g, &self.src, &rt)?;
        Ok((g.value(logits).data().to_vec(), trace))
    }

    /// Log-probabilities of the token following `prefix` (which starts with
    /// BOS). States of previously seen prefixes are reused.
    pub fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(CoreError::Contract("empty prefix".into()));
        }
        let mut known = prefix.len() - 1;
        while known > 0 && !self.cache.contains_key(&prefix[..known]) {
            known -= 1;
        }
        let mut state = if known == 0 {
            self.initial_state()
        } else {
            self.cache[&prefix[..known]].clone()
        };
        let mut logits = Vec::new();
        for i in known..prefix.len() {
            logits = self.step(&mut state, prefix[i])?.0;
            self.cache.insert(prefix[..=i].to_vec(), state.clone());
        }
        Ok(log_softmax(&logits))
    }
}

/// Numerically stable log-softmax of a plain slice.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|&v| v - lse).collect()
}
