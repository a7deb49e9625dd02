use serde::{Deserialize, Serialize};

pub type Matrix = Vec<Vec<f64>>;

/// Every attention distribution of one forward pass. Per-query matrices
/// have one row per decoding timestep.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    /// Word-context self-attention, one matrix per head.
    pub context: Vec<Matrix>,
    /// First cross-modal stage over regions (distilled ones when enabled).
    pub visual: Matrix,
    /// First cross-modal stage over attributes, when present.
    pub attribute: Option<Matrix>,
    /// Region self-attention, one `k×k` matrix per head.
    pub visual_distill: Option<Vec<Matrix>>,
    /// Pivot-word attention over attributes.
    pub attribute_distill: Option<Matrix>,
    pub local_visual: Option<Matrix>,
    pub local_attribute: Option<Matrix>,
}

impl AttentionTrace {
    /// Every stored distribution, labelled `name[head][row]`.
    pub fn distributions(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        fn push<'a>(out: &mut Vec<(String, &'a [f64])>, name: &str, m: &'a Matrix) {
            for (i, r) in m.iter().enumerate() {
                out.push((format!("{name}[{i}]"), r.as_slice()));
            }
        }
        for (h, m) in self.context.iter().enumerate() {
            push(&mut out, &format!("context[{h}]"), m);
        }
        push(&mut out, "visual", &self.visual);
        if let Some(m) = &self.attribute {
            push(&mut out, "attribute", m);
        }
        for (h, m) in self.visual_distill.iter().flatten().enumerate() {
            push(&mut out, &format!("visual_distill[{h}]"), m);
        }
        for (name, m) in [
            ("attribute_distill", &self.attribute_distill),
            ("local_visual", &self.local_visual),
            ("local_attribute", &self.local_attribute),
        ] {
            if let Some(m) = m {
                push(&mut out, name, m);
            }
        }
        out
    }

    /// Largest `|Σ row − 1|` over all distributions.
    pub fn max_normalization_error(&self) -> f64 {
        self.distributions()
            .iter()
            .map(|(_, r)| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Number of decoding timesteps recorded.
    pub fn steps(&self) -> usize {
        self.visual.len()
    }

    /// The per-query rows of timestep `t`; region self-attention is shared.
    pub fn step(&self, t: usize) -> AttentionTrace {
        let row = |m: &Matrix| vec![m[t].clone()];
        AttentionTrace {
            context: self.context.iter().map(row).collect(),
            visual: row(&self.visual),
            attribute: self.attribute.as_ref().map(row),
            visual_distill: self.visual_distill.clone(),
            attribute_distill: self.attribute_distill.as_ref().map(row),
            local_visual: self.local_visual.as_ref().map(row),
            local_attribute: self.local_attribute.as_ref().map(row),
        }
    }
}
