use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Which distilling stages are wired in. All off is the base model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    pub global_visual: bool,
    pub global_attribute: bool,
    pub local_distill: bool,
}

impl AblationFlags {
    pub const BASE: Self = Self {
        global_visual: false,
        global_attribute: false,
        local_distill: false,
    };
    pub const GLIED: Self = Self {
        global_visual: true,
        global_attribute: true,
        local_distill: true,
    };

    /// Semantic attention is dropped from the first cross-modal stage when
    /// attribute collocations already enrich the query, so attributes enter
    /// that stage once.
    pub fn first_stage_semantic(&self) -> bool {
        !self.global_attribute
    }
}

/// Named variants selectable from the command line.
pub const VARIANTS: &[(&str, AblationFlags)] = &[
    ("base", AblationFlags::BASE),
    (
        "base+gvd",
        AblationFlags {
            global_visual: true,
            global_attribute: false,
            local_distill: false,
        },
    ),
    (
        "base+gad",
        AblationFlags {
            global_visual: false,
            global_attribute: true,
            local_distill: false,
        },
    ),
    (
        "base+gd",
        AblationFlags {
            global_visual: true,
            global_attribute: true,
            local_distill: false,
        },
    ),
    (
        "base+local",
        AblationFlags {
            global_visual: false,
            global_attribute: false,
            local_distill: true,
        },
    ),
    ("glied", AblationFlags::GLIED),
];

pub fn variant(name: &str) -> Result<AblationFlags> {
    VARIANTS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, f)| *f)
        .ok_or_else(|| {
            let known: Vec<&str> = VARIANTS.iter().map(|(n, _)| *n).collect();
            CoreError::Config(format!("unknown model `{name}`; known: {}", known.join(", ")))
        })
}

pub fn variant_name(flags: AblationFlags) -> Option<&'static str> {
    VARIANTS.iter().find(|(_, f)| *f == flags).map(|(n, _)| *n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_e: usize,
    pub d_h: usize,
    pub d_r: usize,
    pub d_f: usize,
    /// Heads of the word-context and region self-attentions.
    pub heads: usize,
    pub dropout: f64,
    /// Longest generated sequence, EOS included.
    pub max_len: usize,
    pub flags: AblationFlags,
}

impl ModelConfig {
    /// Full-scale COCO sizes.
    pub fn full_scale(flags: AblationFlags) -> Self {
        Self {
            vocab_size: 9487,
            d_e: 256,
            d_h: 512,
            d_r: 2048,
            d_f: 2048,
            heads: 8,
            dropout: 0.1,
            max_len: 20,
            flags,
        }
    }

    /// A tiny configuration for gradient and equivalence checks.
    pub fn micro(flags: AblationFlags) -> Self {
        Self {
            vocab_size: 7,
            d_e: 4,
            d_h: 8,
            d_r: 5,
            d_f: 12,
            heads: 2,
            dropout: 0.1,
            max_len: 8,
            flags,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_e", self.d_e),
            ("d_h", self.d_h),
            ("d_r", self.d_r),
            ("d_f", self.d_f),
            ("heads", self.heads),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CoreError::Config(format!("{name} must be positive")));
        }
        if self.d_h % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "heads {} must divide d_h {}",
                self.heads, self.d_h
            )));
        }
        if self.vocab_size <= crate::vocab::RESERVED.len() {
            return Err(CoreError::Config(
                "vocabulary must extend past the reserved tokens".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_by_name() {
        for (name, flags) in VARIANTS {
            assert_eq!(variant(name).unwrap(), *flags);
            assert_eq!(variant_name(*flags), Some(*name));
        }
        assert!(variant("resnet").is_err());
        assert!(AblationFlags::BASE.first_stage_semantic());
        assert!(!AblationFlags::GLIED.first_stage_semantic());
    }

    #[test]
    fn validation_rejects_bad_sizes() {
        let mut c = ModelConfig::micro(AblationFlags::BASE);
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }
}
