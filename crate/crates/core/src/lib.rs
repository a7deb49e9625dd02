//! The GLIED caption decoder with its base model, ablation variants,
//! decoding strategies, synthetic scene data and training loops.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoding;
pub mod error;
pub mod graph;
pub mod model;
pub mod synth;
pub mod trace;
pub mod training;
pub mod vocab;

pub use config::{AblationFlags, ModelConfig};
pub use error::{CoreError, Result};
pub use graph::Graph;
pub use model::{DecoderSession, DecoderState, GliedModel, ImageInput, ParameterCount};
pub use trace::AttentionTrace;
