//! Dense `f64` tensors, a reverse-mode gradient tape, named parameter
//! storage and an Adam optimizer.

mod error;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{clip_global_norm, AdamState};
pub use params::{Binding, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
