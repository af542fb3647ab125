//! Hypertuning at desk scale: a hypermodel reads few-shot examples and emits
//! prefix or LoRA parameters for a frozen encoder-decoder language model.

pub mod checkpoint;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod hyper;
pub mod model;
pub mod par;
pub mod peft;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Grads, Graph, ParamId, ParamStore, Parameter, Precision, Tensor, Var};
