pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod optim;
pub mod probe;
pub mod pretrain;
pub mod prompt;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use backbone::{Backbone, BackboneConfig};
pub use error::{Error, Result};
pub use prompt::{PromptDims, PromptKind, PromptParams};
pub use tensor::Tensor;
