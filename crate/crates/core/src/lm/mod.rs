//! Character-level autoregressive policy: tokenizer, transformer,
//! sampling, losses, optimizer and checkpointing.

pub mod adam;
pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod sampler;
pub mod vocab;

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use loss::{loss_and_gradients, LossOutput, LossSpec, SurrogateSample};
pub use model::{log_softmax_f64, ForwardTrace, Model, ModelConfig, Params};
pub use sampler::{sample_sequence, SampleOutput, SamplerConfig};
pub use vocab::{TokenSequence, Vocabulary};
