//! Cleaning noisy question/response pairs into a question-answer dataset.
//!
//! A compact transformer encoder scores whether a question is plausible,
//! whether a response plausibly answers it, and extracts the answer span from
//! the response. The crate covers corpus handling ([`dataset`]), input packing
//! ([`tokenizer`]), the model and its gradients ([`model`]), multi-task
//! training ([`training`]), evaluation ([`metrics`]), persistence
//! ([`checkpoint`]) and the two-stage cleaning pipeline ([`pipeline`]).

pub mod checkpoint;
pub mod dataset;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tokenizer;
pub mod training;

pub use checkpoint::Checkpoint;
pub use dataset::{AnswerSpan, ClassProportions, QAExample};
pub use model::{ModelConfig, ModelOutput, ModelParams};
pub use pipeline::{Pipeline, PipelineConfig, PredictionRecord};
pub use tokenizer::{TokenizedInput, Vocab};
pub use training::{TaskSet, TrainConfig};
