//! Adaptive attention time decoding on a small reverse-mode autodiff engine.
//!
//! The crate holds everything below the command line: tensors and the tape,
//! the layers, the attention modules, the halting kernel, the decoder in its
//! three modes, a synthetic region-captioning task, metrics and training.

pub mod archive;
pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod error;
pub mod features;
pub mod halting;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod trace;
pub mod train;
pub mod vocab;

pub use attention::{AttentionConfig, AttentionKind};
pub use autodiff::{Gradients, Tape, Var};
pub use data::{Dataset, Example};
pub use decoder::{Decoding, Mode, Model, ModelConfig, SequenceOutput};
pub use error::{Error, Result};
pub use features::FeatureSet;
pub use halting::{HaltOutcome, HaltingConfig};
pub use metrics::EvalReport;
pub use synth::SynthConfig;
pub use tensor::Tensor;
pub use trace::{HaltingTrace, StepTrace, TraceRecord};
pub use train::{EpochLog, TrainConfig};
pub use vocab::Vocab;
