//! Dual-resolution parallel speech-text language modeling.
//!
//! One backbone step carries one text token and a group of `k` raw speech
//! tokens: grouping compresses the speech stream on the way in, and a small
//! autoregressive refiner expands each backbone step back into `k` raw
//! tokens on the way out. Both streams share a single causal backbone, so
//! text and speech generation condition on each other step by step.
//!
//! The crate covers the whole desk-scale loop: synthetic oracle corpora and
//! the seven interaction patterns, the model itself, multi-task training
//! with a two-stage interpolated schedule, parallel decoding, gradient
//! checking and a grouping-factor compute benchmark. Start with the
//! runnable examples in `examples/`.

pub mod align;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod dualres;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod model;
pub mod optim;
pub mod pattern;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use align::{
    align_streams, build_pattern_sample, build_prompt_prefix, pad_speech_to_group,
    AlignedSequence, DialogueTurn, Role, StepTag,
};
pub use checkpoint::{merge_checkpoints, Checkpoint, TensorData};
pub use config::{ModelConfig, Stage, TrainConfig, TrainSchedule};
pub use corpus::{synth_corpus, synth_corpus_all_patterns, CorpusRecord, OracleParams};
pub use error::{Error, Result};
pub use model::{family_of, Model, ParamFamily};
pub use pattern::{system_prompt_text, InteractionPattern, ALL_PATTERNS};
pub use scalar::{Dtype, Scalar};
pub use vocab::Vocabulary;
