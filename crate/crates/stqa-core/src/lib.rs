//! Two-stream spatiotemporal video question answering engine.
//!
//! Everything runs on the CPU in `f64` with a hand-rolled reverse-mode
//! autodiff tape, so the full pipeline (synthetic data, training,
//! evaluation, gradient checking) is self-contained and deterministic.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod scoring;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;
pub mod video;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use data::{Dataset, DatasetManifest, Example, ManifestRecord, QuestionType, Split};
pub use error::{EngineError, Result};
pub use gradcheck::{finite_diff_check, gradcheck_targets, run_target, FdConfig, FdReport};
pub use model::{ChannelConfig, ExampleInput, Model, StreamChannelConfig, TextChannelConfig};
pub use params::{BoundParams, ParamGroup, ParamSet};
pub use scoring::{Channel, ChannelScores, EnsembleScores};
pub use tape::{Tape, TapeAudit, Var};
pub use tensor::Tensor;
pub use text::{QueryPack, TokenSeq, Vocab};
pub use train::{
    evaluate, train_channel, EvalReport, OptimizerConfig, StopReason, TrainConfig, TrainOutcome,
};
pub use video::{InceptionSpec, StreamConfig, StreamKind, VideoClip};
