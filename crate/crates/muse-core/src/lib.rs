//! Sequence-to-sequence toolkit built around a parallel multi-scale attention
//! block: self-attention, gated dynamic convolution over a shared value
//! projection, and a pointwise feed-forward network evaluated as parallel
//! branches of one residual module.
//!
//! The crate is self-contained: a minimal reverse-mode autodiff substrate
//! ([`tensor`]), the block itself ([`block`]), encoder/decoder assembly with a
//! fused-parameter execution path ([`model`], [`fuse`], [`infer`]), training
//! machinery ([`optim`], [`batch`], [`checkpoint`], [`trainer`]), beam-search
//! inference ([`decode`]), and synthetic-task data plus evaluation ([`data`]).

pub mod batch;
pub mod bench;
pub mod block;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod fuse;
pub mod infer;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use batch::{plan_token_batches, BatchPlan};
pub use block::{
    AttentionParams, AttnMask, BlockConfig, BlockMode, BlockParams, ConvCellParams, ConvKind,
    Dropout, FfnParams, GateParams, Projection, SharedProjection,
};
pub use checkpoint::{average_checkpoints, Checkpoint};
pub use data::{
    build_vocab, bucketed_eval, corpus_bleu, decode_ids, encode_line, gate_weight_report,
    generate_task, EvalReport, TaskKind, TaskSpec, Vocab,
};
pub use decode::{
    beam_search, greedy_decode, length_penalty, BeamConfig, Hypothesis, IncrementalScorer,
};
pub use error::{MuseError, Result};
pub use fuse::{fuse_parameters, FusedModel, FusedScorer};
pub use infer::{decode_step, encode, DecoderCache, EncoderState, ModelScorer};
pub use model::{
    build_masks, positional_encoding, ModelConfig, ModelParams, PositionalKind, BOS, EOS, PAD, UNK,
};
pub use optim::{
    adam_step, lr_cosine, lr_inverse_sqrt, AdamState, GradAccumulator, ScheduleConfig,
    ScheduleKind,
};
pub use params::{ParamId, ParamStore};
pub use tensor::{finite_diff_check, Elem, Tape, Tensor, Var};
pub use trainer::{frame_pair, TrainConfig, Trainer};
