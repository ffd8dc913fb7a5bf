//! Corpus ingestion, vocabulary, synthetic tasks, BLEU, and evaluation
//! reports.

pub mod bleu;
pub mod eval;
pub mod task;
pub mod vocab;

pub use bleu::corpus_bleu;
pub use eval::{bucketed_eval, gate_weight_report, BucketStats, EvalReport, LayerGate};
pub use task::{generate_task, load_parallel, write_parallel, TaskKind, TaskSpec};
pub use vocab::{build_vocab, decode_ids, encode_line, Vocab};
