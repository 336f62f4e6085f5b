//! Optimizer, training schedule, evaluation, checkpoints and attention inspection.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod gradcheck;
pub mod inspect;
pub mod model;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use config::{Ablation, TrainConfig};
pub use evaluate::{evaluate, rank_gallery, retrieve, EvalOptions, Query, Retrieved, RetrievalResult, SelectionStats};
pub use inspect::{inspect_attention, write_report, AttentionReport};
pub use model::Model;
pub use train::{train, EpochLog, Stage, StepLog, TrainOptions, TrainReport};
