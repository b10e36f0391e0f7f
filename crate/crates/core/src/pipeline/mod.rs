//! Model assembly, training, evaluation, checkpoints and ablations.

mod ablate;
mod checkpoint;
mod config;
mod eval;
mod gradcheck;
mod model;
mod optim;
mod train;

pub use ablate::{ablate, AblationReport, AblationRow, Variant};
pub use checkpoint::{
    checkpoint_precision, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointView,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{load_toml, to_toml, ModelConfig, OptimizerConfig, OptimizerKind, Precision, TrainConfig};
pub use eval::{
    average_precision, evaluate, join_qar, load_predictions, metrics_from_predictions, predict, ranking, save_predictions, JointReport, MetricsReport, Prediction,
};
pub use gradcheck::{model_grad_check, tiny_example, GRADCHECK_EPS};
pub use model::{forward, ForwardOutput, MemoryPair, Model};
pub use optim::{clip_global_norm, Adam};
pub use train::{train, EpochRecord, NoObserver, TrainObserver, TrainOutcome, CHECKPOINT_FILE, METRICS_FILE};
