//! Training, evaluation, checkpointing and ablation drivers.

mod ablate;
mod checkpoint;
mod config;
mod data;
mod dump;
mod evaluate;
mod train;

pub use ablate::{
    ablate, ablation_configs, combined_table, AblationAxis, AblationReport, AblationRun, MODALITY_RUNS, PATH_RUNS,
};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
pub use config::{DataSource, EvalConfig, EvalTarget, OptimConfig, RunConfig};
pub use data::{load_data, EpisodeRef, Workspace};
pub use dump::dump_priors;
pub use evaluate::{eval_episodes, evaluate, predict, ClassScore, EvalReport};
pub use train::{train, StepRecord, TrainState};
