//! Training loop, optimization, checkpoint averaging, evaluation and the
//! experiment recipes behind the command line.

mod average;
mod config;
mod eval;
mod experiments;
mod manifest;
mod optim;
mod train;

pub use average::average_checkpoints;
pub use config::{parse_pairs, ExperimentRecipe, InitSource, LossKind, Settings, SystemKind, TrainConfig};
pub use eval::{decode_limit, evaluate, evaluate_examples, EvalRecord, System};
pub use optim::{lr_at, Adam, AdamParams};
pub use train::{train, MetricRow, MetricsLog, Retained, TrainOutcome};
pub use experiments::{
    ablate_adaptor, ablate_pretrain, asr_config, recipe_model, run_ctc_position_sweep, run_recipe, save_sweep, write_ablation_csv,
    write_sweep_csv, AblationRow, Pretrained, SweepRow, Trained,
};
pub use manifest::{Manifest, MANIFEST_FILE};
