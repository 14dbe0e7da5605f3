//! Attention localness: how much of each query's attention falls within a
//! small window around its own position.

mod localness;
mod report;

pub use localness::{layer_localness, localness, localness_with_window, window, WINDOW_RULE};
pub use report::{
    emit_csv, evaluation_slice, layer_report, load_trace, model_report, save_trace, write_csv, Group,
    LayerLocalness, LocalnessReport, EVAL_SEED, EVAL_UTTERANCES,
};
