//! ASR, MT, vanilla end-to-end ST and SATE models, their objectives,
//! checkpoints and decoding.

mod adaptor;
mod any;
mod checkpoint;
mod loss;
mod models;
mod parts;
mod pretrain;
mod search;

pub use adaptor::{fuse, mapped, soft_embedding, Adaptor};
pub use any::AnyModel;
pub use checkpoint::{Checkpoint, MAGIC};
pub use loss::{interpolate, loss_asr, loss_mt, loss_mtkd, loss_sate, LossBreakdown};
pub use models::{
    AsrModel, Cascade, E2eModel, ModelKind, MtModel, SateActivations, SateModel, SpeechTranslator, StForward,
    TeacherBundle,
};
pub use parts::{AcousticEncoder, AcousticOutput, TranslationHead};
pub use pretrain::{transplant, PretrainFlags};
pub use search::{beam_search, greedy_search, Hypothesis, StepFn, EOS};

#[cfg(test)]
mod tests;
