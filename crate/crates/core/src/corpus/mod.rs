//! Synthetic speech-translation triples, batching, augmentation, metrics.

mod batch;
mod io;
mod metrics;
mod synth;

pub use batch::{make_batches, spec_augment_lite, Batch, SpecAugment};
pub use io::{dataset_digest, load_dataset, read_split, save_dataset, write_split};
pub use metrics::{bleu4, corpus_wer, edit_distance, wer};
pub use synth::{generate, Dataset, Example, SynthSpec};
