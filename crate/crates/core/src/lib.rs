//! Stacked acoustic-and-textual encoding (SATE) for end-to-end speech
//! translation, sized to train on a CPU against a synthetic corpus.

pub mod analysis;
pub mod corpus;
pub mod ctc;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod numerics;

pub use error::{Result, SateError};
