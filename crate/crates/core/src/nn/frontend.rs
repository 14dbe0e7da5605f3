use rand::Rng;

use super::layers::Linear;
use super::params::ParamStore;
use crate::error::{Result, SateError};
use crate::numerics::{Tape, Var};

const KERNEL: usize = 3;
const STRIDE: usize = 2;

/// Two stride-2 time convolutions followed by a projection to `d_model`:
/// `[T0×d_feat] → [⌈⌈T0/2⌉/2⌉×d_model]`.
#[derive(Debug, Clone)]
pub struct ConvFrontend {
    conv1: Linear,
    conv2: Linear,
    proj: Linear,
}

impl ConvFrontend {
    pub const MIN_FRAMES: usize = 4;

    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_feat: usize, d_model: usize) -> Self {
        ConvFrontend {
            conv1: Linear::new(store, rng, &format!("{name}.conv1"), KERNEL * d_feat, d_model),
            conv2: Linear::new(store, rng, &format!("{name}.conv2"), KERNEL * d_model, d_model),
            proj: Linear::new(store, rng, &format!("{name}.proj"), d_model, d_model),
        }
    }

    pub fn output_len(frames: usize) -> usize {
        frames.div_ceil(STRIDE).div_ceil(STRIDE)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let frames = tape.value(x).rows();
        if frames < Self::MIN_FRAMES {
            return Err(SateError::InputTooShort {
                len: frames,
                min: Self::MIN_FRAMES,
            });
        }
        let h = tape.im2col(x, KERNEL, STRIDE)?;
        let h = self.conv1.forward(tape, store, h)?;
        let h = tape.relu(h)?;
        let h = tape.im2col(h, KERNEL, STRIDE)?;
        let h = self.conv2.forward(tape, store, h)?;
        let h = tape.relu(h)?;
        self.proj.forward(tape, store, h)
    }
}
