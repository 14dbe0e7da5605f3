use rand::seq::SliceRandom;
use rand::Rng;

use super::synth::Example;
use crate::error::{Result, SateError};
use crate::numerics::Tensor;

/// A group of examples with their lengths. Models consume the examples one
/// at a time; [`Batch::padded_features`] and [`Batch::frame_mask`] give the
/// padded view.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub examples: Vec<Example>,
    pub x_lens: Vec<usize>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        if examples.is_empty() {
            return Err(SateError::dim("batch", "no examples"));
        }
        let d = examples[0].features.cols();
        if examples.iter().any(|e| e.features.cols() != d) {
            return Err(SateError::dim("batch", "feature widths differ"));
        }
        Ok(Batch {
            x_lens: examples.iter().map(Example::frames).collect(),
            src_lens: examples.iter().map(|e| e.source.len()).collect(),
            tgt_lens: examples.iter().map(|e| e.target.len()).collect(),
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_frames(&self) -> usize {
        self.x_lens.iter().copied().max().unwrap_or(0)
    }

    pub fn total_frames(&self) -> usize {
        self.x_lens.iter().sum()
    }

    /// `[B × T_max × d_feat]`, zero padded.
    pub fn padded_features(&self) -> Tensor {
        let (b, t, d) = (self.len(), self.max_frames(), self.examples[0].features.cols());
        let mut data = vec![0.0f32; b * t * d];
        for (i, ex) in self.examples.iter().enumerate() {
            let off = i * t * d;
            data[off..off + ex.features.len()].copy_from_slice(ex.features.data());
        }
        Tensor::new(vec![b, t, d], data).expect("consistent extents")
    }

    /// `true` at valid frames of example `i`, padded to `max_frames`.
    pub fn frame_mask(&self, i: usize) -> Vec<bool> {
        (0..self.max_frames()).map(|t| t < self.x_lens[i]).collect()
    }

    /// Padded token ids (`pad` fills the tail) for sources or targets.
    pub fn padded_tokens(&self, target: bool, pad: usize) -> Vec<Vec<usize>> {
        let seqs: Vec<&Vec<usize>> = self
            .examples
            .iter()
            .map(|e| if target { &e.target } else { &e.source })
            .collect();
        let max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        seqs.iter()
            .map(|s| {
                let mut v = (*s).clone();
                v.resize(max, pad);
                v
            })
            .collect()
    }
}

/// Groups examples into batches of at most `max_frames` input frames (a
/// longer single example gets a batch of its own). Examples are sorted by
/// length so each batch holds similar lengths; batch order is shuffled.
pub fn make_batches(examples: &[Example], max_frames: usize, rng: &mut impl Rng) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| examples[i].frames());
    let mut batches = Vec::new();
    let mut cur: Vec<Example> = Vec::new();
    let mut frames = 0;
    for i in order {
        let f = examples[i].frames();
        if !cur.is_empty() && frames + f > max_frames {
            batches.push(Batch::new(std::mem::take(&mut cur)).expect("non-empty"));
            frames = 0;
        }
        frames += f;
        cur.push(examples[i].clone());
    }
    if !cur.is_empty() {
        batches.push(Batch::new(cur).expect("non-empty"));
    }
    batches.shuffle(rng);
    batches
}

/// Time and feature masking settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecAugment {
    pub n_time_masks: usize,
    /// Widest time mask as a share of the utterance.
    pub max_time_width: f64,
    pub n_feat_masks: usize,
    pub max_feat_width: f64,
}

impl Default for SpecAugment {
    fn default() -> Self {
        SpecAugment {
            n_time_masks: 2,
            max_time_width: 0.10,
            n_feat_masks: 1,
            max_feat_width: 0.25,
        }
    }
}

/// Masked share of frames is capped here whatever the settings say.
const MAX_TIME_MASKED: f64 = 0.40;

/// Zeroes random time spans and feature channels of `x: [T × d]`.
pub fn spec_augment_lite(x: &Tensor, cfg: &SpecAugment, rng: &mut impl Rng) -> Tensor {
    let (t, d) = x.dims2();
    let mut out = x.clone();
    let mut masked = vec![false; t];
    let budget = (MAX_TIME_MASKED * t as f64).floor() as usize;
    let widest = (cfg.max_time_width * t as f64).floor() as usize;
    for _ in 0..cfg.n_time_masks {
        let used = masked.iter().filter(|&&m| m).count();
        let width = rng.gen_range(0..=widest).min(budget - used);
        if width == 0 {
            continue;
        }
        let start = rng.gen_range(0..=t - width);
        masked[start..start + width].iter_mut().for_each(|m| *m = true);
    }
    let fwide = (cfg.max_feat_width * d as f64).floor() as usize;
    let mut fmask = vec![false; d];
    for _ in 0..cfg.n_feat_masks {
        let width = rng.gen_range(0..=fwide);
        if width == 0 {
            continue;
        }
        let start = rng.gen_range(0..=d - width);
        fmask[start..start + width].iter_mut().for_each(|m| *m = true);
    }
    let data = out.data_mut();
    for i in 0..t {
        for j in 0..d {
            if masked[i] || fmask[j] {
                data[i * d + j] = 0.0;
            }
        }
    }
    out
}
