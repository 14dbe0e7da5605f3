use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ctc;
use crate::error::{Result, SateError};
use crate::numerics::Tensor;

/// Generator settings. Token ids run `1..=vocab_size`; 0 is reserved for
/// the CTC blank and the decoder's sentence boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Encoder-rate frames per source token, inclusive range.
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    /// Raw frames per encoder-rate frame; 4 matches the frontend.
    pub frame_repeat: usize,
    pub d_feat: usize,
    pub noise: f32,
    pub permute_vocab: bool,
    /// Share of tokens that swap places with their right neighbour.
    pub swap_fraction: f64,
    pub allow_repeats: bool,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab_size: 40,
            min_len: 4,
            max_len: 16,
            min_frames_per_token: 2,
            max_frames_per_token: 5,
            frame_repeat: 4,
            d_feat: 16,
            noise: 0.1,
            permute_vocab: true,
            swap_fraction: 0.5,
            allow_repeats: false,
            n_train: 8000,
            n_dev: 500,
            n_test: 500,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SateError::config(m.to_string()));
        if self.vocab_size == 0 || self.d_feat == 0 || self.frame_repeat == 0 {
            return bad("vocab_size, d_feat and frame_repeat must be positive");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if self.min_frames_per_token == 0 || self.min_frames_per_token > self.max_frames_per_token {
            return bad("need 1 <= min_frames_per_token <= max_frames_per_token");
        }
        if !self.allow_repeats && self.vocab_size < 2 && self.max_len > 1 {
            return bad("a single-token vocabulary forces repeats");
        }
        if !(0.0..=1.0).contains(&self.swap_fraction) || !(self.noise >= 0.0) {
            return bad("swap_fraction must lie in [0, 1] and noise must be non-negative");
        }
        Ok(())
    }

    /// The fixed source-to-target rule: a permutation table (index 0
    /// unused) and the set of tokens that trigger a swap.
    fn translation_rule(&self) -> (Vec<usize>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7472_616e);
        let mut perm: Vec<usize> = (0..=self.vocab_size).collect();
        if self.permute_vocab {
            perm[1..].shuffle(&mut rng);
        }
        let n_swap = (self.swap_fraction * self.vocab_size as f64).round() as usize;
        let mut ids: Vec<usize> = (1..=self.vocab_size).collect();
        ids.shuffle(&mut rng);
        let mut swaps = vec![false; self.vocab_size + 1];
        for &t in &ids[..n_swap] {
            swaps[t] = true;
        }
        (perm, swaps)
    }

    fn prototypes(&self) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7072_6f74);
        let n = Normal::new(0.0f32, 1.0).expect("unit normal");
        (0..=self.vocab_size)
            .map(|_| (0..self.d_feat).map(|_| n.sample(&mut rng)).collect())
            .collect()
    }
}

/// One `(x, y^s, y^t)` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// `[T0 × d_feat]` input features.
    pub features: Tensor,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl Example {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Example]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(SateError::config(format!("unknown split {other:?}"))),
        }
    }
}

/// Applies the permutation, then swaps each trigger token with its right
/// neighbour, scanning left to right and never reusing a swapped position.
pub(crate) fn translate(source: &[usize], perm: &[usize], swaps: &[bool]) -> Vec<usize> {
    let mut out: Vec<usize> = source.iter().map(|&s| perm[s]).collect();
    let mut i = 0;
    while i + 1 < source.len() {
        if swaps[source[i]] {
            out.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    out
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let (perm, swaps) = spec.translation_rule();
    let protos = spec.prototypes();
    let noise = Normal::new(0.0f32, spec.noise.max(f32::MIN_POSITIVE)).expect("valid sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |n: usize| -> Result<Vec<Example>> {
        (0..n)
            .map(|_| {
                let len = rng.gen_range(spec.min_len..=spec.max_len);
                let mut source = Vec::with_capacity(len);
                while source.len() < len {
                    let t = rng.gen_range(1..=spec.vocab_size);
                    if spec.allow_repeats || source.last() != Some(&t) {
                        source.push(t);
                    }
                }
                let mut data = Vec::new();
                for &tok in &source {
                    let reps = rng.gen_range(spec.min_frames_per_token..=spec.max_frames_per_token)
                        * spec.frame_repeat;
                    for _ in 0..reps {
                        for &p in &protos[tok] {
                            let e = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                            data.push(p + e);
                        }
                    }
                }
                let frames = data.len() / spec.d_feat;
                if !ctc::is_feasible(&source, frames.div_ceil(4)) {
                    return Err(SateError::Contract(format!(
                        "generated {frames} frames for {} tokens; CTC infeasible after downsampling",
                        source.len()
                    )));
                }
                let target = translate(&source, &perm, &swaps);
                Ok(Example {
                    features: Tensor::new(vec![frames, spec.d_feat], data)?,
                    source,
                    target,
                })
            })
            .collect()
    };
    let train = draw(spec.n_train)?;
    let dev = draw(spec.n_dev)?;
    let test = draw(spec.n_test)?;
    Ok(Dataset {
        spec: spec.clone(),
        train,
        dev,
        test,
    })
}
