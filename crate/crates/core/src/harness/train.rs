use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::eval::{decode_limit, dev_score};
use super::optim::{lr_at, Adam};
use crate::corpus::{make_batches, spec_augment_lite, Batch, Dataset, Example};
use crate::error::{Result, SateError};
use crate::model::{AnyModel, Checkpoint, TeacherBundle};
use crate::numerics::Tape;

/// One `(step, split, metric, value)` record.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn push(&mut self, step: usize, split: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            step,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| SateError::format("metrics csv", e.to_string()))?;
        let wrap = |e: csv::Error| SateError::format("metrics csv", e.to_string());
        w.write_record(["step", "split", "metric", "value"]).map_err(wrap)?;
        for r in &self.rows {
            w.write_record([r.step.to_string(), r.split.clone(), r.metric.clone(), r.value.to_string()])
                .map_err(wrap)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A checkpoint kept for its dev score.
#[derive(Debug, Clone)]
pub struct Retained {
    pub step: usize,
    /// Higher is better.
    pub score: f64,
    pub checkpoint: Checkpoint,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    /// Best first; at most `keep_best` entries.
    pub best: Vec<Retained>,
    pub last: Checkpoint,
    pub log: MetricsLog,
}

impl TrainOutcome {
    /// Parameter average of the retained checkpoints.
    pub fn averaged(&self) -> Result<Checkpoint> {
        let ckpts: Vec<&Checkpoint> = self.best.iter().map(|r| &r.checkpoint).collect();
        super::average::average_checkpoints(&ckpts)
    }
}

struct BestK {
    keep: usize,
    dir: Option<PathBuf>,
    entries: Vec<Retained>,
}

impl BestK {
    fn offer(&mut self, step: usize, score: f64, model: &AnyModel) -> Result<()> {
        let pos = self.entries.iter().position(|r| score > r.score).unwrap_or(self.entries.len());
        if pos >= self.keep {
            return Ok(());
        }
        let checkpoint = model.checkpoint();
        let path = match &self.dir {
            Some(d) => {
                let p = d.join(format!("step{step:07}.ckpt"));
                checkpoint.save(&p)?;
                Some(p)
            }
            None => None,
        };
        self.entries.insert(
            pos,
            Retained {
                step,
                score,
                checkpoint,
                path,
            },
        );
        while self.entries.len() > self.keep {
            if let Some(p) = self.entries.pop().and_then(|r| r.path) {
                fs::remove_file(p)?;
            }
        }
        Ok(())
    }
}

fn augment(batch: &Batch, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
    match &cfg.spec_augment {
        None => Ok(batch.clone()),
        Some(sa) => Batch::new(
            batch
                .examples
                .iter()
                .map(|ex| Example {
                    features: spec_augment_lite(&ex.features, sa, rng),
                    ..ex.clone()
                })
                .collect(),
        ),
    }
}

fn grads_finite(model: &AnyModel) -> bool {
    model
        .store()
        .iter()
        .all(|(_, t)| t.grad().map_or(true, |g| g.iter().all(|v| v.is_finite())))
}

/// Trains `model` in place. Deterministic given `cfg.seed`: batch order,
/// dropout masks and feature masking all derive from it.
///
/// A non-finite loss or gradient aborts with [`SateError::Diverged`]; the
/// parameters from before the failing update are saved as `last_good.ckpt`
/// when a checkpoint directory is configured.
pub fn train(
    model: &mut AnyModel,
    data: &Dataset,
    cfg: &TrainConfig,
    teachers: Option<&TeacherBundle>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(d) = &cfg.ckpt_dir {
        fs::create_dir_all(d)?;
    }
    let mut adam = Adam::new(model.store(), cfg.adam);
    let mut best = BestK {
        keep: cfg.keep_best,
        dir: cfg.ckpt_dir.clone(),
        entries: Vec::new(),
    };
    let mut log = MetricsLog::default();
    let mut step = 0;
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let speech = model.kind().reads_speech();
    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        for batch in make_batches(&data.train, cfg.batch_frames, &mut rng) {
            step += 1;
            let batch = if speech { augment(&batch, cfg, &mut rng)? } else { batch };
            let mut tape = Tape::training(cfg.seed.wrapping_mul(1_000_003).wrapping_add(step as u64));
            let loss = model.loss(&mut tape, &batch, teachers)?;
            let value = loss.value(&tape);
            if value.is_finite() {
                tape.backward(loss.total)?;
                model.store_mut().absorb_grads(&tape);
            }
            if !value.is_finite() || !grads_finite(model) {
                model.store_mut().zero_grads();
                let last_good = match &cfg.ckpt_dir {
                    Some(d) => {
                        let p = d.join("last_good.ckpt");
                        model.checkpoint().save(&p)?;
                        Some(p)
                    }
                    None => None,
                };
                return Err(SateError::Diverged { step, last_good });
            }
            adam.step(model.store_mut(), lr_at(step, cfg.peak_lr, cfg.warmup))?;
            loss_sum += value;
            loss_n += 1;
            let done = cfg.max_steps > 0 && step >= cfg.max_steps;
            if step % cfg.eval_interval == 0 || done {
                evaluate_now(model, data, cfg, step, epoch, &mut log, &mut best, &mut loss_sum, &mut loss_n)?;
            }
            if done {
                break 'epochs;
            }
        }
    }
    if step % cfg.eval_interval != 0 && !(cfg.max_steps > 0 && step >= cfg.max_steps) {
        evaluate_now(model, data, cfg, step, cfg.epochs, &mut log, &mut best, &mut loss_sum, &mut loss_n)?;
    }
    let last = model.checkpoint();
    if let Some(d) = &cfg.ckpt_dir {
        last.save(&d.join("last.ckpt"))?;
    }
    Ok(TrainOutcome {
        steps: step,
        best: best.entries,
        last,
        log,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_now(
    model: &AnyModel,
    data: &Dataset,
    cfg: &TrainConfig,
    step: usize,
    epoch: usize,
    log: &mut MetricsLog,
    best: &mut BestK,
    loss_sum: &mut f64,
    loss_n: &mut usize,
) -> Result<()> {
    if *loss_n > 0 {
        log.push(step, "train", "loss", *loss_sum / *loss_n as f64);
    }
    log.push(step, "train", "epoch", epoch as f64);
    (*loss_sum, *loss_n) = (0.0, 0);
    let dev: Vec<&Example> = data.dev.iter().take(cfg.dev_limit).collect();
    let (metric, value, score) = dev_score(model, &dev, decode_limit(&data.spec))?;
    log.push(step, "dev", metric, value);
    best.offer(step, score, model)
}
