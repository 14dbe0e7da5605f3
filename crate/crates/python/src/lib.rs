//! Python bindings: corpus generation, training, decoding, metrics, CTC and
//! localness.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sate::analysis::{evaluation_slice, model_report, EVAL_SEED, EVAL_UTTERANCES};
use sate::corpus::{self, Dataset, Example};
use sate::harness::{self, recipe_model, run_recipe, Pretrained, Settings, System};
use sate::model::{AnyModel, Checkpoint};
use sate::numerics::Tensor;
use sate::{ctc, SateError};

fn err(e: SateError) -> PyErr {
    match e {
        SateError::Config(_) | SateError::Dimension { .. } | SateError::Contract(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

fn settings(overrides: Option<HashMap<String, String>>) -> PyResult<Settings> {
    let mut pairs: Vec<String> = overrides
        .unwrap_or_default()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    pairs.sort();
    Settings::load(None, &pairs).map_err(err)
}

/// CTC negative log-likelihood of `labels` under per-frame log-probabilities
/// (blank is column 0); `None` when no alignment fits.
#[pyfunction]
fn ctc_loss(log_probs: Vec<Vec<f32>>, labels: Vec<usize>) -> PyResult<Option<f64>> {
    ctc::ctc_loss_value(&matrix(log_probs)?, &labels).map_err(err)
}

/// The same quantity by enumerating every alignment; small inputs only.
#[pyfunction]
fn brute_force_ctc(log_probs: Vec<Vec<f32>>, labels: Vec<usize>) -> PyResult<Option<f64>> {
    ctc::brute_force_ctc(&matrix(log_probs)?, &labels).map_err(err)
}

#[pyfunction]
fn ctc_greedy_decode(log_probs: Vec<Vec<f32>>) -> PyResult<Vec<usize>> {
    Ok(ctc::ctc_greedy_decode(&matrix(log_probs)?))
}

#[pyfunction]
fn wer(hyp: Vec<usize>, reference: Vec<usize>) -> f64 {
    corpus::wer(&hyp, &reference)
}

#[pyfunction]
fn bleu4(hyps: Vec<Vec<usize>>, refs: Vec<Vec<usize>>) -> f64 {
    corpus::bleu4(&hyps, &refs)
}

/// Per-query localness of an attention matrix over its first `length` keys.
#[pyfunction]
fn localness(rows: Vec<Vec<f32>>, length: usize) -> PyResult<Option<Vec<f64>>> {
    let keys = rows.first().map_or(0, Vec::len);
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    sate::analysis::localness(&flat, keys, length).map_err(err)
}

#[pyfunction]
fn lr_at(step: usize, peak: f64, warmup: usize) -> f64 {
    harness::lr_at(step, peak, warmup)
}

#[pyfunction]
fn average_checkpoints(paths: Vec<PathBuf>, out: PathBuf) -> PyResult<()> {
    let loaded = paths
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<sate::Result<Vec<_>>>()
        .map_err(err)?;
    harness::average_checkpoints(&loaded.iter().collect::<Vec<_>>())
        .and_then(|c| c.save(&out))
        .map_err(err)
}

/// A generated synthetic corpus.
#[pyclass(frozen)]
struct Corpus {
    data: Dataset,
}

impl Corpus {
    fn split(&self, name: &str) -> PyResult<&[Example]> {
        self.data.split(name).map_err(err)
    }
}

#[pymethods]
impl Corpus {
    /// `settings` maps `data.*` keys (e.g. `"data.n_train"`) to values.
    #[new]
    #[pyo3(signature = (settings=None))]
    fn new(settings: Option<HashMap<String, String>>) -> PyResult<Self> {
        let s = self::settings(settings)?;
        Ok(Corpus {
            data: corpus::generate(&s.data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Corpus {
            data: corpus::load_dataset(&dir).map_err(err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        corpus::save_dataset(&dir, &self.data).map_err(err)
    }

    fn size(&self, split: &str) -> PyResult<usize> {
        Ok(self.split(split)?.len())
    }

    /// `(source, target, features)` of one example.
    fn example(&self, split: &str, index: usize) -> PyResult<(Vec<usize>, Vec<usize>, Vec<Vec<f32>>)> {
        let ex = self
            .split(split)?
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        let rows = (0..ex.frames()).map(|i| ex.features.row(i).to_vec()).collect();
        Ok((ex.source.clone(), ex.target.clone(), rows))
    }

    fn spec(&self) -> String {
        self.data.spec.to_text()
    }
}

/// A trained or freshly initialized model.
#[pyclass(frozen)]
struct Model {
    model: AnyModel,
}

#[pymethods]
impl Model {
    /// Builds the model `recipe.kind` describes, randomly initialized.
    #[new]
    #[pyo3(signature = (settings=None, seed=0))]
    fn new(settings: Option<HashMap<String, String>>, seed: u64) -> PyResult<Self> {
        let s = self::settings(settings)?;
        let (kind, cfg) = recipe_model(&s).map_err(err)?;
        Ok(Model {
            model: AnyModel::new(kind, &cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, settings=None))]
    fn load(path: PathBuf, settings: Option<HashMap<String, String>>) -> PyResult<Self> {
        let s = self::settings(settings)?;
        let (kind, cfg) = recipe_model(&s).map_err(err)?;
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        Ok(Model {
            model: AnyModel::from_checkpoint(kind, &cfg, &ckpt).map_err(err)?,
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.model.kind().name()
    }

    fn num_parameters(&self) -> usize {
        self.model.store().num_elements()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.model.checkpoint().save(&path).map_err(err)
    }

    /// Output tokens for one corpus example.
    #[pyo3(signature = (corpus, split, index, beam=4))]
    fn decode(&self, corpus: &Corpus, split: &str, index: usize, beam: usize) -> PyResult<Vec<usize>> {
        let ex = corpus
            .split(split)?
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        let max_len = harness::decode_limit(&corpus.data.spec);
        Ok(self.model.decode(ex, beam, max_len).map_err(err)?.tokens)
    }

    /// `(metric, value)`: BLEU for translating models, WER for ASR.
    #[pyo3(signature = (corpus, split="test", beam=4))]
    fn evaluate(&self, corpus: &Corpus, split: &str, beam: usize) -> PyResult<(&'static str, f64)> {
        let r = harness::evaluate(&System::Model(&self.model), &corpus.data, split, beam).map_err(err)?;
        Ok((r.metric, r.value))
    }

    /// Mean encoder localness per layer over the fixed dev evaluation slice.
    fn localness(&self, corpus: &Corpus) -> PyResult<Vec<f64>> {
        let slice = evaluation_slice(&corpus.data.dev, EVAL_UTTERANCES, EVAL_SEED);
        let report = model_report(self.kind(), &self.model, &slice).map_err(err)?;
        Ok(report.layers.iter().map(|l| l.mean).collect())
    }
}

/// Trains the recipe in `settings` on `corpus` and returns the model with
/// its best checkpoints averaged, plus the metrics log rows.
#[pyfunction]
#[pyo3(signature = (corpus, settings=None))]
fn train(corpus: &Corpus, settings: Option<HashMap<String, String>>) -> PyResult<(Model, Vec<(usize, String, String, f64)>)> {
    let mut s = self::settings(settings)?;
    s.data = corpus.data.spec.clone();
    let pre = Pretrained::load(&s).map_err(err)?;
    let trained = run_recipe(&s, &corpus.data, &pre).map_err(err)?;
    let log = trained
        .outcome
        .log
        .rows
        .into_iter()
        .map(|r| (r.step, r.split, r.metric, r.value))
        .collect();
    Ok((Model { model: trained.model }, log))
}

#[pymodule]
fn sate_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_ctc, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_greedy_decode, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(bleu4, m)?)?;
    m.add_function(wrap_pyfunction!(localness, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(average_checkpoints, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Corpus>()?;
    m.add_class::<Model>()?;
    Ok(())
}
