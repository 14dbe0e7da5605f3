use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::localness::{layer_localness, WINDOW_RULE};
use crate::corpus::Example;
use crate::error::{Result, SateError};
use crate::model::{AnyModel, Checkpoint, ModelKind};
use crate::nn::{AttentionTrace, LayerAttention};
use crate::numerics::Tensor;

/// Size of the held-out slice localness is measured on.
pub const EVAL_UTTERANCES: usize = 200;
pub const EVAL_SEED: u64 = 17;

/// Position of a layer relative to the CTC head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    /// At or below the layer feeding the CTC head.
    Below,
    Above,
    /// The model has no CTC head.
    NoCtc,
}

impl Group {
    pub fn tag(self) -> &'static str {
        match self {
            Group::Below => "below-CTC",
            Group::Above => "above-CTC",
            Group::NoCtc => "none",
        }
    }

    fn of(layer: usize, ctc_layer_index: Option<usize>) -> Self {
        match ctc_layer_index {
            Some(k) if layer <= k => Group::Below,
            Some(_) => Group::Above,
            None => Group::NoCtc,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerLocalness {
    /// 1-based encoder layer.
    pub layer: usize,
    pub group: Group,
    pub mean: f64,
    pub n_utterances: usize,
}

/// Per-layer mean localness of one model over an evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalnessReport {
    pub model_tag: String,
    pub ctc_layer_index: Option<usize>,
    pub window_rule: &'static str,
    pub layers: Vec<LayerLocalness>,
    /// Utterances shorter than two positions.
    pub skipped: usize,
}

impl LocalnessReport {
    /// Mean of the per-layer means.
    pub fn mean(&self) -> f64 {
        mean(self.layers.iter().map(|l| l.mean))
    }

    /// Mean over the layers of `group`, `None` if it has none.
    pub fn group_mean(&self, group: Group) -> Option<f64> {
        let v: Vec<f64> = self.layers.iter().filter(|l| l.group == group).map(|l| l.mean).collect();
        (!v.is_empty()).then(|| mean(v.into_iter()))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (n, s) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Averages localness per layer: first over heads and positions within an
/// utterance, then over utterances.
pub fn layer_report(
    model_tag: &str,
    traces: &[AttentionTrace],
    ctc_layer_index: Option<usize>,
) -> Result<LocalnessReport> {
    let depth = traces.first().map_or(0, |t| t.layers.len());
    if let Some(t) = traces.iter().find(|t| t.layers.len() != depth) {
        return Err(SateError::Contract(format!(
            "traces disagree on depth: {} vs {depth}",
            t.layers.len()
        )));
    }
    if let Some(k) = ctc_layer_index {
        if k == 0 || k > depth {
            return Err(SateError::config(format!("ctc layer {k} outside 1..={depth}")));
        }
    }
    let mut sums = vec![0.0; depth];
    let mut used = 0;
    let mut skipped = 0;
    for trace in traces {
        let mut per_layer = Vec::with_capacity(depth);
        for layer in &trace.layers {
            match layer_localness(layer, trace.valid_len)? {
                Some(v) => per_layer.push(v),
                None => break,
            }
        }
        if per_layer.len() < depth {
            skipped += 1;
            continue;
        }
        used += 1;
        sums.iter_mut().zip(per_layer).for_each(|(s, v)| *s += v);
    }
    let layers = sums
        .into_iter()
        .enumerate()
        .map(|(i, s)| LayerLocalness {
            layer: i + 1,
            group: Group::of(i + 1, ctc_layer_index),
            mean: if used == 0 { 0.0 } else { s / used as f64 },
            n_utterances: used,
        })
        .collect();
    Ok(LocalnessReport {
        model_tag: model_tag.to_string(),
        ctc_layer_index,
        window_rule: WINDOW_RULE,
        layers,
        skipped,
    })
}

/// Fixed seeded subset of `examples`, kept in corpus order.
pub fn evaluation_slice(examples: &[Example], n: usize, seed: u64) -> Vec<&Example> {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| &examples[i]).collect()
}

/// Traces the encoder of `model` on every example and reports its localness.
/// Speech models read the features; the MT model reads the source tokens.
pub fn model_report(model_tag: &str, model: &AnyModel, examples: &[&Example]) -> Result<LocalnessReport> {
    let traces = examples
        .iter()
        .map(|ex| model.encoder_trace(ex))
        .collect::<Result<Vec<_>>>()?;
    let ctc = match model.kind() {
        ModelKind::Mt => None,
        _ => Some(model.config().ctc_layer_index),
    };
    layer_report(model_tag, &traces, ctc)
}

/// Writes the header and the rows of every report: one per layer, then one
/// per group with `layer = all`.
pub fn write_csv<W: Write>(reports: &[LocalnessReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| SateError::format("localness csv", e.to_string());
    w.write_record(["model_tag", "layer", "group", "mean_localness", "n_utterances", "window_rule"])
        .map_err(wrap)?;
    for r in reports {
        let n = r.layers.first().map_or(0, |l| l.n_utterances).to_string();
        for l in &r.layers {
            w.write_record([
                r.model_tag.as_str(),
                &l.layer.to_string(),
                l.group.tag(),
                &format!("{:.6}", l.mean),
                &n,
                r.window_rule,
            ])
            .map_err(wrap)?;
        }
        for g in [Group::Below, Group::Above, Group::NoCtc] {
            if let Some(m) = r.group_mean(g) {
                w.write_record([r.model_tag.as_str(), "all", g.tag(), &format!("{m:.6}"), &n, r.window_rule])
                    .map_err(wrap)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(report: &LocalnessReport, path: &Path) -> Result<()> {
    write_csv(std::slice::from_ref(report), std::fs::File::create(path)?)
}

/// Stores a trace in the checkpoint format, one `[queries × keys]` record
/// per head named `layer{i}.head{h}.attn` (both 1-based), plus `valid_len`.
pub fn save_trace(trace: &AttentionTrace, path: &Path) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    ckpt.push("valid_len", Tensor::scalar(trace.valid_len as f32));
    for (i, layer) in trace.layers.iter().enumerate() {
        for h in 0..layer.heads {
            let t = Tensor::new(vec![layer.queries, layer.keys], layer.head(h).to_vec())?;
            ckpt.push(format!("layer{}.head{}.attn", i + 1, h + 1), t);
        }
    }
    ckpt.save(path)
}

pub fn load_trace(path: &Path) -> Result<AttentionTrace> {
    let ckpt = Checkpoint::load(path)?;
    let bad = |d: String| SateError::format("trace file", d);
    let valid_len = ckpt.get("valid_len").ok_or_else(|| bad("missing valid_len".into()))?.item() as usize;
    let mut trace = AttentionTrace::new(valid_len);
    for i in 1.. {
        let mut heads: Vec<&Tensor> = Vec::new();
        while let Some(t) = ckpt.get(&format!("layer{i}.head{}.attn", heads.len() + 1)) {
            heads.push(t);
        }
        let Some(first) = heads.first() else { break };
        let (queries, keys) = first.dims2();
        if heads.iter().any(|t| t.shape() != [queries, keys]) {
            return Err(bad(format!("layer {i} heads differ in shape")));
        }
        trace.layers.push(LayerAttention {
            heads: heads.len(),
            queries,
            keys,
            weights: heads.iter().flat_map(|t| t.data().iter().copied()).collect(),
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(weights_per_head: &[Vec<f32>], l: usize) -> LayerAttention {
        LayerAttention {
            heads: weights_per_head.len(),
            queries: l,
            keys: l,
            weights: weights_per_head.concat(),
        }
    }

    fn identity(l: usize) -> Vec<f32> {
        (0..l * l).map(|k| if k / l == k % l { 1.0 } else { 0.0 }).collect()
    }

    fn uniform(l: usize) -> Vec<f32> {
        vec![1.0 / l as f32; l * l]
    }

    fn trace(l: usize) -> AttentionTrace {
        AttentionTrace {
            valid_len: l,
            layers: vec![
                layer(&[identity(l), identity(l)], l),
                layer(&[identity(l), uniform(l)], l),
                layer(&[uniform(l), uniform(l)], l),
            ],
        }
    }

    #[test]
    fn groups_split_at_ctc_layer() {
        let r = layer_report("asr", &[trace(10), trace(10)], Some(2)).unwrap();
        assert_eq!(r.layers.len(), 3);
        assert_eq!(r.layers[0].group, Group::Below);
        assert_eq!(r.layers[1].group, Group::Below);
        assert_eq!(r.layers[2].group, Group::Above);
        assert!((r.layers[0].mean - 1.0).abs() < 1e-9);
        assert!((r.layers[1].mean - 0.64).abs() < 1e-6);
        assert!((r.layers[2].mean - 0.28).abs() < 1e-6);
        assert!((r.group_mean(Group::Below).unwrap() - 0.82).abs() < 1e-6);
        assert!(r.layers.iter().all(|l| l.n_utterances == 2 && (0.0..=1.0).contains(&l.mean)));
    }

    #[test]
    fn skips_short_utterances_and_checks_depth() {
        let r = layer_report("mt", &[trace(10), trace(1)], None).unwrap();
        assert_eq!((r.skipped, r.layers[0].n_utterances), (1, 1));
        assert_eq!(r.group_mean(Group::Below), None);
        let mut shallow = trace(10);
        shallow.layers.pop();
        assert!(layer_report("x", &[trace(10), shallow], None).is_err());
        assert!(layer_report("x", &[trace(10)], Some(4)).is_err());
    }

    #[test]
    fn csv_has_fixed_columns() {
        let r = layer_report("e2e,ctc2", &[trace(10)], Some(2)).unwrap();
        let mut buf = Vec::new();
        write_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "model_tag,layer,group,mean_localness,n_utterances,window_rule"
        );
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 5);
        assert!(rows[0].starts_with("\"e2e,ctc2\",1,below-CTC,1.000000,1,"));
        assert!(rows[4].contains(",all,above-CTC,0.280000,"));
    }

    #[test]
    fn trace_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.bin");
        let t = trace(6);
        save_trace(&t, &path).unwrap();
        assert_eq!(load_trace(&path).unwrap(), t);
        let names: Vec<String> = Checkpoint::load(&path).unwrap().iter().map(|(n, _)| n.to_string()).collect();
        assert!(names.contains(&"layer3.head2.attn".to_string()));
    }

    #[test]
    fn evaluation_slice_is_fixed() {
        let spec = crate::corpus::SynthSpec {
            n_train: 30,
            n_dev: 0,
            n_test: 0,
            ..Default::default()
        };
        let data = crate::corpus::generate(&spec).unwrap();
        let a = evaluation_slice(&data.train, 10, EVAL_SEED);
        let b = evaluation_slice(&data.train, 10, EVAL_SEED);
        assert_eq!(a.len(), 10);
        assert!(a.iter().zip(&b).all(|(x, y)| std::ptr::eq(*x, *y)));
        assert_eq!(evaluation_slice(&data.train, 100, 1).len(), 30);
    }
}
