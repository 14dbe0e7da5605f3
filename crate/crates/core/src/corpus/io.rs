use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use sha2::{Digest, Sha256};

use super::synth::{Dataset, Example, SynthSpec};
use crate::error::{Result, SateError};
use crate::numerics::Tensor;

fn join(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_ids(s: &str, what: &'static str) -> Result<Vec<usize>> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| SateError::format(what, format!("bad token id {t:?}"))))
        .collect()
}

/// One line per example: `SRC<TAB>TGT<TAB>base64(f32 LE frames)`.
pub fn write_split(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        let bytes: Vec<u8> = ex.features.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        writeln!(w, "{}\t{}\t{}", join(&ex.source), join(&ex.target), STANDARD.encode(bytes))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_split(path: &Path, d_feat: usize) -> Result<Vec<Example>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |d: String| SateError::format("dataset line", format!("{}:{}: {d}", path.display(), n + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(bad(format!("{} columns", cols.len())));
        }
        let bytes = STANDARD.decode(cols[2]).map_err(|e| bad(e.to_string()))?;
        if bytes.len() % (4 * d_feat) != 0 || bytes.is_empty() {
            return Err(bad(format!("{} feature bytes for width {d_feat}", bytes.len())));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(Example {
            features: Tensor::new(vec![data.len() / d_feat, d_feat], data)?,
            source: parse_ids(cols[0], "source ids")?,
            target: parse_ids(cols[1], "target ids")?,
        });
    }
    Ok(out)
}

fn spec_to_text(s: &SynthSpec) -> String {
    let pairs = [
        ("vocab_size", s.vocab_size.to_string()),
        ("min_len", s.min_len.to_string()),
        ("max_len", s.max_len.to_string()),
        ("min_frames_per_token", s.min_frames_per_token.to_string()),
        ("max_frames_per_token", s.max_frames_per_token.to_string()),
        ("frame_repeat", s.frame_repeat.to_string()),
        ("d_feat", s.d_feat.to_string()),
        ("noise", s.noise.to_string()),
        ("permute_vocab", s.permute_vocab.to_string()),
        ("swap_fraction", s.swap_fraction.to_string()),
        ("allow_repeats", s.allow_repeats.to_string()),
        ("n_train", s.n_train.to_string()),
        ("n_dev", s.n_dev.to_string()),
        ("n_test", s.n_test.to_string()),
        ("seed", s.seed.to_string()),
    ];
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

impl SynthSpec {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| SateError::config(format!("bad value {v:?} for {k}")))
        }
        match key {
            "vocab_size" => self.vocab_size = p(key, value)?,
            "min_len" => self.min_len = p(key, value)?,
            "max_len" => self.max_len = p(key, value)?,
            "min_frames_per_token" => self.min_frames_per_token = p(key, value)?,
            "max_frames_per_token" => self.max_frames_per_token = p(key, value)?,
            "frame_repeat" => self.frame_repeat = p(key, value)?,
            "d_feat" => self.d_feat = p(key, value)?,
            "noise" => self.noise = p(key, value)?,
            "permute_vocab" => self.permute_vocab = p(key, value)?,
            "swap_fraction" => self.swap_fraction = p(key, value)?,
            "allow_repeats" => self.allow_repeats = p(key, value)?,
            "n_train" => self.n_train = p(key, value)?,
            "n_dev" => self.n_dev = p(key, value)?,
            "n_test" => self.n_test = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            _ => return Err(SateError::config(format!("unknown corpus key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        spec_to_text(self)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = SynthSpec::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SateError::config(format!("expected key=value, got {line:?}")))?;
            s.set(k.trim(), v.trim())?;
        }
        Ok(s)
    }
}

/// Writes `spec.txt` and `{train,dev,test}.tsv` into `dir`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("spec.txt"), data.spec.to_text())?;
    write_split(&dir.join("train.tsv"), &data.train)?;
    write_split(&dir.join("dev.tsv"), &data.dev)?;
    write_split(&dir.join("test.tsv"), &data.test)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let spec = SynthSpec::from_text(&fs::read_to_string(dir.join("spec.txt"))?)?;
    Ok(Dataset {
        train: read_split(&dir.join("train.tsv"), spec.d_feat)?,
        dev: read_split(&dir.join("dev.tsv"), spec.d_feat)?,
        test: read_split(&dir.join("test.tsv"), spec.d_feat)?,
        spec,
    })
}

/// SHA-256 over the spec text and every split file, in a fixed order.
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in ["spec.txt", "train.tsv", "dev.tsv", "test.tsv"] {
        h.update(name.as_bytes());
        h.update(fs::read(dir.join(name))?);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate;

    #[test]
    fn dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_train: 20,
            n_dev: 5,
            n_test: 5,
            seed: 9,
            noise: 0.25,
            ..SynthSpec::default()
        };
        let data = generate(&spec).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), data);
        let d1 = dataset_digest(dir.path()).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        assert_eq!(dataset_digest(dir.path()).unwrap(), d1);
        assert_eq!(d1.len(), 64);
    }

    #[test]
    fn spec_text_round_trips() {
        let spec = SynthSpec {
            swap_fraction: 0.3,
            allow_repeats: true,
            ..SynthSpec::default()
        };
        assert_eq!(SynthSpec::from_text(&spec.to_text()).unwrap(), spec);
        assert!(SynthSpec::from_text("nope=1").is_err());
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tsv");
        fs::write(&p, "1 2\t3 4\n").unwrap();
        assert!(read_split(&p, 4).is_err());
        fs::write(&p, "1 2\t3 x\tAAAAAA==\n").unwrap();
        assert!(read_split(&p, 1).is_err());
    }
}
