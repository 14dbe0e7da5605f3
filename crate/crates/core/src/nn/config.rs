use crate::error::{Result, SateError};

/// How the adaptor builds the textual encoder's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptorKind {
    /// Acoustic states pass through unchanged.
    None,
    /// Expected token embedding under the CTC distribution only.
    Soft,
    /// `ReLU(W·h + b)` only.
    Mapping,
    /// `λ·mapping + (1−λ)·soft`.
    Fusion,
}

impl AdaptorKind {
    pub fn name(self) -> &'static str {
        match self {
            AdaptorKind::None => "none",
            AdaptorKind::Soft => "soft",
            AdaptorKind::Mapping => "mapping",
            AdaptorKind::Fusion => "fusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => AdaptorKind::None,
            "soft" => AdaptorKind::Soft,
            "mapping" => AdaptorKind::Mapping,
            "fusion" => AdaptorKind::Fusion,
            other => return Err(SateError::config(format!("unknown adaptor `{other}`"))),
        })
    }
}

/// Architecture and loss-weight hyperparameters shared by every model kind.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_feat: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_layers_acoustic: usize,
    pub n_layers_textual: usize,
    pub n_layers_decoder: usize,
    /// Token vocabulary plus the blank at id 0.
    pub vocab_size: usize,
    pub dropout: f32,
    pub label_smoothing: f32,
    /// CTC weight in the interpolated objective.
    pub alpha: f64,
    /// Weight of the mapped acoustic representation in the adaptor.
    pub lambda: f32,
    /// Ground-truth vs. teacher weight on the CTC side of distillation.
    pub beta: f64,
    /// Ground-truth vs. teacher weight on the translation side of distillation.
    pub gamma: f64,
    /// 1-based encoder layer whose output feeds the CTC head.
    pub ctc_layer_index: usize,
    pub max_seq_len: usize,
    pub adaptor: AdaptorKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_feat: 16,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            n_layers_acoustic: 6,
            n_layers_textual: 3,
            n_layers_decoder: 3,
            vocab_size: 41,
            dropout: 0.1,
            label_smoothing: 0.1,
            alpha: 0.3,
            lambda: 0.5,
            beta: 0.5,
            gamma: 0.5,
            ctc_layer_index: 6,
            max_seq_len: 512,
            adaptor: AdaptorKind::Fusion,
        }
    }
}

impl ModelConfig {
    /// Applies one `key=value` setting; field names are the keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| SateError::config(format!("bad value {v:?} for {k}")))
        }
        match key {
            "d_feat" => self.d_feat = p(key, value)?,
            "d_model" => self.d_model = p(key, value)?,
            "n_heads" => self.n_heads = p(key, value)?,
            "d_ffn" => self.d_ffn = p(key, value)?,
            "n_layers_acoustic" => self.n_layers_acoustic = p(key, value)?,
            "n_layers_textual" => self.n_layers_textual = p(key, value)?,
            "n_layers_decoder" => self.n_layers_decoder = p(key, value)?,
            "vocab_size" => self.vocab_size = p(key, value)?,
            "dropout" => self.dropout = p(key, value)?,
            "label_smoothing" => self.label_smoothing = p(key, value)?,
            "alpha" => self.alpha = p(key, value)?,
            "lambda" => self.lambda = p(key, value)?,
            "beta" => self.beta = p(key, value)?,
            "gamma" => self.gamma = p(key, value)?,
            "ctc_layer_index" => self.ctc_layer_index = p(key, value)?,
            "max_seq_len" => self.max_seq_len = p(key, value)?,
            "adaptor" => self.adaptor = AdaptorKind::parse(value)?,
            _ => return Err(SateError::config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    /// `key=value` lines accepted back by [`ModelConfig::set`].
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_feat", self.d_feat.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_ffn", self.d_ffn.to_string()),
            ("n_layers_acoustic", self.n_layers_acoustic.to_string()),
            ("n_layers_textual", self.n_layers_textual.to_string()),
            ("n_layers_decoder", self.n_layers_decoder.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("dropout", self.dropout.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("alpha", self.alpha.to_string()),
            ("lambda", self.lambda.to_string()),
            ("beta", self.beta.to_string()),
            ("gamma", self.gamma.to_string()),
            ("ctc_layer_index", self.ctc_layer_index.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("adaptor", self.adaptor.name().to_string()),
        ]
    }

    /// Number of real tokens, i.e. rows of the shared embedding table.
    pub fn num_tokens(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SateError::config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_feat == 0 || self.d_ffn == 0 {
            return fail("d_feat and d_ffn must be positive".into());
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must include the blank and at least one token".into());
        }
        if self.n_layers_acoustic == 0 || self.n_layers_textual == 0 || self.n_layers_decoder == 0 {
            return fail("every stack needs at least one layer".into());
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda = {} outside [0, 1]", self.lambda));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("dropout and label_smoothing must lie in [0, 1)".into());
        }
        if self.ctc_layer_index == 0 || self.ctc_layer_index > self.n_layers_acoustic {
            return fail(format!(
                "ctc_layer_index {} outside 1..={}",
                self.ctc_layer_index, self.n_layers_acoustic
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn pairs_round_trip() {
        let cfg = ModelConfig {
            lambda: 0.25,
            adaptor: AdaptorKind::Soft,
            ctc_layer_index: 3,
            ..Default::default()
        };
        let mut back = ModelConfig::default();
        for (k, v) in cfg.to_pairs() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert!(back.set("depth", "3").is_err());
        assert!(back.set("alpha", "x").is_err());
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            ModelConfig { n_heads: 3, ..Default::default() },
            ModelConfig { alpha: 1.5, ..Default::default() },
            ModelConfig { lambda: -0.1, ..Default::default() },
            ModelConfig { ctc_layer_index: 0, ..Default::default() },
            ModelConfig { ctc_layer_index: 7, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(SateError::Config(_))), "{cfg:?}");
        }
    }
}
