/// Attention weights of one layer: `heads × queries × keys`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub weights: Vec<f32>,
}

impl LayerAttention {
    pub fn head(&self, h: usize) -> &[f32] {
        let n = self.queries * self.keys;
        &self.weights[h * n..(h + 1) * n]
    }

    pub fn row(&self, h: usize, query: usize) -> &[f32] {
        let start = (h * self.queries + query) * self.keys;
        &self.weights[start..start + self.keys]
    }
}

/// Self-attention weights recorded layer by layer during one forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionTrace {
    /// Number of unpadded positions.
    pub valid_len: usize,
    pub layers: Vec<LayerAttention>,
}

impl AttentionTrace {
    pub fn new(valid_len: usize) -> Self {
        AttentionTrace {
            valid_len,
            layers: Vec::new(),
        }
    }
}
